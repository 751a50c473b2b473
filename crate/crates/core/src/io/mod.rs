pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod kv;
pub mod serialize;
