//! Fake quantization of weights and activations and the quantized execution
//! wrapper around the noise predictor.

pub mod config;
pub mod model;
pub mod quantizer;

pub use config::{LayerOverride, Precision, QuantConfig, BYPASS_BITS};
pub use model::{apply_act_quant, quantized_forward, QuantView, QuantizedModel, ScaleRule, Slot};
pub use quantizer::{
    init_activation_minmax, init_scale_minmax, init_scale_mse, quantize_dequantize,
    symmetric_range, unsigned_range, Granularity, QuantizerParams, Rounding,
};
