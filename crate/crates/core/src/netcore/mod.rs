//! Numerics substrate: tensors, seeded RNG, the noise-prediction network, a
//! reverse-mode tape and a finite-difference oracle.

pub mod fd;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use fd::finite_diff_grad;
pub use model::{
    layer_specs, run_network, run_stage, stages, time_embedding, ActivationRecord, Affine, Arch,
    BoundWeights, ForwardTrace, LayerActivation, LayerRole, LayerSpec, LayerTrace, LayerView,
    NoisePredictor, Stage,
};
pub use optim::Adam;
pub use rng::{rng_normal, Rng};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
