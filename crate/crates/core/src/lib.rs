//! Token-slimmed vision transformers trained by feature recalibration
//! distillation.
//!
//! The crate is generic over the element type ([`Scalar`]): `f32` for
//! training and benchmarking, `f64` for gradient verification. Concrete
//! aliases for both are exported at the crate root.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod distill;
pub mod error;
pub mod grad_check;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod recalib;
pub mod scalar;
pub mod slim;
pub mod tensor;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use config::ModelConfig;
pub use distill::{DistillWeights, LossBreakdown, TrainPlan};
pub use error::{Result, SitError};
pub use grad_check::grad_check;
pub use io::dataset::Dataset;
pub use io::run_config::RunConfig;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use slim::{schedule, slim, tsm_attention, SlimAxis, SlimMatrix, StageSchedule, TsmParams};
pub use tensor::Tensor;
pub use vit::{Forward, VisionTransformer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Vit32 = VisionTransformer<f32>;
pub type Vit64 = VisionTransformer<f64>;
