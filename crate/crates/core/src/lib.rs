pub mod base_model;
pub mod calibration;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod explain;
pub mod inspect;
pub mod nn;
pub mod protolayer;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

pub type BaseModelF32 = base_model::BaseModel<f32>;
pub type BaseModelF64 = base_model::BaseModel<f64>;
pub type InterpretiveModelF32 = trainer::InterpretiveModel<f32>;
pub type InterpretiveModelF64 = trainer::InterpretiveModel<f64>;
pub type PrototypeBankF32 = protolayer::PrototypeBank<f32>;
pub type PrototypeBankF64 = protolayer::PrototypeBank<f64>;
pub type PrototypicalHeadF32 = calibration::PrototypicalHead<f32>;
pub type PrototypicalHeadF64 = calibration::PrototypicalHead<f64>;
