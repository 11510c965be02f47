//! Center-sensitive kernel optimization for on-device class-incremental
//! learning.

pub mod conv;
pub mod cost;
pub mod csko;
pub mod dces;
pub mod error;
pub mod harness;
pub mod intensity;
pub mod kv;
pub mod linalg;
pub mod net;
pub mod ogp;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tsr;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor4;

pub type Tensor4f = Tensor4<f32>;
pub type Tensor4d = Tensor4<f64>;
pub type Modelf = net::Model<f32>;
pub type Modeld = net::Model<f64>;
