pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod heads;
pub mod io;
pub mod metrics;
pub mod model;
pub mod multiview;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
