pub mod autograd;
pub mod data;
pub mod engine;
pub mod error;
pub mod inade;
pub mod label_maps;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod remap;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
