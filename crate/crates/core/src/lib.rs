pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod task;
pub mod tensor;
pub mod uda;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamKind, ParamStore};
pub use task::{Direction, Task};
pub use tensor::{ConvGeom, Tensor};
