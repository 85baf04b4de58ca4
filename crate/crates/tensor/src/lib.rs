//! Dense tensors, a reverse-mode tape and the DMT1 file format.
//!
//! ```
//! use distillmatch_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = g.square(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod attn;
mod error;
pub mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;
mod params;
mod tensor;

pub use attn::{attention, linear_attention, LINEAR_EPS};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, param_diff_check, GradCheckReport};
pub use graph::{broadcast_shape, Conv2dOptions, Graph, UnaryFn, Var};
pub use kernels::PadMode;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
