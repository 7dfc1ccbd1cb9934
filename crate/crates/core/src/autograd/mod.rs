//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive application in creation order.
//! [`Graph::backward`] walks the tape in reverse from a scalar output and
//! returns the gradient of every node that depends on a [`Graph::leaf`].
//! Nodes built from [`Graph::constant`] values or behind
//! [`Graph::stop_gradient`] are skipped.
//!
//! ```
//! use gradelab::autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let s = g.sum(sq);
//! let grads = g.backward(s).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Gradients, Graph, Op, Var};
pub use tensor::{argmax, Tensor};
