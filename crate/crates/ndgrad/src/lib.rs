//! Dense `f64` tensors with a thread-local reverse-mode tape.
//!
//! Nothing is recorded unless a computation runs inside [`record`]. Inside
//! that scope, tensors created with [`Tensor::variable`] become leaves and
//! every op touching a recorded tensor appends a node. [`Tape::backward`]
//! then walks the nodes in reverse and returns a [`Gradients`] map.
//!
//! ```
//! use ndgrad::{record, Tensor};
//!
//! let ((x, y), tape) = record(|| {
//!     let x = Tensor::variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//!     let y = x.square().sum();
//!     (x, y)
//! })
//! .unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt_or_zeros(&x).data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod check;
mod error;
mod ops;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use tape::{is_recording, paused, record, Gradients, Tape};
pub use tensor::Tensor;
