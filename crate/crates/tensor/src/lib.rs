//! Dense `f64` tensors with a define-by-run reverse-mode gradient tape.
//!
//! Tensors are immutable values. Wrapping one with [`Tape::leaf`] makes it a
//! gradient-receiving input; every primitive applied to a tracked tensor
//! records a node, and [`Tape::backward`] sweeps the nodes in reverse.
//!
//! ```
//! use lap_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0]));
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod ops;
pub mod suite;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::{Result, TensorError};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, relative_error, GradCheckOptions, GradCheckReport,
};
pub use ops::LEAKY_SLOPE;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Tensor, MAX_RANK};
