//! Dense `f64` tensors with a reverse-mode automatic differentiation tape.
//!
//! Values are plain [`Tensor`]s. Computation is recorded by creating
//! [`Var`]s on a [`Tape`] and combining them with the ops in this crate;
//! [`Tape::backward`] then fills in gradients for every node that requires one.
//!
//! ```
//! use supforge_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod conv;
mod error;
pub mod gradcheck;
mod loss;
mod ops;
mod sample;
mod tape;
mod tensor;
mod volume;

pub use conv::{conv2d, deform_conv2d};
pub use error::{Result, TensorError};
pub use loss::{smooth_l1, Reduction};
pub use ops::LEAKY_RELU_SLOPE;
pub use sample::{bilinear_sample, isa_aggregate, upsample_bilinear};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use volume::{concat_fuse, concat_volume, correlation_volume};
