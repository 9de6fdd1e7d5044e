//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: row-major tensors, a tape that records
//! the handful of operations a point-set network needs, an Adam optimizer
//! with step decay, a central-difference gradient checker and a binary
//! checkpoint format.
//!
//! ```
//! use numkit::{ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::<f64>::new();
//! let p = params.add("p", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&params, p);
//! let loss = tape.sum(x);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param_grads(&params)[0].data(), &[1.0, 1.0, 1.0]);
//! ```

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState, StepDecay};
pub use error::{NumError, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
