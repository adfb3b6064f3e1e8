//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every primitive is executed eagerly and appended to a [`Tape`]; calling
//! [`Tape::backward`] on a `1×1` result walks the tape once in reverse and
//! returns gradients for every parameter registered in a [`ParamStore`].
//!
//! ```
//! use pmp_autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let x = store.add("x", Tensor::scalar(3.0));
//! let mut tape = Tape::new();
//! let xv = tape.param(&store, x).unwrap();
//! let y = tape.mul(xv, xv).unwrap();
//! let grads = tape.backward(y, &store).unwrap();
//! assert_eq!(grads.get(x).data()[0], 6.0);
//! ```

mod error;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
