//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Everything runs in double precision on the CPU so that analytic gradients
//! can be compared against central finite differences at tight tolerances.
//!
//! ```
//! use herbs_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::new([2], vec![1.0, 3.0]));
//! let y = x.square().sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 6.0]);
//! ```

pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::Conv2dGeometry;
pub use params::{Init, Param, ParamId, ParamStore, Session};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Re-exported so downstream crates seed initialisers with the same generator.
pub use rand_chacha::ChaCha8Rng;
