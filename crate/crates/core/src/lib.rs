//! Diffeomorphic image registration with stationary velocity fields.
//!
//! Deformations are exponentials of velocity fields computed by scaling and
//! squaring. Registration is posed as variational inference: a diagonal
//! Gaussian posterior over the velocity field is fitted against a Laplacian
//! smoothness prior and a Gaussian intensity likelihood, either per image
//! pair ([`infer`]) or amortized by a small convolutional network ([`net`]).

pub mod autodiff;
pub mod deform;
pub mod error;
pub mod eval;
pub mod grid;
pub mod infer;
pub mod io;
pub mod model;
pub mod net;
pub mod optim;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
