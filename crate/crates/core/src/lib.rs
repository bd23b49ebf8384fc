//! Cross-coder model diffing.
//!
//! The crate trains a BatchTopK cross-coder on paired activations taken from a
//! base model and a modified copy of it, attributes every sparse latent to the
//! base model, the modified model or both, describes latents through an LLM
//! endpoint (or an offline mock), and scores the resulting side-effect
//! predictions against gold category labels.
//!
//! Pipeline stages map onto modules:
//!
//! | stage                        | module          |
//! |------------------------------|-----------------|
//! | paired activation files      | [`store`]       |
//! | cross-coder training         | [`crosscoder`]  |
//! | decoder norms, latent scaling| [`attribution`] |
//! | contexts, descriptions       | [`interp`]      |
//! | baselines and metrics        | [`evaluation`]  |
//! | planted ground truth         | [`synthetic`]   |
//! | operator commands            | [`cli`]         |

pub mod attribution;
pub mod cli;
pub mod crosscoder;
pub mod error;
pub mod evaluation;
pub mod interp;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable for model parameters (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
