//! Dense matrix storage, seeded randomness, and parameter initialization.

pub mod matrix;
pub mod rng;

pub use matrix::{dot, Matrix};
pub use rng::SeededRng;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How to fill a freshly allocated parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Every entry zero. Used for biases and the linear-expert coefficients.
    Zeros,
    /// Uniform in (-b, b) with b = sqrt(1 / fan_in), fan_in = cols. The usual
    /// fan-in scaled initialization for small MLP layers.
    UniformKaiming,
    /// Uniform in (-0.01, 0.01). Used for gating weights so the mixture
    /// starts close to uniform.
    SmallUniform,
}

/// Draw a (rows x cols) matrix per the scheme. Deterministic given the rng.
pub fn init_params(rows: usize, cols: usize, scheme: InitScheme, rng: &mut SeededRng) -> Result<Matrix> {
    let mut m = Matrix::zeros(rows, cols)?;
    match scheme {
        InitScheme::Zeros => {}
        InitScheme::UniformKaiming => {
            let bound = (1.0 / cols as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.uniform_in(-bound, bound);
            }
        }
        InitScheme::SmallUniform => {
            for v in m.as_mut_slice() {
                *v = rng.uniform_in(-0.01, 0.01);
            }
        }
    }
    Ok(m)
}
