//! Synthetic inner sequences `ω_k = ω* + ω̃ / k^α` with a known error profile.

use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOmegaSeq {
    pub omega_star: Vector,
    pub omega_tilde: Vector,
    pub alpha: f64,
}

impl SyntheticOmegaSeq {
    pub fn new(omega_star: Vector, omega_tilde: Vector, alpha: f64) -> Result<Self> {
        if omega_star.len() != omega_tilde.len() {
            return Err(Error::DimensionMismatch {
                what: "omega_tilde",
                expected: omega_star.len(),
                actual: omega_tilde.len(),
            });
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "decay exponent must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            omega_star,
            omega_tilde,
            alpha,
        })
    }

    /// `ω_k` for `k ≥ 1`.
    pub fn at(&self, k: usize) -> Vector {
        assert!(k >= 1, "sequence is indexed from k = 1");
        &self.omega_star + &self.omega_tilde / (k as f64).powf(self.alpha)
    }

    /// `e_{ω,k} = ‖ω_k − ω*‖ = ‖ω̃‖ k^{−α}`.
    pub fn error_at(&self, k: usize) -> f64 {
        self.omega_tilde.norm() / (k as f64).powf(self.alpha)
    }
}

/// `ω_1 … ω_K`.
pub fn gen_omega_seq(seq: &SyntheticOmegaSeq, k: usize) -> Result<Vec<Vector>> {
    if k == 0 {
        return Err(Error::InvalidConfig("sequence length must be at least 1".into()));
    }
    Ok((1..=k).map(|i| seq.at(i)).collect())
}
