//! Scalar activations, a dense affine layer and seeded initializers.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_dim, Result};

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx SiLU(x) = σ(x)(1 + x(1 − σ(x))).
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// ln(1 + eˣ), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Clamps `x` into the open interval `(lo, hi)`, i.e. onto `[next_up(lo), next_down(hi)]`.
///
/// Saturating activations round to their asymptotes in `f64` (σ(40) == 1.0); this keeps
/// quantities that are open-interval by definition strictly inside it.
pub fn strictly_within(x: f64, lo: f64, hi: f64) -> f64 {
    x.clamp(lo.next_up(), hi.next_down())
}

/// Epsilon inside the RMSNorm root.
pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + eps) ⊙ scale`. Maps the zero vector to zero.
pub fn rms_norm(x: &DVector<f64>, scale: &DVector<f64>) -> Result<DVector<f64>> {
    ensure_dim(scale.len(), x.len(), "rms_norm scale width")?;
    let n = x.len().max(1) as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Ok(x.component_mul(scale) * inv)
}

/// Dense affine map `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(d_out, d_in),
            bias: DVector::zeros(d_out),
        }
    }

    /// Gaussian weights with std `1/sqrt(d_in)`, zero bias.
    pub fn fan_in(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        Self {
            weight: gaussian_matrix(d_out, d_in, std, rng),
            bias: DVector::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(x.len(), self.d_in(), "linear input width")?;
        Ok(&self.weight * x + &self.bias)
    }

    /// Applies the map to every row of `x` (`rows × d_in` → `rows × d_out`).
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dim(x.ncols(), self.d_in(), "linear input width")?;
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(y)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    // Fill row-major so the draw order does not depend on nalgebra's storage order.
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

pub fn gaussian_vector(len: usize, std: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    DVector::from_iterator(len, (0..len).map(|_| normal.sample(rng)))
}
