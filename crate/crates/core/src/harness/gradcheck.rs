//! Finite-difference check of the analytic fast-weight gradient.

use nalgebra::DVector;

use crate::engine::sub_seed;
use crate::error::{Error, Result};
use crate::fast_weight::{finite_diff_gradient, relative_error, ttt_gradient, FastWeights, HeadMatrices};
use crate::nn::{gaussian_matrix, gaussian_vector, seeded_rng};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_HEADS: usize = 2;

/// One random problem: unit queries, `O(1)` weights and posterior.
pub fn gradcheck_instance(d_head: usize, seed: u64) -> (FastWeights, Vec<DVector<f64>>, DVector<f64>) {
    let mut rng = seeded_rng(seed);
    let std = 1.0 / (d_head as f64).sqrt();
    let heads = (0..GRADCHECK_HEADS)
        .map(|_| HeadMatrices {
            w1: gaussian_matrix(d_head, d_head, std, &mut rng),
            w2: gaussian_matrix(d_head, d_head, std, &mut rng),
            w3: gaussian_matrix(d_head, d_head, std, &mut rng),
        })
        .collect();
    let queries = (0..GRADCHECK_HEADS)
        .map(|_| {
            let q = gaussian_vector(d_head, 1.0, &mut rng);
            let n = q.norm();
            if n > 0.0 {
                q / n
            } else {
                q
            }
        })
        .collect();
    let posterior = gaussian_vector(GRADCHECK_HEADS * d_head, 1.0, &mut rng);
    (FastWeights { heads }, queries, posterior)
}

/// Maximum relative Frobenius error over `instances` problems for each `d_head`.
pub fn gradcheck_suite(seed: u64, instances: usize, d_heads: &[usize]) -> Result<f64> {
    if instances == 0 || d_heads.is_empty() || d_heads.contains(&0) {
        return Err(Error::invalid("gradcheck needs ≥ 1 instance and positive head widths"));
    }
    let mut worst: f64 = 0.0;
    for (k, &d) in d_heads.iter().enumerate() {
        for i in 0..instances {
            let (fw, q, p) = gradcheck_instance(d, sub_seed(seed, (k * instances + i) as u64));
            let analytic = ttt_gradient(&fw, &q, &p)?;
            let numeric = finite_diff_gradient(&fw, &q, &p, GRADCHECK_STEP)?;
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    Ok(worst)
}
