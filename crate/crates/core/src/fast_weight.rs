//! Implicit pose memory: a per-head SwiGLU MLP whose weights are rewritten online.
//!
//! Reading the memory turns a frame into one query per head, pushes each query through
//! that head's SwiGLU block `W2 (SiLU(W1 q) ⊙ (W3 q))`, and projects the concatenated
//! outputs through an RMSNorm and a linear readout to obtain the pose prior. Writing
//! the memory takes the gradient of the alignment `⟨f_W(q_h), p_h⟩` between each head's
//! output and the matching slice of the decoder's posterior pose token, and applies
//! `W ← α W + η ⊙ ∇W` with per-head decay `α` and per-matrix learning rates `η`
//! predicted from the frame.
//!
//! The gradient is taken with respect to the per-head SwiGLU outputs before the
//! readout normalization; the readout layers are slow parameters and stay fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::frame::FramePacket;
use crate::nn::{gaussian_matrix, rms_norm, seeded_rng, sigmoid, silu, silu_prime, softplus, strictly_within, Linear};

/// Std of the Gaussian used to initialise the fast weights.
pub const FAST_WEIGHT_INIT_STD: f64 = 0.02;

/// Number of matrices per head (`W1`, `W2`, `W3`).
pub const MATRICES_PER_HEAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastWeightConfig {
    /// Width of incoming visual tokens.
    pub d_in: usize,
    /// Latent width; `heads × d_head`.
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Decay scale: `α = 1 − γ σ(·)`.
    pub gamma: f64,
    /// Constant added inside the learning-rate softplus.
    pub c_base: f64,
}

impl Default for FastWeightConfig {
    fn default() -> Self {
        Self {
            d_in: 1024,
            d_model: 768,
            heads: 12,
            d_head: 64,
            gamma: 0.01,
            c_base: 0.001,
        }
    }
}

impl FastWeightConfig {
    /// Config with `d_model = heads × d_head` and the default decay/learning-rate constants.
    pub fn with_dims(d_in: usize, heads: usize, d_head: usize) -> Self {
        Self {
            d_in,
            d_model: heads * d_head,
            heads,
            d_head,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.heads == 0 || self.d_head == 0 {
            return Err(Error::invalid("fast-weight dimensions must be positive"));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model ({}) must equal heads × d_head ({} × {})",
                self.d_model, self.heads, self.d_head
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !self.c_base.is_finite() {
            return Err(Error::invalid("c_base must be finite"));
        }
        Ok(())
    }
}

/// The three square matrices of one SwiGLU head. Used both for weights and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrices {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
}

impl HeadMatrices {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: DMatrix::zeros(d, d),
            w2: DMatrix::zeros(d, d),
            w3: DMatrix::zeros(d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w1: DMatrix::identity(d, d),
            w2: DMatrix::identity(d, d),
            w3: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 3] {
        [&self.w1, &self.w2, &self.w3]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 3] {
        [&mut self.w1, &mut self.w2, &mut self.w3]
    }

    fn check_square(&self, d: usize) -> Result<()> {
        for m in self.matrices() {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dim(format!(
                    "head matrix is {}×{}, expected {d}×{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(())
    }
}

macro_rules! head_stack {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub heads: Vec<HeadMatrices>,
        }

        impl $name {
            pub fn zeros(heads: usize, d_head: usize) -> Self {
                Self {
                    heads: (0..heads).map(|_| HeadMatrices::zeros(d_head)).collect(),
                }
            }

            pub fn n_heads(&self) -> usize {
                self.heads.len()
            }

            pub fn d_head(&self) -> usize {
                self.heads.first().map_or(0, HeadMatrices::dim)
            }

            /// Number of scalar entries.
            pub fn len(&self) -> usize {
                self.heads.len() * MATRICES_PER_HEAD * self.d_head().pow(2)
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            /// Squared Frobenius norm over every matrix of every head.
            pub fn norm_squared(&self) -> f64 {
                self.heads
                    .iter()
                    .flat_map(|h| h.matrices())
                    .map(|m| m.norm_squared())
                    .sum()
            }

            pub fn is_finite(&self) -> bool {
                self.heads
                    .iter()
                    .flat_map(|h| h.matrices())
                    .all(|m| m.iter().all(|v| v.is_finite()))
            }

            fn check_shape(&self, heads: usize, d_head: usize) -> Result<()> {
                ensure_dim(self.heads.len(), heads, "head count")?;
                self.heads.iter().try_for_each(|h| h.check_square(d_head))
            }
        }
    };
}

head_stack!(FastWeights, "Implicit memory: `W1`, `W2`, `W3` for every head.");
head_stack!(FastWeightGradients, "Gradient of the alignment objective, shaped like [`FastWeights`].");

impl FastWeights {
    /// Gaussian(0, 0.02²) entries drawn from a seeded generator.
    pub fn init(cfg: &FastWeightConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let d = cfg.d_head;
        let heads = (0..cfg.heads)
            .map(|_| HeadMatrices {
                w1: gaussian_matrix(d, d, FAST_WEIGHT_INIT_STD, &mut rng),
                w2: gaussian_matrix(d, d, FAST_WEIGHT_INIT_STD, &mut rng),
                w3: gaussian_matrix(d, d, FAST_WEIGHT_INIT_STD, &mut rng),
            })
            .collect();
        Self { heads }
    }

    /// Rescales each matrix whose Frobenius norm exceeds `cap` back onto the cap.
    pub fn clamp_norms(&mut self, cap: f64) {
        for m in self.heads.iter_mut().flat_map(|h| h.matrices_mut()) {
            let n = m.norm();
            if n > cap {
                *m *= cap / n;
            }
        }
    }
}

/// Fixed (slow) parameters around the fast-weight memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowParams {
    pub cfg: FastWeightConfig,
    /// `d_in → d_model`.
    pub query_proj: Linear,
    /// `d_in → 3·heads`; output `i·heads + h` drives matrix `i` of head `h`.
    pub lr_head: Linear,
    /// `d_in → heads`.
    pub decay_head: Linear,
    /// RMSNorm scale, width `d_model`.
    pub readout_norm: DVector<f64>,
    /// `d_model → d_model`.
    pub out_proj: Linear,
}

impl SlowParams {
    /// Fan-in-scaled projections, unit RMSNorm scale, and zeroed learning-rate and decay
    /// heads so that the first step runs with `α = 1 − γ/2` and `η = softplus(c_base)`.
    pub fn init(cfg: &FastWeightConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        Ok(Self {
            cfg: *cfg,
            query_proj: Linear::fan_in(cfg.d_in, cfg.d_model, &mut rng),
            lr_head: Linear::zeros(cfg.d_in, MATRICES_PER_HEAD * cfg.heads),
            decay_head: Linear::zeros(cfg.d_in, cfg.heads),
            readout_norm: DVector::from_element(cfg.d_model, 1.0),
            out_proj: Linear::fan_in(cfg.d_model, cfg.d_model, &mut rng),
        })
    }

    /// Stored scalar count of the slow parameters alone.
    pub fn len(&self) -> usize {
        self.query_proj.param_count()
            + self.lr_head.param_count()
            + self.decay_head.param_count()
            + self.readout_norm.len()
            + self.out_proj.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything produced while reading the memory; the queries are reused by the write.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorReadout {
    /// Pose prior `p̂_t`, width `d_model`.
    pub prior: DVector<f64>,
    /// L2-normalised query of every head.
    pub queries: Vec<DVector<f64>>,
    /// Concatenated SwiGLU outputs before the readout normalization.
    pub head_outputs: DVector<f64>,
}

/// `W2 (SiLU(W1 x) ⊙ (W3 x))` for one head.
pub fn swiglu_forward(head: &HeadMatrices, x: &DVector<f64>) -> Result<DVector<f64>> {
    let d = head.dim();
    head.check_square(d)?;
    ensure_dim(x.len(), d, "swiglu input width")?;
    let gate = (&head.w1 * x).map(silu);
    let value = &head.w3 * x;
    Ok(&head.w2 * gate.component_mul(&value))
}

/// Scales `v` to unit L2 norm; the zero vector stays zero.
fn l2_normalize(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Mean-pooled frame → `query_proj` → split into heads → per-head L2 normalization.
pub fn head_queries(sp: &SlowParams, frame: &FramePacket) -> Result<Vec<DVector<f64>>> {
    let q = sp.query_proj.forward(frame.pooled())?;
    let d = sp.cfg.d_head;
    Ok((0..sp.cfg.heads)
        .map(|h| l2_normalize(q.rows(h * d, d).into_owned()))
        .collect())
}

/// Reads the pose prior `p̂_t` from the current fast weights.
pub fn read_prior(fw: &FastWeights, sp: &SlowParams, frame: &FramePacket) -> Result<PriorReadout> {
    fw.check_shape(sp.cfg.heads, sp.cfg.d_head)?;
    let queries = head_queries(sp, frame)?;
    let mut head_outputs = DVector::zeros(sp.cfg.d_model);
    for (h, (head, q)) in fw.heads.iter().zip(&queries).enumerate() {
        let y = swiglu_forward(head, q)?;
        head_outputs.rows_mut(h * sp.cfg.d_head, sp.cfg.d_head).copy_from(&y);
    }
    let normed = rms_norm(&head_outputs, &sp.readout_norm)?;
    let prior = sp.out_proj.forward(&normed)?;
    Ok(PriorReadout {
        prior,
        queries,
        head_outputs,
    })
}

/// Alignment objective `⟨prior, posterior⟩`.
pub fn ttt_loss(prior: &DVector<f64>, posterior: &DVector<f64>) -> Result<f64> {
    ensure_dim(posterior.len(), prior.len(), "ttt_loss operand width")?;
    Ok(prior.dot(posterior))
}

fn check_queries(fw: &FastWeights, queries: &[DVector<f64>], posterior: &DVector<f64>) -> Result<()> {
    let d = fw.d_head();
    ensure_dim(queries.len(), fw.n_heads(), "query count")?;
    for q in queries {
        ensure_dim(q.len(), d, "query width")?;
    }
    ensure_dim(posterior.len(), fw.n_heads() * d, "posterior width")?;
    fw.check_shape(fw.n_heads(), d)
}

/// `Σ_h ⟨f_{W_h}(q_h), p_h⟩`: the quantity whose gradient drives the memory write.
pub fn head_alignment(fw: &FastWeights, queries: &[DVector<f64>], posterior: &DVector<f64>) -> Result<f64> {
    check_queries(fw, queries, posterior)?;
    let d = fw.d_head();
    fw.heads.iter().zip(queries).enumerate().try_fold(0.0, |acc, (h, (head, q))| {
        let y = swiglu_forward(head, q)?;
        Ok(acc + y.dot(&posterior.rows(h * d, d)))
    })
}

/// Analytic gradient of [`head_alignment`] with the posterior held constant.
pub fn ttt_gradient(
    fw: &FastWeights,
    queries: &[DVector<f64>],
    posterior: &DVector<f64>,
) -> Result<FastWeightGradients> {
    check_queries(fw, queries, posterior)?;
    let d = fw.d_head();
    let heads = fw
        .heads
        .iter()
        .zip(queries)
        .enumerate()
        .map(|(h, (w, q))| {
            let target = posterior.rows(h * d, d);
            let pre = &w.w1 * q;
            let act = pre.map(silu);
            let value = &w.w3 * q;
            let hidden = act.component_mul(&value);
            let back = w.w2.tr_mul(&target);
            let d_pre = back.component_mul(&value).component_mul(&pre.map(silu_prime));
            let d_value = back.component_mul(&act);
            HeadMatrices {
                w1: &d_pre * q.transpose(),
                w2: target * hidden.transpose(),
                w3: &d_value * q.transpose(),
            }
        })
        .collect();
    Ok(FastWeightGradients { heads })
}

/// Per-head retention `α[h] = 1 − γ σ(decay_head(pooled)[h])`, each in `(1 − γ, 1)`.
pub fn predict_decay(sp: &SlowParams, frame: &FramePacket) -> Result<DVector<f64>> {
    let logits = sp.decay_head.forward(frame.pooled())?;
    let g = sp.cfg.gamma;
    Ok(logits.map(|z| strictly_within(1.0 - g * sigmoid(z), 1.0 - g, 1.0)))
}

/// Learning rates `η[(i, h)] = softplus(lr_head(pooled)[i·heads + h] + c_base)`, shaped `3 × heads`.
/// Underflow is floored at the smallest normal `f64` so that `η > 0` always holds.
pub fn predict_lr(sp: &SlowParams, frame: &FramePacket) -> Result<DMatrix<f64>> {
    let logits = sp.lr_head.forward(frame.pooled())?;
    let heads = sp.cfg.heads;
    Ok(DMatrix::from_fn(MATRICES_PER_HEAD, heads, |i, h| {
        softplus(logits[i * heads + h] + sp.cfg.c_base).max(f64::MIN_POSITIVE)
    }))
}

/// `W_i[h] ← α[h] W_i[h] + η[(i, h)] G_i[h]`.
pub fn update_weights(
    fw_prev: &FastWeights,
    grads: &FastWeightGradients,
    alpha: &DVector<f64>,
    eta: &DMatrix<f64>,
) -> Result<FastWeights> {
    let heads = fw_prev.n_heads();
    let d = fw_prev.d_head();
    fw_prev.check_shape(heads, d)?;
    grads.check_shape(heads, d)?;
    ensure_dim(alpha.len(), heads, "alpha length")?;
    if eta.nrows() != MATRICES_PER_HEAD || eta.ncols() != heads {
        return Err(Error::dim(format!(
            "eta is {}×{}, expected {MATRICES_PER_HEAD}×{heads}",
            eta.nrows(),
            eta.ncols()
        )));
    }
    let heads = fw_prev
        .heads
        .iter()
        .zip(&grads.heads)
        .enumerate()
        .map(|(h, (w, g))| {
            let step = |i: usize, wm: &DMatrix<f64>, gm: &DMatrix<f64>| wm * alpha[h] + gm * eta[(i, h)];
            HeadMatrices {
                w1: step(0, &w.w1, &g.w1),
                w2: step(1, &w.w2, &g.w2),
                w3: step(2, &w.w3, &g.w3),
            }
        })
        .collect();
    Ok(FastWeights { heads })
}

/// Central-difference estimate of [`ttt_gradient`], one weight entry at a time.
pub fn finite_diff_gradient(
    fw: &FastWeights,
    queries: &[DVector<f64>],
    posterior: &DVector<f64>,
    step: f64,
) -> Result<FastWeightGradients> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    check_queries(fw, queries, posterior)?;
    let d = fw.d_head();
    let mut grads = FastWeightGradients::zeros(fw.n_heads(), d);
    let mut probe = fw.clone();
    for h in 0..fw.n_heads() {
        let target = posterior.rows(h * d, d).into_owned();
        for i in 0..MATRICES_PER_HEAD {
            for r in 0..d {
                for c in 0..d {
                    let orig = fw.heads[h].matrices()[i][(r, c)];
                    probe.heads[h].matrices_mut()[i][(r, c)] = orig + step;
                    let plus = swiglu_forward(&probe.heads[h], &queries[h])?.dot(&target);
                    probe.heads[h].matrices_mut()[i][(r, c)] = orig - step;
                    let minus = swiglu_forward(&probe.heads[h], &queries[h])?.dot(&target);
                    probe.heads[h].matrices_mut()[i][(r, c)] = orig;
                    grads.heads[h].matrices_mut()[i][(r, c)] = (plus - minus) / (2.0 * step);
                }
            }
        }
    }
    Ok(grads)
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, or 0 when both vanish.
pub fn relative_error(a: &FastWeightGradients, b: &FastWeightGradients) -> f64 {
    let diff: f64 = a
        .heads
        .iter()
        .zip(&b.heads)
        .flat_map(|(x, y)| x.matrices().into_iter().zip(y.matrices()))
        .map(|(x, y)| (x - y).norm_squared())
        .sum();
    let scale = a.norm_squared().max(b.norm_squared()).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Scalar count of the slow parameters plus the fast weights for `cfg`.
pub fn fast_weight_param_count(cfg: &FastWeightConfig) -> usize {
    let FastWeightConfig {
        d_in,
        d_model,
        heads,
        d_head,
        ..
    } = *cfg;
    let query_proj = d_in * d_model + d_model;
    let fast = heads * MATRICES_PER_HEAD * d_head * d_head;
    let lr_head = d_in * MATRICES_PER_HEAD * heads + MATRICES_PER_HEAD * heads;
    let decay_head = d_in * heads + heads;
    let readout_norm = d_model;
    let out_proj = d_model * d_model + d_model;
    query_proj + fast + lr_head + decay_head + readout_norm + out_proj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vector, seeded_rng};

    fn random_head(d: usize, seed: u64) -> HeadMatrices {
        let mut rng = seeded_rng(seed);
        HeadMatrices {
            w1: gaussian_matrix(d, d, 0.7, &mut rng),
            w2: gaussian_matrix(d, d, 0.7, &mut rng),
            w3: gaussian_matrix(d, d, 0.7, &mut rng),
        }
    }

    fn toy_frame(d_in: usize, seed: u64) -> FramePacket {
        let mut rng = seeded_rng(seed);
        FramePacket::new(gaussian_matrix(3, d_in, 1.0, &mut rng), 0, false).unwrap()
    }

    #[test]
    fn decay_and_lr_stay_in_range_when_saturated() {
        let cfg = FastWeightConfig::with_dims(5, 2, 3);
        let mut sp = SlowParams::init(&cfg, 0).unwrap();
        let frame = toy_frame(5, 1);
        for b in [-1e4, 1e4] {
            sp.decay_head.bias = DVector::from_element(2, b);
            sp.lr_head.bias = DVector::from_element(6, b);
            let alpha = predict_decay(&sp, &frame).unwrap();
            assert!(alpha.iter().all(|&a| a > 0.99 && a < 1.0));
            assert!(predict_lr(&sp, &frame).unwrap().iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn swiglu_zero_weights_give_zero() {
        let head = HeadMatrices::zeros(4);
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(swiglu_forward(&head, &x).unwrap(), DVector::zeros(4));
    }

    #[test]
    fn swiglu_identity_weights_on_basis_vector() {
        let head = HeadMatrices::identity(3);
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let y = swiglu_forward(&head, &x).unwrap();
        assert!((y[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn swiglu_matches_scalar_loops() {
        let head = random_head(4, 11);
        let mut rng = seeded_rng(12);
        let x = gaussian_vector(4, 1.0, &mut rng);
        let y = swiglu_forward(&head, &x).unwrap();
        let mut hidden = [0.0; 4];
        for (r, slot) in hidden.iter_mut().enumerate() {
            let mut a = 0.0;
            let mut g = 0.0;
            for c in 0..4 {
                a += head.w1[(r, c)] * x[c];
                g += head.w3[(r, c)] * x[c];
            }
            *slot = a / (1.0 + (-a).exp()) * g;
        }
        for r in 0..4 {
            let expect: f64 = (0..4).map(|c| head.w2[(r, c)] * hidden[c]).sum();
            assert!((y[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn swiglu_rejects_wrong_width() {
        let head = HeadMatrices::zeros(4);
        assert!(matches!(
            swiglu_forward(&head, &DVector::zeros(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ttt_loss_examples() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_eq!(ttt_loss(&e1, &e2).unwrap(), 0.0);
        assert_eq!(ttt_loss(&e1, &e1).unwrap(), 1.0);
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let b = DVector::from_vec(vec![4.0, 5.0, 6.0]);
        assert_eq!(ttt_loss(&a, &b).unwrap(), 32.0);
        assert!(ttt_loss(&a, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn read_prior_with_zero_memory_returns_out_bias() {
        let cfg = FastWeightConfig::with_dims(5, 2, 3);
        let mut sp = SlowParams::init(&cfg, 1).unwrap();
        sp.out_proj.bias = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let fw = FastWeights::zeros(2, 3);
        let out = read_prior(&fw, &sp, &toy_frame(5, 2)).unwrap();
        assert_eq!(out.prior, sp.out_proj.bias);
    }

    #[test]
    fn read_prior_pooling_is_idempotent() {
        let cfg = FastWeightConfig::with_dims(5, 2, 3);
        let sp = SlowParams::init(&cfg, 1).unwrap();
        let fw = FastWeights::init(&cfg, 4);
        let row = vec![0.3, -1.0, 2.0, 0.5, 0.0];
        let one = FramePacket::from_rows(&[row.clone()], 0).unwrap();
        let many = FramePacket::from_rows(&[row.clone(), row.clone(), row], 0).unwrap();
        assert_eq!(
            read_prior(&fw, &sp, &one).unwrap().prior,
            read_prior(&fw, &sp, &many).unwrap().prior
        );
    }

    #[test]
    fn read_prior_matches_staged_composition() {
        let cfg = FastWeightConfig::with_dims(4, 2, 3);
        let mut sp = SlowParams::init(&cfg, 5).unwrap();
        let mut rng = seeded_rng(6);
        sp.query_proj.bias = gaussian_vector(6, 0.5, &mut rng);
        sp.readout_norm = gaussian_vector(6, 1.0, &mut rng);
        sp.out_proj.bias = gaussian_vector(6, 0.5, &mut rng);
        let fw = FastWeights {
            heads: vec![random_head(3, 7), random_head(3, 8)],
        };
        let frame = toy_frame(4, 9);

        // Stage 1: pool.
        let n = frame.token_count() as f64;
        let pooled: Vec<f64> = (0..4)
            .map(|c| (0..frame.token_count()).map(|r| frame.tokens()[(r, c)]).sum::<f64>() / n)
            .collect();
        // Stage 2: project.
        let q: Vec<f64> = (0..6)
            .map(|r| {
                sp.query_proj.bias[r] + (0..4).map(|c| sp.query_proj.weight[(r, c)] * pooled[c]).sum::<f64>()
            })
            .collect();
        // Stage 3+4: split and normalise, then SwiGLU per head.
        let mut cat = Vec::new();
        for h in 0..2 {
            let part = &q[h * 3..h * 3 + 3];
            let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            let qh = DVector::from_iterator(3, part.iter().map(|v| v / norm));
            let y = swiglu_forward(&fw.heads[h], &qh).unwrap();
            cat.extend(y.iter().copied());
        }
        // Stage 5: RMSNorm and readout.
        let rms = (cat.iter().map(|v| v * v).sum::<f64>() / 6.0 + crate::nn::RMS_EPS).sqrt();
        let normed: Vec<f64> = cat.iter().zip(sp.readout_norm.iter()).map(|(v, s)| v / rms * s).collect();
        let expect: Vec<f64> = (0..6)
            .map(|r| sp.out_proj.bias[r] + (0..6).map(|c| sp.out_proj.weight[(r, c)] * normed[c]).sum::<f64>())
            .collect();

        let got = read_prior(&fw, &sp, &frame).unwrap();
        for r in 0..6 {
            assert!((got.prior[r] - expect[r]).abs() < 1e-12);
        }
        for q in &got.queries {
            assert!((q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_query_stays_zero() {
        let cfg = FastWeightConfig::with_dims(3, 2, 2);
        let mut sp = SlowParams::init(&cfg, 1).unwrap();
        sp.query_proj.weight.rows_mut(0, 2).fill(0.0);
        let qs = head_queries(&sp, &toy_frame(3, 1)).unwrap();
        assert_eq!(qs[0], DVector::zeros(2));
        assert!((qs[1].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_zero_cases() {
        let d = 4;
        let mut rng = seeded_rng(21);
        let fw = FastWeights {
            heads: vec![random_head(d, 22)],
        };
        let q = vec![gaussian_vector(d, 1.0, &mut rng).normalize()];
        let g = ttt_gradient(&fw, &q, &DVector::zeros(d)).unwrap();
        assert_eq!(g.norm_squared(), 0.0);

        let mut fw = fw;
        fw.heads[0].w1.fill(0.0);
        fw.heads[0].w3.fill(0.0);
        let p = gaussian_vector(d, 1.0, &mut rng);
        let g = ttt_gradient(&fw, &q, &p).unwrap();
        assert_eq!(g.heads[0].w1.norm(), 0.0);
        assert_eq!(g.heads[0].w2.norm(), 0.0);
        assert_eq!(g.heads[0].w3.norm(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = 4;
        let mut rng = seeded_rng(31);
        let fw = FastWeights {
            heads: vec![random_head(d, 32), random_head(d, 33)],
        };
        let q: Vec<_> = (0..2).map(|_| gaussian_vector(d, 1.0, &mut rng).normalize()).collect();
        let p = gaussian_vector(2 * d, 1.0, &mut rng);
        let a = ttt_gradient(&fw, &q, &p).unwrap();
        let n = finite_diff_gradient(&fw, &q, &p, 1e-5).unwrap();
        assert!(relative_error(&a, &n) < 1e-6);
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let d = 4;
        let mut rng = seeded_rng(41);
        let fw = FastWeights {
            heads: vec![random_head(d, 42)],
        };
        let q = vec![gaussian_vector(d, 1.0, &mut rng).normalize()];
        let p = gaussian_vector(d, 1.0, &mut rng);
        let a = ttt_gradient(&fw, &q, &p).unwrap();
        let coarse = relative_error(&a, &finite_diff_gradient(&fw, &q, &p, 4e-2).unwrap());
        let fine = relative_error(&a, &finite_diff_gradient(&fw, &q, &p, 2e-2).unwrap());
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_difference_rejects_non_positive_step() {
        let fw = FastWeights::zeros(1, 2);
        let q = vec![DVector::zeros(2)];
        assert!(finite_diff_gradient(&fw, &q, &DVector::zeros(2), 0.0).is_err());
        let g = finite_diff_gradient(&fw, &q, &DVector::zeros(2), 1e-3).unwrap();
        assert_eq!(g.norm_squared(), 0.0);
    }

    #[test]
    fn decay_and_lr_with_zero_heads() {
        let cfg = FastWeightConfig::with_dims(6, 3, 2);
        let sp = SlowParams::init(&cfg, 0).unwrap();
        let frame = toy_frame(6, 3);
        let alpha = predict_decay(&sp, &frame).unwrap();
        assert!(alpha.iter().all(|&a| (a - 0.995).abs() < 1e-15));
        let eta = predict_lr(&sp, &frame).unwrap();
        assert_eq!(eta.shape(), (3, 3));
        assert!(eta.iter().all(|&e| (e - 0.693_647_305_559_940_1).abs() < 1e-15));
    }

    #[test]
    fn decay_and_lr_limits() {
        let cfg = FastWeightConfig::with_dims(2, 1, 2);
        let mut sp = SlowParams::init(&cfg, 0).unwrap();
        let frame = FramePacket::from_rows(&[vec![1.0, 0.0]], 0).unwrap();
        sp.decay_head.bias[0] = 60.0;
        assert!((predict_decay(&sp, &frame).unwrap()[0] - 0.99).abs() < 1e-15);
        sp.decay_head.bias[0] = -60.0;
        assert!((predict_decay(&sp, &frame).unwrap()[0] - 1.0).abs() < 1e-15);
        sp.lr_head.bias.fill(-60.0);
        let eta = predict_lr(&sp, &frame).unwrap();
        assert!(eta.iter().all(|&e| e > 0.0 && e < 1e-20));
        sp.lr_head.bias.fill(10.0 - cfg.c_base);
        let eta = predict_lr(&sp, &frame).unwrap();
        assert!(eta.iter().all(|&e| (e - 10.000_045_4).abs() < 1e-7));
    }

    #[test]
    fn update_rule_reductions() {
        let cfg = FastWeightConfig::with_dims(4, 2, 4);
        let fw = FastWeights::init(&cfg, 3);
        let mut rng = seeded_rng(4);
        let q: Vec<_> = (0..2).map(|_| gaussian_vector(4, 1.0, &mut rng).normalize()).collect();
        let p = gaussian_vector(8, 1.0, &mut rng);
        let g = ttt_gradient(&fw, &q, &p).unwrap();
        let zero_eta = DMatrix::zeros(3, 2);

        let alpha = DVector::from_element(2, 0.995);
        let decayed = update_weights(&fw, &g, &alpha, &zero_eta).unwrap();
        for (a, b) in decayed.heads.iter().zip(&fw.heads) {
            for (x, y) in a.matrices().into_iter().zip(b.matrices()) {
                assert_eq!(x, &(y * 0.995));
            }
        }

        let same = update_weights(&fw, &g, &DVector::from_element(2, 1.0), &zero_eta).unwrap();
        assert_eq!(same, fw);

        let eta = DMatrix::from_element(3, 2, 0.5);
        let upd = update_weights(&fw, &g, &alpha, &eta).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let (w, gm, u) = (fw.heads[h].matrices()[i], g.heads[h].matrices()[i], upd.heads[h].matrices()[i]);
                for r in 0..4 {
                    for c in 0..4 {
                        assert!((u[(r, c)] - (0.995 * w[(r, c)] + 0.5 * gm[(r, c)])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn update_rejects_bad_shapes() {
        let fw = FastWeights::zeros(2, 3);
        let g = FastWeightGradients::zeros(2, 3);
        assert!(update_weights(&fw, &g, &DVector::zeros(3), &DMatrix::zeros(3, 2)).is_err());
        assert!(update_weights(&fw, &g, &DVector::zeros(2), &DMatrix::zeros(2, 2)).is_err());
        let g_bad = FastWeightGradients::zeros(2, 4);
        assert!(update_weights(&fw, &g_bad, &DVector::zeros(2), &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(fast_weight_param_count(&FastWeightConfig::default()), 1_575_216);
        let unit = FastWeightConfig {
            d_in: 1,
            d_model: 1,
            heads: 1,
            d_head: 1,
            ..FastWeightConfig::default()
        };
        assert_eq!(fast_weight_param_count(&unit), 16);

        // Doubling heads at fixed d_model only touches head-dependent terms.
        let base = FastWeightConfig::with_dims(16, 2, 8);
        let split = FastWeightConfig::with_dims(16, 4, 4);
        let diff = fast_weight_param_count(&base) as i64 - fast_weight_param_count(&split) as i64;
        let head_terms = |c: &FastWeightConfig| {
            (c.heads * 3 * c.d_head * c.d_head + c.d_in * 3 * c.heads + 3 * c.heads + c.d_in * c.heads + c.heads) as i64
        };
        assert_eq!(diff, head_terms(&base) - head_terms(&split));
    }

    #[test]
    fn param_count_matches_storage() {
        let cfg = FastWeightConfig::with_dims(10, 3, 4);
        let sp = SlowParams::init(&cfg, 0).unwrap();
        let fw = FastWeights::init(&cfg, 0);
        assert_eq!(sp.len() + fw.len(), fast_weight_param_count(&cfg));
    }

    #[test]
    fn config_validation() {
        assert!(FastWeightConfig::default().validate().is_ok());
        let bad = FastWeightConfig {
            d_model: 10,
            ..FastWeightConfig::with_dims(4, 2, 4)
        };
        assert!(bad.validate().is_err());
        let bad_gamma = FastWeightConfig {
            gamma: 1.0,
            ..FastWeightConfig::default()
        };
        assert!(bad_gamma.validate().is_err());
    }

    #[test]
    fn clamp_norms_caps_each_matrix() {
        let cfg = FastWeightConfig::with_dims(4, 2, 3);
        let mut fw = FastWeights::init(&cfg, 1);
        for h in fw.heads.iter_mut() {
            h.w2 *= 1000.0;
        }
        let w1_before = fw.heads[0].w1.clone();
        fw.clamp_norms(1.0);
        assert!((fw.heads[0].w2.norm() - 1.0).abs() < 1e-12);
        assert_eq!(fw.heads[0].w1, w1_before);
    }
}
