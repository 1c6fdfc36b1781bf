//! Surrogate decoder: residual, bidirectional cross-attention between the frame tokens
//! `X = [p̂, F]` and the state tokens `S`.
//!
//! Each block lets every row of `X` attend over the state and every state token attend
//! over `X`, using the pre-block values on both sides. The pose row, the image rows and
//! the state tokens have separate projections because their widths differ. Inputs to the
//! projections are RMS-normalised (no learned scale); there are no positional terms, so
//! the image rows are permutation-equivariant. All-zero weights make the block an exact
//! identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::frame::FramePacket;
use crate::nn::{gaussian_matrix, seeded_rng, RMS_EPS};
use crate::state::StateTokens;

/// Std multiplier applied to the output projections at init.
const OUT_PROJ_GAIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    /// Shared attention width.
    pub d_model: usize,
    pub heads: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("decoder depth must be ≥ 1"));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "decoder width {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Query, key, value (`attn × width`) and output (`width × attn`) maps for one token family.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl Projections {
    fn zeros(width: usize, attn: usize) -> Self {
        Self {
            query: DMatrix::zeros(attn, width),
            key: DMatrix::zeros(attn, width),
            value: DMatrix::zeros(attn, width),
            output: DMatrix::zeros(width, attn),
        }
    }

    fn random(width: usize, attn: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let in_std = 1.0 / (width as f64).sqrt();
        let out_std = OUT_PROJ_GAIN / (attn as f64).sqrt();
        Self {
            query: gaussian_matrix(attn, width, in_std, rng),
            key: gaussian_matrix(attn, width, in_std, rng),
            value: gaussian_matrix(attn, width, in_std, rng),
            output: gaussian_matrix(width, attn, out_std, rng),
        }
    }

    fn len(&self) -> usize {
        self.query.len() + self.key.len() + self.value.len() + self.output.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub pose: Projections,
    pub image: Projections,
    pub state: Projections,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub pose_width: usize,
    pub image_width: usize,
    pub state_width: usize,
    pub blocks: Vec<DecoderBlock>,
}

/// Posterior pose `p_t`, refined image tokens `F'_t` and candidate state `S̃_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub posterior_pose: DVector<f64>,
    pub refined_tokens: DMatrix<f64>,
    pub candidate_state: StateTokens,
}

impl Decoder {
    /// Random decoder drawn from `cfg.seed`.
    pub fn new(cfg: DecoderConfig, pose_width: usize, image_width: usize, state_width: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let a = cfg.d_model;
        let blocks = (0..cfg.depth)
            .map(|_| DecoderBlock {
                pose: Projections::random(pose_width, a, &mut rng),
                image: Projections::random(image_width, a, &mut rng),
                state: Projections::random(state_width, a, &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            pose_width,
            image_width,
            state_width,
            blocks,
        })
    }

    /// All-zero weights; `decode` is then the identity.
    pub fn zeros(cfg: DecoderConfig, pose_width: usize, image_width: usize, state_width: usize) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.d_model;
        let blocks = (0..cfg.depth)
            .map(|_| DecoderBlock {
                pose: Projections::zeros(pose_width, a),
                image: Projections::zeros(image_width, a),
                state: Projections::zeros(state_width, a),
            })
            .collect();
        Ok(Self {
            cfg,
            pose_width,
            image_width,
            state_width,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.pose.len() + b.image.len() + b.state.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode(&self, prior_pose: &DVector<f64>, frame: &FramePacket, s_prev: &StateTokens) -> Result<DecodeOutput> {
        ensure_dim(prior_pose.len(), self.pose_width, "prior pose width")?;
        ensure_dim(frame.d_in(), self.image_width, "frame token width")?;
        ensure_dim(s_prev.channels(), self.state_width, "state channel width")?;

        let mut pose = DMatrix::from_row_slice(1, prior_pose.len(), prior_pose.as_slice());
        let mut image = frame.tokens().clone();
        let mut state = s_prev.tokens.clone();
        for block in &self.blocks {
            let pose_n = rms_rows(&pose);
            let image_n = rms_rows(&image);
            let state_n = rms_rows(&state);

            let q_x = stack(&(&pose_n * block.pose.query.transpose()), &(&image_n * block.image.query.transpose()));
            let k_x = stack(&(&pose_n * block.pose.key.transpose()), &(&image_n * block.image.key.transpose()));
            let v_x = stack(&(&pose_n * block.pose.value.transpose()), &(&image_n * block.image.value.transpose()));
            let q_s = &state_n * block.state.query.transpose();
            let k_s = &state_n * block.state.key.transpose();
            let v_s = &state_n * block.state.value.transpose();

            let x_read = attend(&q_x, &k_s, &v_s, self.cfg.heads);
            let s_read = attend(&q_s, &k_x, &v_x, self.cfg.heads);

            pose += x_read.rows(0, 1) * block.pose.output.transpose();
            image += x_read.rows(1, image.nrows()) * block.image.output.transpose();
            state += s_read * block.state.output.transpose();
        }
        Ok(DecodeOutput {
            posterior_pose: DVector::from_iterator(pose.ncols(), pose.row(0).iter().copied()),
            refined_tokens: image,
            candidate_state: StateTokens { tokens: state },
        })
    }
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Each row divided by its root-mean-square.
pub(crate) fn rms_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.ncols().max(1) as f64;
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
        row /= (ms + RMS_EPS).sqrt();
    }
    out
}

/// Multi-head scaled dot-product attention of `queries` over `keys`/`values`.
pub(crate) fn attend(queries: &DMatrix<f64>, keys: &DMatrix<f64>, values: &DMatrix<f64>, heads: usize) -> DMatrix<f64> {
    let width = queries.ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DMatrix::zeros(queries.nrows(), width);
    for h in 0..heads {
        let q = queries.columns(h * dh, dh);
        let k = keys.columns(h * dh, dh);
        let v = values.columns(h * dh, dh);
        let mut logits = q * k.transpose() * scale;
        for mut row in logits.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        out.columns_mut(h * dh, dh).copy_from(&(logits * v));
    }
    out
}
