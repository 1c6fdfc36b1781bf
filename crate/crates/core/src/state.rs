//! Explicit geometric memory: a fixed `N_s × C` grid of state tokens.
//!
//! Each frame the decoder proposes a candidate state. A bottleneck MLP looks at every
//! previous token next to the pooled frame feature and emits a channel-wise gate `ζ`,
//! and the new state is the convex blend `ζ ⊙ S̃ + (1 − ζ) ⊙ S_prev`. An external
//! per-token gate `G` may additionally rescale each blended token.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::frame::FramePacket;
use crate::nn::{gaussian_matrix, gelu, seeded_rng, sigmoid, strictly_within, Linear};

/// Std of the Gaussian used for the initial state.
pub const STATE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct StateTokens {
    pub tokens: DMatrix<f64>,
}

impl StateTokens {
    pub fn zeros(n_tokens: usize, channels: usize) -> Self {
        Self {
            tokens: DMatrix::zeros(n_tokens, channels),
        }
    }

    /// Gaussian(0, 0.02²) tokens from a seeded generator.
    pub fn init(n_tokens: usize, channels: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            tokens: gaussian_matrix(n_tokens, channels, STATE_INIT_STD, &mut rng),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.shape()
    }

    /// Bytes held by the token grid.
    pub fn footprint_bytes(&self) -> usize {
        self.tokens.len() * std::mem::size_of::<f64>()
    }

    /// Writes `u64 N_s`, `u64 C`, then `N_s·C` row-major `f64`, all little-endian.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        write_matrix(out, &self.tokens)
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        Ok(Self {
            tokens: read_matrix(input)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.footprint_bytes());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let s = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after state snapshot", bytes.len())));
        }
        Ok(s)
    }

    fn check_same_shape(&self, other: &DMatrix<f64>, what: &str) -> Result<()> {
        if self.tokens.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs state {:?}",
                other.shape(),
                self.tokens.shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>) -> Result<()> {
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Parse(format!("truncated snapshot header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_matrix<R: Read>(input: &mut R) -> Result<DMatrix<f64>> {
    let rows = read_u64(input)? as usize;
    let cols = read_u64(input)? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| *n <= (1 << 32))
        .ok_or_else(|| Error::Parse(format!("implausible snapshot shape {rows}×{cols}")))?;
    let mut raw = vec![0u8; n * 8];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::Parse(format!("truncated snapshot body: {e}")))?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Widths of the channel-gate MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    /// State channel width `C`.
    pub channels: usize,
    /// Visual feature width `d_in`.
    pub d_in: usize,
    pub bottleneck: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            channels: 768,
            d_in: 1024,
            bottleneck: 384,
        }
    }
}

/// Bottleneck MLP `(C + d_in) → bottleneck → C` with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl GateParams {
    pub fn zeros(cfg: &GateConfig) -> Self {
        Self {
            layer1: Linear::zeros(cfg.channels + cfg.d_in, cfg.bottleneck),
            layer2: Linear::zeros(cfg.bottleneck, cfg.channels),
        }
    }

    pub fn init(cfg: &GateConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            layer1: Linear::fan_in(cfg.channels + cfg.d_in, cfg.bottleneck, &mut rng),
            layer2: Linear::fan_in(cfg.bottleneck, cfg.channels, &mut rng),
        }
    }

    pub fn len(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(C + d_in)·b + b + b·C + C` for bottleneck width `b`.
pub fn gate_param_count(cfg: &GateConfig) -> usize {
    let input = cfg.channels + cfg.d_in;
    (input * cfg.bottleneck + cfg.bottleneck) + (cfg.bottleneck * cfg.channels + cfg.channels)
}

/// Channel-wise gate `ζ[i] = σ(layer2(GELU(layer1([s_prev[i], pooled F]))))`, kept strictly
/// inside `(0, 1)` where the sigmoid saturates.
pub fn compute_gate(gp: &GateParams, frame: &FramePacket, s_prev: &StateTokens) -> Result<DMatrix<f64>> {
    let c = s_prev.channels();
    ensure_dim(gp.layer1.d_in(), c + frame.d_in(), "gate input width (C + d_in)")?;
    ensure_dim(gp.layer2.d_out(), c, "gate output width")?;
    let n = s_prev.n_tokens();
    let pooled = frame.pooled();
    let mut input = DMatrix::zeros(n, c + frame.d_in());
    input.columns_mut(0, c).copy_from(&s_prev.tokens);
    for mut row in input.columns_mut(c, frame.d_in()).row_iter_mut() {
        row.copy_from(&pooled.transpose());
    }
    let hidden = gp.layer1.forward_rows(&input)?.map(gelu);
    Ok(gp.layer2.forward_rows(&hidden)?.map(|z| strictly_within(sigmoid(z), 0.0, 1.0)))
}

/// `ζ ⊙ S̃ + (1 − ζ) ⊙ S_prev`.
pub fn gated_update(s_prev: &StateTokens, s_cand: &StateTokens, zeta: &DMatrix<f64>) -> Result<StateTokens> {
    s_prev.check_same_shape(&s_cand.tokens, "candidate state")?;
    s_prev.check_same_shape(zeta, "gate")?;
    let tokens = DMatrix::from_fn(s_prev.n_tokens(), s_prev.channels(), |r, c| {
        let z = zeta[(r, c)];
        z * s_cand.tokens[(r, c)] + (1.0 - z) * s_prev.tokens[(r, c)]
    });
    Ok(StateTokens { tokens })
}

/// `G ⊙ ζ ⊙ S̃ + G ⊙ (1 − ζ) ⊙ S_prev`, with `G` broadcast across channels.
pub fn gated_update_with_token_gate(
    s_prev: &StateTokens,
    s_cand: &StateTokens,
    zeta: &DMatrix<f64>,
    gate: &TokenGate,
) -> Result<StateTokens> {
    ensure_dim(gate.len(), s_prev.n_tokens(), "token gate length")?;
    let mut out = gated_update(s_prev, s_cand, zeta)?;
    for (mut row, &g) in out.tokens.row_iter_mut().zip(gate.values.iter()) {
        row *= g;
    }
    Ok(out)
}

/// Per-token multipliers from a plug-in update strategy. Finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGate {
    pub values: DVector<f64>,
}

impl TokenGate {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::invalid("token gate entries must be finite and non-negative"));
        }
        Ok(Self { values })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            values: DVector::from_element(n, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.mean()
        }
    }
}

/// Source of the per-token gate `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum GateStrategy {
    /// `G = g0` everywhere.
    Constant { g0: f64 },
    /// `G = 1`, i.e. the plain channel-gated update.
    Overwrite,
    /// `G[i] = σ(cos(s_prev[i], s_cand[i]) / temperature)`.
    Similarity { temperature: f64 },
}

impl Default for GateStrategy {
    fn default() -> Self {
        GateStrategy::Overwrite
    }
}

/// Gate assigned to tokens whose cosine similarity is undefined.
pub const NEUTRAL_TOKEN_GATE: f64 = 0.5;

impl GateStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GateStrategy::Constant { g0 } if !(g0.is_finite() && g0 >= 0.0) => {
                Err(Error::invalid(format!("constant token gate must be finite and ≥ 0, got {g0}")))
            }
            GateStrategy::Similarity { temperature } if !(temperature.is_finite() && temperature > 0.0) => {
                Err(Error::invalid(format!("similarity temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn apply_strategy(strategy: &GateStrategy, s_prev: &StateTokens, s_cand: &StateTokens) -> Result<TokenGate> {
    strategy.validate()?;
    s_prev.check_same_shape(&s_cand.tokens, "candidate state")?;
    let n = s_prev.n_tokens();
    let values = match *strategy {
        GateStrategy::Constant { g0 } => DVector::from_element(n, g0),
        GateStrategy::Overwrite => DVector::from_element(n, 1.0),
        GateStrategy::Similarity { temperature } => DVector::from_iterator(
            n,
            s_prev
                .tokens
                .row_iter()
                .zip(s_cand.tokens.row_iter())
                .map(|(a, b)| {
                    let denom = a.norm() * b.norm();
                    if denom == 0.0 {
                        NEUTRAL_TOKEN_GATE
                    } else {
                        sigmoid(a.dot(&b) / denom / temperature)
                    }
                }),
        ),
    };
    TokenGate::new(values)
}
