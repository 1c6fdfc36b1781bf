//! The per-frame recurrent step tying both memories to the decoder and heads.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::fast_weight::{
    predict_decay, predict_lr, read_prior, ttt_gradient, ttt_loss, update_weights, FastWeightConfig, FastWeights,
    HeadMatrices, SlowParams,
};
use crate::frame::FramePacket;
use crate::heads::{head_points, head_pose, Heads, PointMode};
use crate::metrics::TrajectoryPose;
use crate::objectives::PointMap;
use crate::state::{
    apply_strategy, compute_gate, gated_update_with_token_gate, read_matrix, write_matrix, GateConfig, GateParams,
    GateStrategy, StateTokens,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub fast: FastWeightConfig,
    pub gate: GateConfig,
    /// Number of state tokens `N_s`; the channel width is `gate.channels`.
    pub n_state: usize,
    pub decoder: DecoderConfig,
    pub strategy: GateStrategy,
    pub seed: u64,
    /// Frobenius cap applied to every fast-weight matrix after each write; `None` leaves
    /// the update unbounded.
    pub fast_weight_norm_cap: Option<f64>,
}

impl EngineConfig {
    /// Small dimensions used throughout the tests.
    pub fn toy(seed: u64) -> Self {
        let fast = FastWeightConfig::with_dims(64, 4, 12);
        Self {
            fast,
            gate: GateConfig {
                channels: 48,
                d_in: 64,
                bottleneck: 24,
            },
            n_state: 32,
            decoder: DecoderConfig {
                depth: 1,
                d_model: 32,
                heads: 4,
                seed: seed.wrapping_add(7),
            },
            strategy: GateStrategy::Overwrite,
            seed,
            fast_weight_norm_cap: Some(default_norm_cap(fast.d_head)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fast.validate()?;
        self.decoder.validate()?;
        self.strategy.validate()?;
        if self.gate.d_in != self.fast.d_in {
            return Err(Error::invalid(format!(
                "gate d_in ({}) must match fast-weight d_in ({})",
                self.gate.d_in, self.fast.d_in
            )));
        }
        if self.n_state == 0 || self.gate.channels == 0 || self.gate.bottleneck == 0 {
            return Err(Error::invalid("state and gate dimensions must be positive"));
        }
        if let Some(cap) = self.fast_weight_norm_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::invalid(format!("fast_weight_norm_cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// `sqrt(d_head)`: the Frobenius norm of a `d_head × d_head` orthogonal matrix.
pub fn default_norm_cap(d_head: usize) -> f64 {
    (d_head as f64).sqrt()
}

/// Derives independent sub-seeds for the engine's parameter blocks.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Everything one step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `p̂_t` read from the memory before the write.
    pub prior_pose: DVector<f64>,
    /// `p_t` from the decoder.
    pub posterior_pose: DVector<f64>,
    pub refined_tokens: DMatrix<f64>,
    pub candidate_state: StateTokens,
    pub predicted_pose: TrajectoryPose,
    pub local_points: PointMap,
    pub world_points: PointMap,
    /// `⟨p̂_t, p_t⟩`.
    pub ttt_loss: f64,
    pub gate_mean: f64,
    pub token_gate_mean: f64,
}

/// Test hook: fail deliberately after a given stage.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultStage {
    AfterImplicitWrite,
    AfterExplicitWrite,
}

/// One stream's engine: slow parameters plus the two mutable memories.
#[derive(Debug, Clone)]
pub struct Engine {
    pub cfg: EngineConfig,
    pub fast_weights: FastWeights,
    pub slow: SlowParams,
    pub gate_params: GateParams,
    pub state: StateTokens,
    pub decoder: Decoder,
    pub heads: Heads,
    /// Replaces the learned channel gate with a constant when set.
    pub gate_override: Option<f64>,
    #[doc(hidden)]
    pub fault: Option<FaultStage>,
    frames_seen: usize,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let fast_weights = FastWeights::init(&cfg.fast, sub_seed(s, 1));
        let slow = SlowParams::init(&cfg.fast, sub_seed(s, 2))?;
        let gate_params = GateParams::init(&cfg.gate, sub_seed(s, 3));
        let state = StateTokens::init(cfg.n_state, cfg.gate.channels, sub_seed(s, 4));
        let decoder = Decoder::new(cfg.decoder, cfg.fast.d_model, cfg.fast.d_in, cfg.gate.channels)?;
        let heads = Heads::init(cfg.fast.d_model, cfg.fast.d_in, sub_seed(s, 5));
        Ok(Self {
            cfg,
            fast_weights,
            slow,
            gate_params,
            state,
            decoder,
            heads,
            gate_override: None,
            fault: None,
            frames_seen: 0,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Bytes of the persistent blocks: fast weights, state, slow parameters, gate MLP.
    pub fn footprint_bytes(&self) -> usize {
        let scalars = self.fast_weights.len() + self.state.tokens.len() + self.slow.len() + self.gate_params.len();
        scalars * std::mem::size_of::<f64>()
    }

    /// Runs one frame: read prior → decode → write implicit memory → gate → write
    /// explicit memory → heads. Nothing is committed unless every stage succeeds.
    pub fn recurrent_step(&mut self, frame: &FramePacket) -> Result<StepOutput> {
        let readout = read_prior(&self.fast_weights, &self.slow, frame)?;
        let dec = self.decoder.decode(&readout.prior, frame, &self.state)?;
        let loss = ttt_loss(&readout.prior, &dec.posterior_pose)?;

        let grads = ttt_gradient(&self.fast_weights, &readout.queries, &dec.posterior_pose)?;
        let alpha = predict_decay(&self.slow, frame)?;
        let eta = predict_lr(&self.slow, frame)?;
        let mut next_weights = update_weights(&self.fast_weights, &grads, &alpha, &eta)?;
        if let Some(cap) = self.cfg.fast_weight_norm_cap {
            next_weights.clamp_norms(cap);
        }
        if self.fault == Some(FaultStage::AfterImplicitWrite) {
            return Err(Error::invalid("injected fault after implicit-memory write"));
        }

        let zeta = match self.gate_override {
            Some(z) => DMatrix::from_element(self.state.n_tokens(), self.state.channels(), z),
            None => compute_gate(&self.gate_params, frame, &self.state)?,
        };
        let token_gate = apply_strategy(&self.cfg.strategy, &self.state, &dec.candidate_state)?;
        let next_state = gated_update_with_token_gate(&self.state, &dec.candidate_state, &zeta, &token_gate)?;
        if self.fault == Some(FaultStage::AfterExplicitWrite) {
            return Err(Error::invalid("injected fault after explicit-memory write"));
        }
        if !next_weights.is_finite() || next_state.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::degenerate(format!(
                "non-finite memory after frame {}",
                frame.frame_index
            )));
        }

        let predicted_pose = head_pose(&self.heads, &dec.posterior_pose, frame.frame_index as f64)?;
        let local_points = head_points(&self.heads, &dec.refined_tokens, &dec.posterior_pose, PointMode::SelfFrame)?;
        let world_points = head_points(&self.heads, &dec.refined_tokens, &dec.posterior_pose, PointMode::World)?;

        self.fast_weights = next_weights;
        self.state = next_state;
        self.frames_seen += 1;

        Ok(StepOutput {
            prior_pose: readout.prior,
            posterior_pose: dec.posterior_pose,
            refined_tokens: dec.refined_tokens,
            candidate_state: dec.candidate_state,
            predicted_pose,
            local_points,
            world_points,
            ttt_loss: loss,
            gate_mean: zeta.mean(),
            token_gate_mean: token_gate.mean(),
        })
    }

    /// State snapshot followed by a fast-weight section (`u64 heads`, `u64 d_head`,
    /// then `W1, W2, W3` of each head as `u64 rows`, `u64 cols`, row-major `f64`).
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        self.state.write_to(out)?;
        out.write_all(&(self.fast_weights.n_heads() as u64).to_le_bytes())?;
        out.write_all(&(self.fast_weights.d_head() as u64).to_le_bytes())?;
        for head in &self.fast_weights.heads {
            for m in head.matrices() {
                write_matrix(out, m)?;
            }
        }
        Ok(())
    }

    /// Restores both memories from [`Engine::write_checkpoint`] output; shapes must match.
    pub fn restore_checkpoint<R: Read>(&mut self, input: &mut R) -> Result<()> {
        let state = StateTokens::read_from(input)?;
        if state.shape() != self.state.shape() {
            return Err(Error::dim(format!(
                "checkpoint state {:?} vs engine {:?}",
                state.shape(),
                self.state.shape()
            )));
        }
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Parse(format!("truncated fast-weight header: {e}")))?;
        let heads = u64::from_le_bytes(header[..8].try_into().expect("8 bytes")) as usize;
        let d = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
        if heads != self.fast_weights.n_heads() || d != self.fast_weights.d_head() {
            return Err(Error::dim(format!("checkpoint fast weights {heads}×{d} do not match engine")));
        }
        let mut fw = Vec::with_capacity(heads);
        for _ in 0..heads {
            let (w1, w2, w3) = (read_matrix(input)?, read_matrix(input)?, read_matrix(input)?);
            if [&w1, &w2, &w3].iter().any(|m| m.shape() != (d, d)) {
                return Err(Error::dim("checkpoint head matrix has the wrong shape"));
            }
            fw.push(HeadMatrices { w1, w2, w3 });
        }
        self.state = state;
        self.fast_weights = FastWeights { heads: fw };
        Ok(())
    }
}
