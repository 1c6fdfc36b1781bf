//! How fast a stored state pattern is forgotten under repeated gated writes of noise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::sub_seed;
use crate::error::{Error, Result};
use crate::frame::FramePacket;
use crate::nn::{gaussian_matrix, seeded_rng};
use crate::state::{compute_gate, gated_update, GateConfig, GateParams, StateTokens};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ZetaMode {
    /// The same ζ for every entry.
    Fixed(f64),
    /// A freshly initialised channel gate evaluated on a fixed random frame.
    LearnedGate,
}

impl std::fmt::Display for ZetaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ZetaMode::Fixed(z) => write!(f, "zeta={z}"),
            ZetaMode::LearnedGate => write!(f, "learned"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub steps: usize,
    pub n_tokens: usize,
    pub channels: usize,
    /// Standard deviation of each candidate entry.
    pub noise_level: f64,
    pub seed: u64,
}

impl RetentionConfig {
    pub fn toy(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            n_tokens: 32,
            channels: 48,
            noise_level: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub mode: ZetaMode,
    /// `‖S_t − S_0‖_F / ‖S_0‖_F` for `t = 1..=steps`.
    pub errors: Vec<f64>,
}

/// Deterministic, non-zero `S_0`.
pub fn known_pattern(n_tokens: usize, channels: usize) -> StateTokens {
    let tokens = DMatrix::from_fn(n_tokens, channels, |i, j| {
        let phase = 0.7 * (i + 1) as f64 + 0.3 * (j + 1) as f64;
        phase.sin() + 0.5 * (0.2 * (i * channels + j) as f64).cos()
    });
    StateTokens { tokens }
}

const GATE_INPUT_WIDTH: usize = 16;

pub fn retention_experiment(cfg: &RetentionConfig, mode: ZetaMode) -> Result<RetentionCurve> {
    if cfg.steps < 2 {
        return Err(Error::invalid(format!("retention needs at least 2 steps, got {}", cfg.steps)));
    }
    if cfg.n_tokens == 0 || cfg.channels == 0 || !(cfg.noise_level >= 0.0 && cfg.noise_level.is_finite()) {
        return Err(Error::invalid("retention needs a non-empty state and a finite noise level ≥ 0"));
    }
    if let ZetaMode::Fixed(z) = mode {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::invalid(format!("fixed zeta must lie in [0,1], got {z}")));
        }
    }
    let (n, c) = (cfg.n_tokens, cfg.channels);
    let s0 = known_pattern(n, c);
    let s0_norm = s0.tokens.norm();

    let learned = match mode {
        ZetaMode::LearnedGate => {
            let gate_cfg = GateConfig {
                channels: c,
                d_in: GATE_INPUT_WIDTH,
                bottleneck: c.div_ceil(2),
            };
            let params = GateParams::init(&gate_cfg, sub_seed(cfg.seed, 1));
            let mut rng = seeded_rng(sub_seed(cfg.seed, 2));
            let frame = FramePacket::new(gaussian_matrix(8, GATE_INPUT_WIDTH, 1.0, &mut rng), 0, false)?;
            Some((params, frame))
        }
        ZetaMode::Fixed(_) => None,
    };

    let mut noise_rng = seeded_rng(cfg.seed);
    let mut state = s0.clone();
    let mut errors = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let candidate = StateTokens {
            tokens: gaussian_matrix(n, c, cfg.noise_level, &mut noise_rng),
        };
        let zeta = match (&mode, &learned) {
            (ZetaMode::Fixed(z), _) => DMatrix::from_element(n, c, *z),
            (_, Some((params, frame))) => compute_gate(params, frame, &state)?,
            _ => unreachable!("learned gate is built above"),
        };
        state = gated_update(&state, &candidate, &zeta)?;
        errors.push((&state.tokens - &s0.tokens).norm() / s0_norm);
    }
    Ok(RetentionCurve { mode, errors })
}

/// `E‖S_t − S_0‖² / ‖S_0‖²` for fixed ζ and i.i.d. zero-mean candidates with entry
/// variance `noise²` over `entries` scalars.
pub fn expected_sq_retention(zeta: f64, t: usize, noise: f64, entries: usize, s0_norm_sq: f64) -> f64 {
    let keep = 1.0 - zeta;
    let bias = (keep.powi(t as i32) - 1.0).powi(2);
    let decay_sq = keep * keep;
    let geometric = if (1.0 - decay_sq).abs() < 1e-15 {
        t as f64
    } else {
        (1.0 - decay_sq.powi(t as i32)) / (1.0 - decay_sq)
    };
    bias + zeta * zeta * noise * noise * entries as f64 * geometric / s0_norm_sq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_and_overwrite() {
        let cfg = RetentionConfig::toy(10, 3);
        let frozen = retention_experiment(&cfg, ZetaMode::Fixed(0.0)).unwrap();
        assert!(frozen.errors.iter().all(|&e| e == 0.0));

        let over = retention_experiment(&cfg, ZetaMode::Fixed(1.0)).unwrap();
        let s0 = known_pattern(32, 48);
        let first = gaussian_matrix(32, 48, 1.0, &mut seeded_rng(3));
        let expect = (&first - &s0.tokens).norm() / s0.tokens.norm();
        assert!((over.errors[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn learned_gate_curve_is_bounded() {
        let c = retention_experiment(&RetentionConfig::toy(20, 1), ZetaMode::LearnedGate).unwrap();
        assert_eq!(c.errors.len(), 20);
        assert!(c.errors.iter().all(|e| e.is_finite() && *e > 0.0));
    }

    #[test]
    fn closed_form_edges() {
        assert_eq!(expected_sq_retention(0.0, 5, 1.0, 10, 2.0), 0.0);
        assert!((expected_sq_retention(1.0, 3, 2.0, 10, 5.0) - (1.0 + 40.0 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(retention_experiment(&RetentionConfig::toy(1, 0), ZetaMode::Fixed(0.5)).is_err());
        assert!(retention_experiment(&RetentionConfig::toy(5, 0), ZetaMode::Fixed(1.5)).is_err());
    }
}
