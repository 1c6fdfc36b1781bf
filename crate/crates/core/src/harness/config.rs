//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{FeaturizeConfig, TrajKind};
use crate::decoder::DecoderConfig;
use crate::engine::{default_norm_cap, sub_seed, EngineConfig};
use crate::error::{Error, Result};
use crate::fast_weight::FastWeightConfig;
use crate::state::{GateConfig, GateStrategy};

/// When set, replaces every seed in a loaded config.
pub const SEED_ENV: &str = "DUALMEM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub n_state: usize,
    pub channels: usize,
    pub gate_bottleneck: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub token_grid: usize,
}

impl Default for Dims {
    /// The toy dimensions used by tests and examples.
    fn default() -> Self {
        Self {
            d_in: 64,
            d_model: 48,
            heads: 4,
            d_head: 12,
            n_state: 32,
            channels: 48,
            gate_bottleneck: 24,
            decoder_width: 32,
            decoder_heads: 4,
            token_grid: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub engine: u64,
    pub scene: u64,
    pub code: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_global(0)
    }
}

impl Seeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            engine: sub_seed(seed, 10),
            scene: sub_seed(seed, 11),
            code: sub_seed(seed, 12),
        }
    }
}

fn default_decoder_depth() -> usize {
    1
}
fn default_frames() -> usize {
    200
}
fn default_landmarks() -> usize {
    512
}
fn default_gamma() -> f64 {
    FastWeightConfig::default().gamma
}
fn default_c_base() -> f64 {
    FastWeightConfig::default().c_base
}
/// Keeps an explicit `null` distinct from an absent key.
fn explicit_option<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}
fn default_focal() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub gate_strategy: GateStrategy,
    #[serde(default = "default_decoder_depth")]
    pub decoder_depth: usize,
    pub traj_kind: TrajKind,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_landmarks")]
    pub n_landmarks: usize,
    /// Absent: `sqrt(d_head)`. `null`: no cap. A number: that cap.
    #[serde(default, deserialize_with = "explicit_option", skip_serializing_if = "Option::is_none")]
    pub fast_weight_norm_cap: Option<Option<f64>>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_c_base")]
    pub c_base: f64,
    #[serde(default = "default_focal")]
    pub focal: f64,
}

impl RunConfig {
    pub fn new(traj_kind: TrajKind, frames: usize) -> Self {
        Self {
            dims: Dims::default(),
            seeds: Seeds::default(),
            gate_strategy: GateStrategy::default(),
            decoder_depth: default_decoder_depth(),
            traj_kind,
            frames,
            n_landmarks: default_landmarks(),
            fast_weight_norm_cap: None,
            gamma: default_gamma(),
            c_base: default_c_base(),
            focal: default_focal(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads the file, then applies the seed override from the environment if present.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::invalid(format!("{SEED_ENV}='{v}': {e}")))?;
            cfg.seeds = Seeds::from_global(seed);
        }
        Ok(cfg)
    }

    pub fn engine_config(&self) -> EngineConfig {
        let d = &self.dims;
        EngineConfig {
            fast: FastWeightConfig {
                d_in: d.d_in,
                d_model: d.d_model,
                heads: d.heads,
                d_head: d.d_head,
                gamma: self.gamma,
                c_base: self.c_base,
            },
            gate: GateConfig {
                channels: d.channels,
                d_in: d.d_in,
                bottleneck: d.gate_bottleneck,
            },
            n_state: d.n_state,
            decoder: DecoderConfig {
                depth: self.decoder_depth,
                d_model: d.decoder_width,
                heads: d.decoder_heads,
                seed: sub_seed(self.seeds.engine, 6),
            },
            strategy: self.gate_strategy,
            seed: self.seeds.engine,
            fast_weight_norm_cap: self.norm_cap(),
        }
    }

    pub fn norm_cap(&self) -> Option<f64> {
        self.fast_weight_norm_cap.unwrap_or_else(|| Some(default_norm_cap(self.dims.d_head)))
    }

    pub fn featurize_config(&self) -> FeaturizeConfig {
        FeaturizeConfig {
            d_in: self.dims.d_in,
            grid: self.dims.token_grid,
            focal: self.focal,
            code_seed: self.seeds.code,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let c = RunConfig::from_json(r#"{"traj_kind": "orbit"}"#).unwrap();
        assert_eq!(c, RunConfig::new(TrajKind::Orbit, 200));
        assert_eq!(c.norm_cap(), Some(12f64.sqrt()));
    }

    #[test]
    fn full_json() {
        let text = r#"{
            "dims": {"d_in": 32, "d_model": 16, "heads": 2, "d_head": 8},
            "seeds": {"engine": 1, "scene": 2, "code": 3},
            "gate_strategy": {"kind": "similarity", "params": {"temperature": 0.5}},
            "decoder_depth": 2,
            "traj_kind": "random_walk",
            "frames": 10,
            "fast_weight_norm_cap": null
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        assert_eq!(c.dims.d_in, 32);
        assert_eq!(c.dims.n_state, 32);
        assert_eq!(c.gate_strategy, GateStrategy::Similarity { temperature: 0.5 });
        assert_eq!(c.norm_cap(), None);
        let capped = RunConfig::from_json(r#"{"traj_kind": "orbit", "fast_weight_norm_cap": 2.5}"#).unwrap();
        assert_eq!(capped.norm_cap(), Some(2.5));
        let e = c.engine_config();
        assert_eq!(e.fast.d_model, 16);
        assert_eq!(e.decoder.depth, 2);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_kind() {
        assert!(RunConfig::from_json(r#"{"traj_kind": "orbit", "bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"frames": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"traj_kind": "spiral"}"#).is_err());
    }
}
