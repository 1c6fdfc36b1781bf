//! Video depth metrics: Abs Rel and δ < 1.25.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Standard δ threshold.
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthFrame {
    /// Validates that every masked-in pixel has positive finite depth in both maps.
    pub fn new(estimate: Vec<f64>, truth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        ensure_dim(truth.len(), estimate.len(), "depth map length")?;
        ensure_dim(valid.len(), estimate.len(), "depth mask length")?;
        let ok = |d: f64| d.is_finite() && d > 0.0;
        if let Some(i) = (0..estimate.len()).find(|&i| valid[i] && !(ok(estimate[i]) && ok(truth[i]))) {
            return Err(Error::invalid(format!("valid pixel {i} has non-positive or non-finite depth")));
        }
        Ok(Self {
            estimate,
            truth,
            valid,
        })
    }

    /// Pixels with positive finite depth in both maps are valid, the rest masked out.
    pub fn from_maps(estimate: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        ensure_dim(truth.len(), estimate.len(), "depth map length")?;
        let valid = estimate
            .iter()
            .zip(&truth)
            .map(|(e, t)| e.is_finite() && *e > 0.0 && t.is_finite() && *t > 0.0)
            .collect();
        Self::new(estimate, truth, valid)
    }

    fn valid_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.estimate.len())
            .filter(|&i| self.valid[i])
            .map(|i| (self.estimate[i], self.truth[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Estimates used as-is.
    Metric,
    /// Estimates rescaled by the median of `truth/estimate` over the whole sequence.
    PerSequenceScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Percentage (0–100) of pixels with `max(d_gt/d_est, d_est/d_gt) < 1.25`.
    pub delta_125: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Abs Rel and δ < 1.25 pooled over all valid pixels of the sequence.
pub fn depth_metrics(frames: &[DepthFrame], mode: DepthMode) -> Result<DepthMetrics> {
    depth_metrics_with_threshold(frames, mode, DELTA_THRESHOLD)
}

/// As [`depth_metrics`] with a custom δ threshold.
pub fn depth_metrics_with_threshold(frames: &[DepthFrame], mode: DepthMode, threshold: f64) -> Result<DepthMetrics> {
    let pairs: Vec<(f64, f64)> = frames.iter().flat_map(DepthFrame::valid_pairs).collect();
    if pairs.is_empty() {
        return Err(Error::invalid("depth metrics need at least one valid pixel"));
    }
    let scale = match mode {
        DepthMode::Metric => 1.0,
        DepthMode::PerSequenceScaled => median(pairs.iter().map(|(e, t)| t / e).collect()),
    };
    let n = pairs.len() as f64;
    let (mut rel, mut hits) = (0.0, 0usize);
    for &(e, t) in &pairs {
        let e = e * scale;
        rel += (e - t).abs() / t;
        if (t / e).max(e / t) < threshold {
            hits += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: rel / n,
        delta_125: 100.0 * hits as f64 / n,
    })
}

/// Reads a CSV with header `frame,estimate,truth[,valid]`, grouping rows by frame id.
/// Without a `valid` column, pixels with positive finite depths are valid.
pub fn read_depth_csv<R: Read>(input: R) -> Result<Vec<DepthFrame>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (f, e, t) = match (col("frame"), col("estimate"), col("truth")) {
        (Some(f), Some(e), Some(t)) => (f, e, t),
        _ => return Err(Error::Parse("depth CSV needs frame,estimate,truth columns".into())),
    };
    let v = col("valid");
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>, Vec<Option<bool>>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|err| Error::Parse(format!("row {}: {err}", i + 2)))
        };
        let id = rec.get(f).unwrap_or("").to_string();
        let valid = match v {
            Some(k) => Some(matches!(rec.get(k).unwrap_or(""), "1" | "true" | "True")),
            None => None,
        };
        if groups.last().map_or(true, |g| g.0 != id) {
            groups.push((id, Vec::new(), Vec::new(), Vec::new()));
        }
        let g = groups.last_mut().expect("just pushed");
        g.1.push(num(e)?);
        g.2.push(num(t)?);
        g.3.push(valid);
    }
    groups
        .into_iter()
        .map(|(_, est, tru, val)| {
            if val.iter().all(Option::is_some) && v.is_some() {
                DepthFrame::new(est, tru, val.into_iter().map(|x| x.unwrap_or(false)).collect())
            } else {
                DepthFrame::from_maps(est, tru)
            }
        })
        .collect()
}
