//! End-to-end streaming over a synthetic scene, with per-frame footprint and timing probes.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::scene::{Featurizer, SyntheticScene};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::metrics::{ate, chamfer, depth_metrics, rpe, Chamfer, DepthFrame, DepthMetrics, DepthMode, Rpe, TrajectoryPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub ttt_loss: f64,
    pub gate_mean: f64,
    pub token_gate_mean: f64,
    pub footprint_bytes: usize,
    /// Only recorded on request, so that reports stay reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames_requested: usize,
    pub frames_completed: usize,
    pub footprint_min: usize,
    pub footprint_max: usize,
    pub ate: Option<f64>,
    pub rpe: Option<Rpe>,
    /// Per-sequence median-scaled depth of the self-frame points against true bin depths.
    pub depth: Option<DepthMetrics>,
    /// World points of the last frame against the scene landmarks.
    pub chamfer: Option<Chamfer>,
    /// Set when a step failed and the run was cut short.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<FrameRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine {
    Frame(FrameRecord),
    Summary(RunSummary),
}

impl RunReport {
    /// One JSON object per line: every frame record, then the summary.
    pub fn write_jsonl<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, &ReportLine::Frame(r.clone()))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut *out, &ReportLine::Summary(self.summary.clone()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut summary = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::Parse(format!("line {}: content after the summary", i + 1)));
            }
            match serde_json::from_str(&line)? {
                ReportLine::Frame(r) => records.push(r),
                ReportLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::Parse("report has no summary line".into()))?;
        Ok(Self { records, summary })
    }
}

/// A report plus the estimated camera trajectory it was scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub estimated: Vec<TrajectoryPose>,
}

/// Builds an engine and featurizer from `cfg` and streams every frame of `scene`.
pub fn run_stream(scene: &SyntheticScene, cfg: &RunConfig, timings: bool) -> Result<RunOutcome> {
    let mut engine = Engine::new(cfg.engine_config())?;
    let featurizer = Featurizer::new(cfg.featurize_config())?;
    run_engine(&mut engine, &featurizer, scene, timings)
}

/// Streams `scene` through an existing engine. A failing step ends the run and is
/// recorded in the summary; earlier records are kept.
pub fn run_engine(
    engine: &mut Engine,
    featurizer: &Featurizer,
    scene: &SyntheticScene,
    timings: bool,
) -> Result<RunOutcome> {
    let mut records = Vec::with_capacity(scene.frame_count);
    let mut estimated = Vec::with_capacity(scene.frame_count);
    let mut depth_frames = Vec::new();
    let mut last_world = None;
    let mut error = None;

    for i in 0..scene.frame_count {
        let start = Instant::now();
        let step = featurizer
            .featurize_with_depth(scene, i)
            .and_then(|f| engine.recurrent_step(&f.packet).map(|out| (f, out)));
        let elapsed = start.elapsed();
        let (frame, out) = match step {
            Ok(v) => v,
            Err(e) => {
                error = Some(format!("frame {i}: {e}"));
                break;
            }
        };
        records.push(FrameRecord {
            frame: i,
            ttt_loss: out.ttt_loss,
            gate_mean: out.gate_mean,
            token_gate_mean: out.token_gate_mean,
            footprint_bytes: engine.footprint_bytes(),
            wall_ms: timings.then(|| elapsed.as_secs_f64() * 1e3),
        });
        let mut pose = out.predicted_pose;
        pose.timestamp = scene.trajectory[i].timestamp;
        estimated.push(pose);

        let (mut est, mut truth, mut valid) = (Vec::new(), Vec::new(), Vec::new());
        for (p, d) in out.local_points.points.iter().zip(&frame.token_depths) {
            let z = p.z;
            let ok = d.is_some() && z.is_finite() && z > 0.0;
            est.push(z);
            truth.push(d.unwrap_or(0.0));
            valid.push(ok);
        }
        depth_frames.push(DepthFrame::new(est, truth, valid)?);
        last_world = Some(out.world_points.points);
    }

    let n = records.len();
    let gt = &scene.trajectory[..n];
    let summary = RunSummary {
        frames_requested: scene.frame_count,
        frames_completed: n,
        footprint_min: records.iter().map(|r| r.footprint_bytes).min().unwrap_or(0),
        footprint_max: records.iter().map(|r| r.footprint_bytes).max().unwrap_or(0),
        ate: ate(&estimated, gt).ok(),
        rpe: rpe(&estimated, gt, 1).ok(),
        depth: (n > 0).then(|| depth_metrics(&depth_frames, DepthMode::PerSequenceScaled).ok()).flatten(),
        chamfer: last_world.and_then(|w| chamfer(&w, &scene.landmarks.points).ok()),
        error,
    };
    Ok(RunOutcome {
        report: RunReport { records, summary },
        estimated,
    })
}
