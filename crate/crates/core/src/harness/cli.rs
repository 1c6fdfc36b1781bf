//! Command-line front end. Exit codes: 0 success, 1 contract violation, 2 I/O error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use super::config::RunConfig;
use super::gradcheck::gradcheck_suite;
use super::retention::{expected_sq_retention, known_pattern, retention_experiment, RetentionConfig, ZetaMode};
use super::runner::run_stream;
use super::scene::{generate_scene, TrajKind};
use crate::error::{Error, Result};
use crate::fast_weight::{fast_weight_param_count, FastWeightConfig};
use crate::metrics::cloud::{normal_consistency, read_cloud_file, write_ply};
use crate::metrics::depth::read_depth_csv;
use crate::metrics::{ate, chamfer, depth_metrics, read_tum, rpe, write_tum, DepthMode};
use crate::state::{gate_param_count, GateConfig};

/// Relative-error threshold for `gradcheck` to succeed.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "dualmem", version, about = "Streaming dual-memory engine: checks, runs and metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare the analytic fast-weight gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long = "d-head", value_delimiter = ',', default_values_t = [2usize, 4, 8])]
        d_head: Vec<usize>,
    },
    /// Print the parameter counts of the fast-weight module and the gate MLP.
    ParamCount(ParamCountArgs),
    /// Stream a synthetic scene and write a JSON-lines report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Record per-frame wall-clock times (makes reports non-reproducible).
        #[arg(long)]
        timings: bool,
        /// Also write the estimated trajectory in TUM format.
        #[arg(long)]
        est_traj: Option<PathBuf>,
        /// Also write the ground-truth trajectory in TUM format.
        #[arg(long)]
        gt_traj: Option<PathBuf>,
    },
    /// Evaluate trajectories, depth maps and point clouds from files.
    Metrics(MetricsArgs),
    /// Measure forgetting of a stored state pattern under gated noise writes.
    Retention {
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Fixed gate values; repeatable.
        #[arg(long = "zeta", default_values_t = [0.1, 1.0])]
        zeta: Vec<f64>,
        /// Add a curve for a freshly initialised learned gate.
        #[arg(long)]
        learned: bool,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        #[arg(long, default_value_t = 48)]
        channels: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic scene (landmarks PLY and trajectory TUM) to a directory.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        landmarks: usize,
        #[arg(long, value_enum, default_value_t = TrajArg::Orbit)]
        traj: TrajArg,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ParamCountArgs {
    #[arg(long, default_value_t = 1024)]
    d_in: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_head: usize,
    #[arg(long, default_value_t = 768)]
    channels: usize,
    #[arg(long, default_value_t = 384)]
    bottleneck: usize,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Estimated trajectory (TUM).
    #[arg(long, requires = "gt")]
    est: Option<PathBuf>,
    /// Ground-truth trajectory (TUM).
    #[arg(long, requires = "est")]
    gt: Option<PathBuf>,
    /// Frame offset for RPE.
    #[arg(long, default_value_t = 1)]
    delta: usize,
    /// Depth CSV with `frame,estimate,truth[,valid]` columns.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DepthArg::Metric)]
    depth_mode: DepthArg,
    /// Predicted point cloud (.ply or .csv).
    #[arg(long, requires = "gt_cloud")]
    pred_cloud: Option<PathBuf>,
    /// Reference point cloud (.ply or .csv).
    #[arg(long, requires = "pred_cloud")]
    gt_cloud: Option<PathBuf>,
    /// Neighbourhood size for normal estimation.
    #[arg(long, default_value_t = 10)]
    nc_k: usize,
    /// Print one JSON object instead of text lines.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrajArg {
    Orbit,
    Corridor,
    RandomWalk,
}

impl From<TrajArg> for TrajKind {
    fn from(t: TrajArg) -> Self {
        match t {
            TrajArg::Orbit => TrajKind::Orbit,
            TrajArg::Corridor => TrajKind::Corridor,
            TrajArg::RandomWalk => TrajKind::RandomWalk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DepthArg {
    Metric,
    PerSequenceScaled,
}

/// Outcome of a subcommand that ran to completion but may still report failure.
enum Status {
    Ok,
    Failed(String),
}

/// Runs the CLI on `argv` (including the program name), writing to the given streams.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(Status::Ok) => 0,
        Ok(Status::Failed(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

/// [`run_cli`] on the process's stdout and stderr.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let (stdout, stderr) = (std::io::stdout(), std::io::stderr());
    run_cli(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<Status> {
    match cmd {
        Command::Gradcheck {
            seed,
            instances,
            d_head,
        } => {
            let worst = gradcheck_suite(seed, instances, &d_head)?;
            writeln!(out, "max_rel_error {worst:e}")?;
            if worst < GRADCHECK_TOLERANCE {
                Ok(Status::Ok)
            } else {
                Ok(Status::Failed(format!("max relative error {worst:e} ≥ {GRADCHECK_TOLERANCE:e}")))
            }
        }
        Command::ParamCount(a) => {
            let fast = FastWeightConfig::with_dims(a.d_in, a.heads, a.d_head);
            fast.validate()?;
            let gate = GateConfig {
                channels: a.channels,
                d_in: a.d_in,
                bottleneck: a.bottleneck,
            };
            writeln!(out, "fast_weight_params {}", fast_weight_param_count(&fast))?;
            writeln!(out, "gate_params {}", gate_param_count(&gate))?;
            Ok(Status::Ok)
        }
        Command::Run {
            config,
            out: dest,
            frames,
            timings,
            est_traj,
            gt_traj,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(f) = frames {
                cfg.frames = f;
            }
            let scene = generate_scene(cfg.seeds.scene, cfg.n_landmarks, cfg.traj_kind, cfg.frames)?;
            let outcome = run_stream(&scene, &cfg, timings)?;
            match dest {
                Some(p) => {
                    let mut w = create(&p)?;
                    outcome.report.write_jsonl(&mut w)?;
                    w.flush()?;
                }
                None => outcome.report.write_jsonl(out)?,
            }
            if let Some(p) = est_traj {
                let mut w = create(&p)?;
                write_tum(&mut w, &outcome.estimated)?;
                w.flush()?;
            }
            if let Some(p) = gt_traj {
                let mut w = create(&p)?;
                write_tum(&mut w, &scene.trajectory)?;
                w.flush()?;
            }
            Ok(match outcome.report.summary.error {
                Some(e) => Status::Failed(e),
                None => Status::Ok,
            })
        }
        Command::Metrics(a) => metrics(a, out),
        Command::Retention {
            steps,
            zeta,
            learned,
            noise,
            seed,
            tokens,
            channels,
            out: dest,
        } => {
            let cfg = RetentionConfig {
                steps,
                n_tokens: tokens,
                channels,
                noise_level: noise,
                seed,
            };
            let mut modes: Vec<ZetaMode> = zeta.into_iter().map(ZetaMode::Fixed).collect();
            if learned {
                modes.push(ZetaMode::LearnedGate);
            }
            if modes.is_empty() {
                return Err(Error::invalid("retention needs at least one gate mode"));
            }
            let curves = modes
                .iter()
                .map(|m| retention_experiment(&cfg, *m))
                .collect::<Result<Vec<_>>>()?;
            let s0_sq = known_pattern(tokens, channels).tokens.norm_squared();
            let mut header = vec!["step".to_string()];
            for m in &modes {
                header.push(m.to_string());
                if let ZetaMode::Fixed(z) = m {
                    header.push(format!("expected_rms_zeta={z}"));
                }
            }
            let mut rows = vec![header.join(",")];
            for t in 0..steps {
                let mut row = vec![(t + 1).to_string()];
                for (m, c) in modes.iter().zip(&curves) {
                    row.push(c.errors[t].to_string());
                    if let ZetaMode::Fixed(z) = m {
                        row.push(expected_sq_retention(*z, t + 1, noise, tokens * channels, s0_sq).sqrt().to_string());
                    }
                }
                rows.push(row.join(","));
            }
            let text = rows.join("\n") + "\n";
            match dest {
                Some(p) => std::fs::write(p, text)?,
                None => out.write_all(text.as_bytes())?,
            }
            Ok(Status::Ok)
        }
        Command::Gen {
            seed,
            landmarks,
            traj,
            frames,
            out_dir,
        } => {
            let scene = generate_scene(seed, landmarks, traj.into(), frames)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut w = create(&out_dir.join("landmarks.ply"))?;
            write_ply(&mut w, &scene.landmarks)?;
            w.flush()?;
            let mut w = create(&out_dir.join("trajectory.txt"))?;
            write_tum(&mut w, &scene.trajectory)?;
            w.flush()?;
            writeln!(out, "wrote {} landmarks and {} poses to {}", landmarks, frames, out_dir.display())?;
            Ok(Status::Ok)
        }
    }
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> Result<Status> {
    if a.est.is_none() && a.depth.is_none() && a.pred_cloud.is_none() {
        return Err(Error::invalid("metrics needs --est/--gt, --depth, or --pred-cloud/--gt-cloud"));
    }
    let mut report = serde_json::Map::new();
    let mut lines = Vec::new();
    if let (Some(est), Some(gt)) = (&a.est, &a.gt) {
        let est = read_tum(BufReader::new(File::open(est)?))?;
        let gt = read_tum(BufReader::new(File::open(gt)?))?;
        let ate_v = ate(&est, &gt)?;
        let r = rpe(&est, &gt, a.delta)?;
        lines.push(format!("ATE {ate_v:.9}"));
        lines.push(format!("RPE_trans {:.9}", r.trans));
        lines.push(format!("RPE_rot_deg {:.9}", r.rot));
        report.insert("ate".into(), json!(ate_v));
        report.insert("rpe".into(), json!(r));
    }
    if let Some(path) = &a.depth {
        let frames = read_depth_csv(File::open(path)?)?;
        let mode = match a.depth_mode {
            DepthArg::Metric => DepthMode::Metric,
            DepthArg::PerSequenceScaled => DepthMode::PerSequenceScaled,
        };
        let m = depth_metrics(&frames, mode)?;
        lines.push(format!("AbsRel {:.9}", m.abs_rel));
        lines.push(format!("Delta1.25_pct {:.6}", m.delta_125));
        report.insert("depth".into(), json!(m));
    }
    if let (Some(pred), Some(gt)) = (&a.pred_cloud, &a.gt_cloud) {
        let pred = read_cloud_file(pred)?;
        let gt = read_cloud_file(gt)?;
        let c = chamfer(&pred.points, &gt.points)?;
        let nc = normal_consistency(&pred.points, &gt.points, a.nc_k)?;
        lines.push(format!("Accuracy {:.9}", c.accuracy));
        lines.push(format!("Completeness {:.9}", c.completeness));
        lines.push(format!("Chamfer {:.9}", c.cd));
        lines.push(format!("NC {nc:.9}"));
        report.insert("chamfer".into(), json!(c));
        report.insert("normal_consistency".into(), json!(nc));
    }
    if a.json {
        writeln!(out, "{}", serde_json::Value::Object(report))?;
    } else {
        for l in lines {
            writeln!(out, "{l}")?;
        }
    }
    Ok(Status::Ok)
}
