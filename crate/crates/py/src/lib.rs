//! Python bindings: the streaming engine, synthetic runs, the metric suite and the
//! gradient check. Matrices cross the boundary as nested lists of floats and
//! trajectories as `(t, tx, ty, tz, qx, qy, qz, qw)` rows, the TUM column order.

use dualmem::engine::{Engine, EngineConfig};
use dualmem::fast_weight::{fast_weight_param_count, FastWeightConfig};
use dualmem::harness::{
    generate_scene, gradcheck_suite, retention_experiment, run_stream, RetentionConfig, RunConfig, ZetaMode,
};
use dualmem::metrics::{self, TrajectoryPose};
use dualmem::state::{gate_param_count, GateConfig};
use dualmem::FramePacket;
use nalgebra::{DMatrix, Quaternion, UnitQuaternion, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: dualmem::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), width, &flat))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

type TumRow = (f64, f64, f64, f64, f64, f64, f64, f64);

fn to_traj(rows: &[TumRow]) -> Vec<TrajectoryPose> {
    rows.iter()
        .map(|&(t, tx, ty, tz, qx, qy, qz, qw)| {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
            TrajectoryPose::new(t, q, Vector3::new(tx, ty, tz))
        })
        .collect()
}

fn to_tum(p: &TrajectoryPose) -> TumRow {
    let q = p.rotation.quaternion();
    let t = p.translation;
    (p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w)
}

fn to_points(rows: &[(f64, f64, f64)]) -> Vec<Vector3<f64>> {
    rows.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect()
}

/// Streaming engine with toy dimensions unless a run-config JSON is given.
#[pyclass(name = "Engine")]
struct PyEngine {
    inner: Engine,
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (seed = 0, config_json = None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => RunConfig::from_json(text).map_err(py_err)?.engine_config(),
            None => EngineConfig::toy(seed),
        };
        Ok(Self {
            inner: Engine::new(cfg).map_err(py_err)?,
        })
    }

    /// Runs one frame of `T × d_in` tokens and returns the step outputs as a dict.
    #[pyo3(signature = (tokens, frame_index = None))]
    fn step<'py>(&mut self, py: Python<'py>, tokens: Vec<Vec<f64>>, frame_index: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let index = frame_index.unwrap_or_else(|| self.inner.frames_seen());
        let packet = FramePacket::new(to_matrix(&tokens)?, index, false).map_err(py_err)?;
        let out = self.inner.recurrent_step(&packet).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("prior_pose", out.prior_pose.as_slice().to_vec())?;
        d.set_item("posterior_pose", out.posterior_pose.as_slice().to_vec())?;
        d.set_item("ttt_loss", out.ttt_loss)?;
        d.set_item("gate_mean", out.gate_mean)?;
        d.set_item("token_gate_mean", out.token_gate_mean)?;
        d.set_item("pose", to_tum(&out.predicted_pose))?;
        let pts = |pm: &dualmem::objectives::PointMap| -> Vec<(f64, f64, f64)> {
            pm.points.iter().map(|p| (p.x, p.y, p.z)).collect()
        };
        d.set_item("local_points", pts(&out.local_points))?;
        d.set_item("world_points", pts(&out.world_points))?;
        d.set_item("confidence", out.world_points.confidence.clone())?;
        Ok(d)
    }

    #[getter]
    fn frames_seen(&self) -> usize {
        self.inner.frames_seen()
    }

    #[getter]
    fn footprint_bytes(&self) -> usize {
        self.inner.footprint_bytes()
    }

    #[getter]
    fn state(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.state.tokens)
    }

    /// Forces the channel gate to a constant (`None` restores the learned gate).
    fn set_gate_override(&mut self, zeta: Option<f64>) {
        self.inner.gate_override = zeta;
    }

    fn checkpoint<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut blob = Vec::new();
        self.inner.write_checkpoint(&mut blob).map_err(py_err)?;
        Ok(PyBytes::new(py, &blob))
    }

    fn restore(&mut self, blob: &[u8]) -> PyResult<()> {
        let mut reader = blob;
        self.inner.restore_checkpoint(&mut reader).map_err(py_err)
    }
}

/// `(fast_weight_params, gate_params)` for the given widths.
#[pyfunction]
#[pyo3(signature = (d_in = 1024, heads = 12, d_head = 64, channels = 768, bottleneck = 384))]
fn param_counts(d_in: usize, heads: usize, d_head: usize, channels: usize, bottleneck: usize) -> PyResult<(usize, usize)> {
    let fast = FastWeightConfig::with_dims(d_in, heads, d_head);
    fast.validate().map_err(py_err)?;
    let gate = GateConfig {
        channels,
        d_in,
        bottleneck,
    };
    Ok((fast_weight_param_count(&fast), gate_param_count(&gate)))
}

/// Largest relative error between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (seed = 7, instances = 100, d_heads = vec![2, 4, 8]))]
fn gradcheck(seed: u64, instances: usize, d_heads: Vec<usize>) -> PyResult<f64> {
    gradcheck_suite(seed, instances, &d_heads).map_err(py_err)
}

#[pyfunction]
fn ate(est: Vec<TumRow>, gt: Vec<TumRow>) -> PyResult<f64> {
    metrics::ate(&to_traj(&est), &to_traj(&gt)).map_err(py_err)
}

/// `(translation_rmse, rotation_rmse_degrees)`.
#[pyfunction]
#[pyo3(signature = (est, gt, delta = 1))]
fn rpe(est: Vec<TumRow>, gt: Vec<TumRow>, delta: usize) -> PyResult<(f64, f64)> {
    let r = metrics::rpe(&to_traj(&est), &to_traj(&gt), delta).map_err(py_err)?;
    Ok((r.trans, r.rot))
}

/// `(chamfer, accuracy, completeness)`.
#[pyfunction]
fn chamfer(pred: Vec<(f64, f64, f64)>, truth: Vec<(f64, f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let c = metrics::chamfer(&to_points(&pred), &to_points(&truth)).map_err(py_err)?;
    Ok((c.cd, c.accuracy, c.completeness))
}

/// `(abs_rel, delta_pct)` pooled over frames of `(estimate, truth)` depth lists.
#[pyfunction]
#[pyo3(signature = (frames, per_sequence_scaled = false))]
fn depth_metrics(frames: Vec<(Vec<f64>, Vec<f64>)>, per_sequence_scaled: bool) -> PyResult<(f64, f64)> {
    let frames = frames
        .into_iter()
        .map(|(e, t)| metrics::DepthFrame::from_maps(e, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let mode = if per_sequence_scaled {
        metrics::DepthMode::PerSequenceScaled
    } else {
        metrics::DepthMode::Metric
    };
    let m = metrics::depth_metrics(&frames, mode).map_err(py_err)?;
    Ok((m.abs_rel, m.delta_125))
}

/// Streams a synthetic scene and returns the JSONL report.
#[pyfunction]
fn run(config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let scene = generate_scene(cfg.seeds.scene, cfg.n_landmarks, cfg.traj_kind, cfg.frames).map_err(py_err)?;
    let outcome = run_stream(&scene, &cfg, false).map_err(py_err)?;
    Ok(outcome.report.to_jsonl())
}

/// Relative error curve `‖S_t − S_0‖ / ‖S_0‖` for a fixed ζ, or the learned gate when `zeta` is `None`.
#[pyfunction]
#[pyo3(signature = (steps, zeta = None, seed = 0, noise = 1.0))]
fn retention(steps: usize, zeta: Option<f64>, seed: u64, noise: f64) -> PyResult<Vec<f64>> {
    let cfg = RetentionConfig {
        noise_level: noise,
        ..RetentionConfig::toy(steps, seed)
    };
    let mode = zeta.map_or(ZetaMode::LearnedGate, ZetaMode::Fixed);
    Ok(retention_experiment(&cfg, mode).map_err(py_err)?.errors)
}

#[pymodule]
fn dualmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(rpe, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(retention, m)?)?;
    Ok(())
}
