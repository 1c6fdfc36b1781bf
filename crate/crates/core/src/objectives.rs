//! Training objectives: confidence-weighted pointmap regression, pose loss, RGB loss.

use nalgebra::{DMatrix, Vector3, Vector4};

use crate::error::{ensure_dim, Error, Result};

/// Confidence regularization weight used by default.
pub const DEFAULT_BETA: f64 = 0.2;

/// Per-pixel (here: per-token) 3D points with confidences and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PointMap {
    /// All points valid.
    pub fn new(points: Vec<Vector3<f64>>, confidence: Vec<f64>) -> Result<Self> {
        let valid = vec![true; points.len()];
        Self::with_mask(points, confidence, valid)
    }

    pub fn with_mask(points: Vec<Vector3<f64>>, confidence: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        ensure_dim(confidence.len(), points.len(), "confidence length")?;
        ensure_dim(valid.len(), points.len(), "mask length")?;
        Ok(Self {
            points,
            confidence,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Copy with every point multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p * k).collect(),
            ..self.clone()
        }
    }
}

fn mean_norm<'a>(points: impl Iterator<Item = &'a Vector3<f64>>) -> Result<f64> {
    let (sum, n) = points.fold((0.0, 0usize), |(s, n), p| (s + p.norm(), n + 1));
    if n == 0 {
        return Err(Error::degenerate("scale undefined: no valid points"));
    }
    let s = sum / n as f64;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::degenerate("scale undefined: all valid points at the origin"));
    }
    Ok(s)
}

/// Mean Euclidean norm of the valid points.
pub fn scale_norm(pm: &PointMap) -> Result<f64> {
    mean_norm(pm.points.iter().zip(&pm.valid).filter(|(_, v)| **v).map(|(p, _)| p))
}

/// `Σ c ‖ẑ/ŝ − z/s‖₂ − β log c` over points valid in both maps. Both scales are taken
/// over that same intersected set.
pub fn conf_regression_loss(pred: &PointMap, target: &PointMap, beta: f64) -> Result<f64> {
    ensure_dim(target.len(), pred.len(), "point map length")?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be finite and ≥ 0, got {beta}")));
    }
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| pred.valid[i] && target.valid[i]).collect();
    let s_pred = mean_norm(idx.iter().map(|&i| &pred.points[i]))?;
    let s_tgt = mean_norm(idx.iter().map(|&i| &target.points[i]))?;
    idx.iter().try_fold(0.0, |acc, &i| {
        let c = pred.confidence[i];
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("confidence at point {i} must be positive, got {c}")));
        }
        let r = (pred.points[i] / s_pred - target.points[i] / s_tgt).norm();
        Ok(acc + c * r - beta * c.ln())
    })
}

/// Sum of the local-frame and world-frame confidence losses.
pub fn loss_3d(
    pred_self: &PointMap,
    tgt_self: &PointMap,
    pred_world: &PointMap,
    tgt_world: &PointMap,
    beta: f64,
) -> Result<f64> {
    Ok(conf_regression_loss(pred_self, tgt_self, beta)? + conf_regression_loss(pred_world, tgt_world, beta)?)
}

/// Camera pose with its scene scale, as supervised by [`pose_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    /// Unit quaternion `(w, x, y, z)`.
    pub quaternion: Vector4<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl PoseTarget {
    pub fn new(quaternion: Vector4<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        if (quaternion.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("quaternion norm {} is not 1", quaternion.norm())));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("pose scale must be positive, got {scale}")));
        }
        Ok(Self {
            quaternion,
            translation,
            scale,
        })
    }
}

/// `Σ_t ‖q̂_t − q_t‖ + ‖τ̂_t/ŝ − τ_t/s‖`, quaternions compared literally.
pub fn pose_loss(preds: &[PoseTarget], targets: &[PoseTarget]) -> Result<f64> {
    pose_loss_impl(preds, targets, false)
}

/// As [`pose_loss`], but each predicted quaternion is first flipped onto the target's
/// hemisphere so that `q` and `−q` score the same.
pub fn pose_loss_canonical(preds: &[PoseTarget], targets: &[PoseTarget]) -> Result<f64> {
    pose_loss_impl(preds, targets, true)
}

fn pose_loss_impl(preds: &[PoseTarget], targets: &[PoseTarget], canonical: bool) -> Result<f64> {
    ensure_dim(targets.len(), preds.len(), "pose sequence length")?;
    if preds.is_empty() {
        return Err(Error::invalid("pose loss needs at least one frame"));
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let q_hat = if canonical && p.quaternion.dot(&t.quaternion) < 0.0 {
                -p.quaternion
            } else {
                p.quaternion
            };
            (q_hat - t.quaternion).norm() + (p.translation / p.scale - t.translation / t.scale).norm()
        })
        .sum())
}

/// Sum of squared differences between two `pixels × channels` images.
pub fn rgb_loss(pred_image: &DMatrix<f64>, target_image: &DMatrix<f64>) -> Result<f64> {
    if pred_image.shape() != target_image.shape() {
        return Err(Error::dim(format!(
            "image shapes differ: {:?} vs {:?}",
            pred_image.shape(),
            target_image.shape()
        )));
    }
    Ok((pred_image - target_image).norm_squared())
}

/// `l3d + lpose + 𝟙[raymap]·lrgb`.
pub fn total_loss(l3d: f64, lpose: f64, lrgb: f64, is_raymap: bool) -> f64 {
    if is_raymap {
        l3d + lpose + lrgb
    } else {
        l3d + lpose
    }
}
