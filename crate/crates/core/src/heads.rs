//! Toy linear prediction heads for camera pose and pointmaps.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use crate::error::{ensure_dim, Result};
use crate::metrics::TrajectoryPose;
use crate::nn::{seeded_rng, softplus, Linear};
use crate::objectives::PointMap;

/// Added to every predicted confidence so that `log c` stays finite.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Quaternion norms below this fall back to the identity rotation.
const QUAT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMode {
    /// Local camera frame, from refined image tokens alone.
    SelfFrame,
    /// World frame, conditioned on the posterior pose token as well.
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    /// `d_pose → 7`: quaternion `(w, x, y, z)` then translation.
    pub pose: Linear,
    /// `d_in → 4`: point then raw confidence.
    pub self_points: Linear,
    /// `(d_in + d_pose) → 4`.
    pub world_points: Linear,
}

impl Heads {
    pub fn init(pose_width: usize, image_width: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            pose: Linear::fan_in(pose_width, 7, &mut rng),
            self_points: Linear::fan_in(image_width, 4, &mut rng),
            world_points: Linear::fan_in(image_width + pose_width, 4, &mut rng),
        }
    }

    pub fn zeros(pose_width: usize, image_width: usize) -> Self {
        Self {
            pose: Linear::zeros(pose_width, 7),
            self_points: Linear::zeros(image_width, 4),
            world_points: Linear::zeros(image_width + pose_width, 4),
        }
    }

    pub fn len(&self) -> usize {
        self.pose.param_count() + self.self_points.param_count() + self.world_points.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Turns 7 raw outputs into a pose: the first four are normalised to a unit quaternion
/// (identity if their norm is below 1e-12), the last three are the translation.
pub fn pose_from_raw(raw: &DVector<f64>, timestamp: f64) -> Result<TrajectoryPose> {
    ensure_dim(raw.len(), 7, "raw pose width")?;
    let q = nalgebra::Quaternion::new(raw[0], raw[1], raw[2], raw[3]);
    let rotation = if q.norm() < QUAT_EPS {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    Ok(TrajectoryPose::new(timestamp, rotation, Vector3::new(raw[4], raw[5], raw[6])))
}

pub fn head_pose(heads: &Heads, posterior_pose: &DVector<f64>, timestamp: f64) -> Result<TrajectoryPose> {
    pose_from_raw(&heads.pose.forward(posterior_pose)?, timestamp)
}

/// One point and confidence `softplus(raw) + 1e-6` per refined token.
pub fn head_points(
    heads: &Heads,
    refined_tokens: &DMatrix<f64>,
    posterior_pose: &DVector<f64>,
    mode: PointMode,
) -> Result<PointMap> {
    let raw = match mode {
        PointMode::SelfFrame => heads.self_points.forward_rows(refined_tokens)?,
        PointMode::World => {
            let (n, w) = refined_tokens.shape();
            let mut input = DMatrix::zeros(n, w + posterior_pose.len());
            input.columns_mut(0, w).copy_from(refined_tokens);
            for mut row in input.columns_mut(w, posterior_pose.len()).row_iter_mut() {
                row.copy_from(&posterior_pose.transpose());
            }
            heads.world_points.forward_rows(&input)?
        }
    };
    let points = raw.row_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
    let confidence = raw.row_iter().map(|r| softplus(r[3]) + CONFIDENCE_FLOOR).collect();
    PointMap::new(points, confidence)
}
