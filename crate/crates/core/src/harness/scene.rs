//! Synthetic scenes and the stand-in visual encoder.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FramePacket;
use crate::metrics::{PointCloud, TrajectoryPose};
use crate::nn::{gaussian_matrix, seeded_rng};

/// Landmarks lie on the faces of the cube `[-HALF_BOX, HALF_BOX]³`.
pub const HALF_BOX: f64 = 4.0;
pub const ORBIT_RADIUS: f64 = 2.0;
/// Random-walk camera centers stay inside `[-WALK_LIMIT, WALK_LIMIT]³`.
pub const WALK_LIMIT: f64 = 2.5;
pub const FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajKind {
    Orbit,
    Corridor,
    RandomWalk,
}

impl std::str::FromStr for TrajKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "corridor" => Ok(Self::Corridor),
            "random_walk" | "random-walk" => Ok(Self::RandomWalk),
            other => Err(Error::invalid(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Always carries inward-facing normals.
    pub landmarks: PointCloud,
    pub trajectory: Vec<TrajectoryPose>,
    pub seed: u64,
    pub frame_count: usize,
}

/// Camera-to-world rotation whose optical axis (`+z`) is `forward`, with image `+y`
/// pointing as close to world `-z` as possible.
pub fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let f = forward.normalize();
    let up_hint = if f.z.abs() > 0.99 { Vector3::x() } else { -Vector3::z() };
    let right = up_hint.cross(&f).normalize();
    let down = f.cross(&right);
    let m = Matrix3::from_columns(&[right, down, f]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

fn landmarks(n: usize, rng: &mut impl Rng) -> PointCloud {
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let face = rng.random_range(0..6usize);
        let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
        let mut p = Vector3::new(
            rng.random_range(-HALF_BOX..HALF_BOX),
            rng.random_range(-HALF_BOX..HALF_BOX),
            rng.random_range(-HALF_BOX..HALF_BOX),
        );
        p[axis] = sign * HALF_BOX;
        let mut normal = Vector3::zeros();
        normal[axis] = -sign;
        points.push(p);
        normals.push(normal);
    }
    PointCloud {
        points,
        normals: Some(normals),
    }
}

fn orbit(frames: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    (0..frames)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / frames as f64;
            let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
            (ORBIT_RADIUS * radial, radial)
        })
        .collect()
}

/// Forward travel along `x` with lateral and vertical sway, so the path is not collinear.
fn corridor(frames: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    (0..frames)
        .map(|i| {
            let u = i as f64 / (frames - 1) as f64;
            let phase = 2.0 * PI * u;
            let center = Vector3::new(-WALK_LIMIT + 2.0 * WALK_LIMIT * u, 0.4 * phase.sin(), 0.2 * (2.0 * phase).sin());
            let heading = Vector3::new(1.0, 0.25 * phase.cos(), 0.0);
            (center, heading)
        })
        .collect()
}

fn random_walk(frames: usize, rng: &mut impl Rng) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut center: Vector3<f64> = Vector3::zeros();
    let mut yaw: f64 = rng.random_range(-PI..PI);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push((center, Vector3::new(yaw.cos(), yaw.sin(), 0.0)));
        for k in 0..3 {
            let step: f64 = StandardNormal.sample(rng);
            let next = center[k] + 0.05 * step;
            // Reflect at the walls to stay inside the box.
            center[k] = if next.abs() > WALK_LIMIT { next.signum() * 2.0 * WALK_LIMIT - next } else { next };
        }
        let turn: f64 = StandardNormal.sample(rng);
        yaw += 0.05 * turn;
    }
    out
}

pub fn generate_scene(seed: u64, n_landmarks: usize, traj_kind: TrajKind, frame_count: usize) -> Result<SyntheticScene> {
    if n_landmarks < 4 {
        return Err(Error::invalid(format!("need at least 4 landmarks, got {n_landmarks}")));
    }
    if frame_count < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {frame_count}")));
    }
    let mut rng = seeded_rng(seed);
    let landmarks = landmarks(n_landmarks, &mut rng);
    let path = match traj_kind {
        TrajKind::Orbit => orbit(frame_count),
        TrajKind::Corridor => corridor(frame_count),
        TrajKind::RandomWalk => random_walk(frame_count, &mut rng),
    };
    let trajectory = path
        .into_iter()
        .enumerate()
        .map(|(i, (center, forward))| TrajectoryPose::new(i as f64 / FRAME_RATE, look_rotation(&forward), center))
        .collect();
    Ok(SyntheticScene {
        landmarks,
        trajectory,
        seed,
        frame_count,
    })
}

/// Raw per-bin features before the code: occupancy fraction, mean depth, mean bearing.
pub const RAW_FEATURES: usize = 5;
/// Points closer than this along the optical axis are not visible.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeConfig {
    pub d_in: usize,
    /// The image is split into `grid × grid` bins.
    pub grid: usize,
    /// Normalized focal length; the field of view is `|x/z|, |y/z| < 1/focal`.
    pub focal: f64,
    pub code_seed: u64,
}

/// Seeded random linear code from raw bin features to `d_in − 1` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    pub cfg: FeaturizeConfig,
    code: DMatrix<f64>,
}

/// A frame packet plus the true mean depth of each token (`None` for the empty token).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedFrame {
    pub packet: FramePacket,
    pub token_depths: Vec<Option<f64>>,
}

impl Featurizer {
    pub fn new(cfg: FeaturizeConfig) -> Result<Self> {
        if cfg.d_in < 2 || cfg.grid == 0 || !(cfg.focal > 0.0) {
            return Err(Error::invalid("featurizer needs d_in ≥ 2, grid ≥ 1 and a positive focal length"));
        }
        let mut rng = seeded_rng(cfg.code_seed);
        let code = gaussian_matrix(cfg.d_in - 1, RAW_FEATURES, 1.0 / (RAW_FEATURES as f64).sqrt(), &mut rng);
        Ok(Self { cfg, code })
    }

    pub fn featurize(&self, scene: &SyntheticScene, frame_index: usize) -> Result<FramePacket> {
        Ok(self.featurize_with_depth(scene, frame_index)?.packet)
    }

    /// Visible landmarks are binned on the grid; each occupied bin becomes one token with a
    /// zero validity channel. A view with no visible landmark yields the single empty token.
    pub fn featurize_with_depth(&self, scene: &SyntheticScene, frame_index: usize) -> Result<FeaturizedFrame> {
        let pose = scene.trajectory.get(frame_index).ok_or_else(|| {
            Error::invalid(format!("frame {frame_index} out of range for {} frames", scene.frame_count))
        })?;
        let g = self.cfg.grid;
        let world_to_cam = pose.rotation.inverse();
        let mut bins = vec![(0usize, 0.0f64, Vector3::zeros()); g * g];
        let mut visible = 0usize;
        for p in &scene.landmarks.points {
            let c = world_to_cam * (p - pose.translation);
            if c.z <= NEAR_PLANE {
                continue;
            }
            let (u, v) = (self.cfg.focal * c.x / c.z, self.cfg.focal * c.y / c.z);
            if u.abs() >= 1.0 || v.abs() >= 1.0 {
                continue;
            }
            let col = (((u + 1.0) / 2.0 * g as f64) as usize).min(g - 1);
            let row = (((v + 1.0) / 2.0 * g as f64) as usize).min(g - 1);
            let bin = &mut bins[row * g + col];
            bin.0 += 1;
            bin.1 += c.z;
            bin.2 += c.normalize();
            visible += 1;
        }

        let d = self.cfg.d_in;
        if visible == 0 {
            let mut tokens = DMatrix::zeros(1, d);
            tokens[(0, d - 1)] = 1.0;
            return Ok(FeaturizedFrame {
                packet: FramePacket::new(tokens, frame_index, false)?,
                token_depths: vec![None],
            });
        }
        let occupied: Vec<_> = bins.iter().filter(|b| b.0 > 0).collect();
        let mut tokens = DMatrix::zeros(occupied.len(), d);
        let mut depths = Vec::with_capacity(occupied.len());
        for (i, &&(count, depth_sum, bearing_sum)) in occupied.iter().enumerate() {
            let n = count as f64;
            let mean_bearing = bearing_sum / n;
            let raw = DVector::from_vec(vec![
                n / visible as f64,
                depth_sum / n,
                mean_bearing.x,
                mean_bearing.y,
                mean_bearing.z,
            ]);
            let embedded = &self.code * raw;
            tokens.view_mut((i, 0), (1, d - 1)).copy_from(&embedded.transpose());
            depths.push(Some(depth_sum / n));
        }
        Ok(FeaturizedFrame {
            packet: FramePacket::new(tokens, frame_index, false)?,
            token_depths: depths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn featurizer() -> Featurizer {
        Featurizer::new(FeaturizeConfig {
            d_in: 16,
            grid: 4,
            focal: 1.0,
            code_seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_scenes() {
        for kind in [TrajKind::Orbit, TrajKind::Corridor, TrajKind::RandomWalk] {
            assert_eq!(generate_scene(5, 64, kind, 50).unwrap(), generate_scene(5, 64, kind, 50).unwrap());
        }
        assert_ne!(
            generate_scene(5, 64, TrajKind::RandomWalk, 50).unwrap(),
            generate_scene(6, 64, TrajKind::RandomWalk, 50).unwrap()
        );
    }

    #[test]
    fn orbit_radius_is_constant() {
        let s = generate_scene(1, 32, TrajKind::Orbit, 500).unwrap();
        assert!(s.trajectory.iter().all(|p| (p.translation.norm() - ORBIT_RADIUS).abs() < 1e-9));
    }

    #[test]
    fn scene_invariants() {
        for kind in [TrajKind::Orbit, TrajKind::Corridor, TrajKind::RandomWalk] {
            let s = generate_scene(9, 40, kind, 300).unwrap();
            assert_eq!(s.trajectory.len(), 300);
            assert_eq!(s.landmarks.len(), 40);
            for p in &s.trajectory {
                assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
                assert!(p.translation.amax() <= WALK_LIMIT + 1e-12);
            }
            assert!(s.landmarks.points.iter().all(|p| p.amax() <= HALF_BOX));
            crate::metrics::validate_trajectory(&s.trajectory).unwrap();
        }
        assert!(generate_scene(0, 40, TrajKind::Orbit, 2).is_ok());
        assert!(generate_scene(0, 3, TrajKind::Orbit, 10).is_err());
        assert!(generate_scene(0, 10, TrajKind::Orbit, 1).is_err());
    }

    #[test]
    fn look_rotation_points_forward() {
        for f in [Vector3::x(), Vector3::new(-0.3, 0.7, 0.1), Vector3::z()] {
            let q = look_rotation(&f);
            assert!((q * Vector3::z() - f.normalize()).norm() < 1e-12);
        }
    }

    #[test]
    fn empty_view_token() {
        let mut s = generate_scene(0, 8, TrajKind::Orbit, 2).unwrap();
        // Move every landmark behind the first camera.
        let back = s.trajectory[0].rotation * Vector3::new(0.0, 0.0, -1.0);
        for p in &mut s.landmarks.points {
            *p = s.trajectory[0].translation + back;
        }
        let f = featurizer().featurize_with_depth(&s, 0).unwrap();
        assert_eq!(f.packet.token_count(), 1);
        let t = f.packet.tokens();
        assert_eq!(t[(0, 15)], 1.0);
        assert!((0..15).all(|j| t[(0, j)] == 0.0));
        assert_eq!(f.token_depths, vec![None]);
    }

    #[test]
    fn featurize_is_deterministic_and_translation_invariant() {
        let s = generate_scene(2, 400, TrajKind::Orbit, 20).unwrap();
        let f = featurizer();
        let a = f.featurize(&s, 7).unwrap();
        assert_eq!(a, f.featurize(&s, 7).unwrap());
        assert!(a.token_count() > 1);
        assert!(a.tokens().column(15).iter().all(|&v| v == 0.0));

        let shift = Vector3::new(3.25, -1.5, 0.75);
        let mut moved = s.clone();
        moved.landmarks.points.iter_mut().for_each(|p| *p += shift);
        moved.trajectory.iter_mut().for_each(|p| p.translation += shift);
        let b = f.featurize(&moved, 7).unwrap();
        assert_eq!(a.token_count(), b.token_count());
        assert!((a.tokens() - b.tokens()).amax() < 1e-12);
    }

    #[test]
    fn out_of_range_frame() {
        let s = generate_scene(2, 10, TrajKind::Orbit, 3).unwrap();
        assert!(featurizer().featurize(&s, 3).is_err());
    }
}
