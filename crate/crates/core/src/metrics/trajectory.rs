//! Camera trajectories, ATE/RPE, and TUM-format I/O.

use std::io::{BufRead, Write};

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::sim3::umeyama_sim3;
use crate::error::{ensure_dim, Error, Result};

/// Camera-to-world pose at a timestamp (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPose {
    pub timestamp: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl TrajectoryPose {
    pub fn new(timestamp: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            timestamp,
            rotation,
            translation,
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(timestamp: f64, iso: &Isometry3<f64>) -> Self {
        Self::new(timestamp, iso.rotation, iso.translation.vector)
    }
}

/// Checks unit quaternions and strictly increasing timestamps.
pub fn validate_trajectory(traj: &[TrajectoryPose]) -> Result<()> {
    for (i, p) in traj.iter().enumerate() {
        if (p.rotation.quaternion().norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("pose {i}: quaternion is not unit norm")));
        }
        if !(p.timestamp.is_finite() && p.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("pose {i}: non-finite values")));
        }
    }
    if let Some(i) = traj.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::invalid(format!("timestamps not strictly increasing at pose {}", i + 1)));
    }
    Ok(())
}

fn positions(traj: &[TrajectoryPose]) -> Vec<Vector3<f64>> {
    traj.iter().map(|p| p.translation).collect()
}

/// RMSE of camera positions after Sim(3)-aligning `est` onto `gt`, poses matched by index.
pub fn ate(est: &[TrajectoryPose], gt: &[TrajectoryPose]) -> Result<f64> {
    ensure_dim(est.len(), gt.len(), "trajectory length")?;
    let (src, dst) = (positions(est), positions(gt));
    let t = umeyama_sim3(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Relative pose error at a fixed frame offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rpe {
    /// Meters.
    pub trans: f64,
    /// Degrees.
    pub rot: f64,
}

/// Rotation angle in radians, `2·atan2(‖v‖, |w|)` of the quaternion.
///
/// Equal to `acos((tr R − 1)/2)` but keeps full precision near zero, where the trace
/// form loses about half the significant digits.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    2.0 * q.vector().norm().atan2(q.w.abs())
}

/// Trace-formula angle with the `acos` argument clamped to `[−1, 1]`.
pub fn rotation_angle_trace(q: &UnitQuaternion<f64>) -> f64 {
    let r = q.to_rotation_matrix();
    ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// RMSE over `i` of `E_i = (gt_i⁻¹ gt_{i+δ})⁻¹ (est_i⁻¹ est_{i+δ})`, translation and angle.
pub fn rpe(est: &[TrajectoryPose], gt: &[TrajectoryPose], delta: usize) -> Result<Rpe> {
    ensure_dim(est.len(), gt.len(), "trajectory length")?;
    if delta == 0 || delta >= est.len() {
        return Err(Error::invalid(format!(
            "RPE offset must satisfy 1 ≤ delta < length ({}), got {delta}",
            est.len()
        )));
    }
    let pairs = est.len() - delta;
    let (mut t_sq, mut r_sq) = (0.0, 0.0);
    for i in 0..pairs {
        let rel_gt = gt[i].isometry().inverse() * gt[i + delta].isometry();
        let rel_est = est[i].isometry().inverse() * est[i + delta].isometry();
        let err = rel_gt.inverse() * rel_est;
        t_sq += err.translation.vector.norm_squared();
        r_sq += rotation_angle(&err.rotation).to_degrees().powi(2);
    }
    let n = pairs as f64;
    Ok(Rpe {
        trans: (t_sq / n).sqrt(),
        rot: (r_sq / n).sqrt(),
    })
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; blank and `#` lines are skipped.
pub fn read_tum<R: BufRead>(input: R) -> Result<Vec<TrajectoryPose>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(Error::Parse(format!("line {}: expected 8 fields, found {}", lineno + 1, vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.0) {
            return Err(Error::Parse(format!("line {}: zero quaternion", lineno + 1)));
        }
        out.push(TrajectoryPose::new(
            vals[0],
            UnitQuaternion::from_quaternion(q),
            Vector3::new(vals[1], vals[2], vals[3]),
        ));
    }
    Ok(out)
}

pub fn write_tum<W: Write>(out: &mut W, traj: &[TrajectoryPose]) -> Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for p in traj {
        let q = p.rotation.quaternion();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Unit;

    fn square() -> Vec<TrajectoryPose> {
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
            .iter()
            .enumerate()
            .map(|(i, xy)| {
                TrajectoryPose::new(
                    i as f64,
                    UnitQuaternion::from_euler_angles(0.0, 0.0, i as f64 * 0.3),
                    Vector3::new(xy[0], xy[1], 0.5 * i as f64),
                )
            })
            .collect()
    }

    #[test]
    fn ate_zero_on_self() {
        assert!(ate(&square(), &square()).unwrap() < 1e-12);
    }

    #[test]
    fn ate_removes_similarity() {
        let gt = square();
        let r = UnitQuaternion::from_euler_angles(0.4, -0.2, 1.0);
        let est: Vec<_> = gt
            .iter()
            .map(|p| TrajectoryPose::new(p.timestamp, r * p.rotation, r * p.translation * 3.5 + Vector3::new(1.0, 2.0, 3.0)))
            .collect();
        assert!(ate(&est, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn ate_length_mismatch() {
        assert!(ate(&square()[..3], &square()).is_err());
    }

    #[test]
    fn rpe_zero_cases() {
        let gt = square();
        let e = rpe(&gt, &gt, 1).unwrap();
        assert!(e.trans < 1e-12 && e.rot < 1e-9);
        let rigid = Isometry3::new(Vector3::new(1.0, -3.0, 2.0), Vector3::new(0.2, 0.5, -0.1));
        let est: Vec<_> = gt
            .iter()
            .map(|p| TrajectoryPose::from_isometry(p.timestamp, &(rigid * p.isometry())))
            .collect();
        let e = rpe(&est, &gt, 2).unwrap();
        assert!(e.trans < 1e-9 && e.rot < 1e-9);
        assert!(rpe(&gt, &gt, 0).is_err());
        assert!(rpe(&gt, &gt, 4).is_err());
    }

    #[test]
    fn rpe_known_discrepancy() {
        let gt = vec![
            TrajectoryPose::new(0.0, UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)),
            TrajectoryPose::new(1.0, UnitQuaternion::from_euler_angles(-0.3, 0.1, 0.9), Vector3::new(1.5, 2.5, 2.0)),
        ];
        let axis = Unit::new_normalize(Vector3::new(1.0, 2.0, -0.5));
        let err = Isometry3::from_parts(
            Translation3::from(Vector3::new(0.06, 0.0, 0.08)),
            UnitQuaternion::from_axis_angle(&axis, 5f64.to_radians()),
        );
        let est = vec![gt[0], TrajectoryPose::from_isometry(1.0, &(gt[1].isometry() * err))];
        let e = rpe(&est, &gt, 1).unwrap();
        assert!((e.trans - 0.1).abs() < 1e-9);
        assert!((e.rot - 5.0).abs() < 1e-9);
    }

    #[test]
    fn angle_forms_agree() {
        for &a in &[0.3, 1.0, 2.5, 3.1] {
            let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::new(0.2, -1.0, 0.4)), a);
            assert!((rotation_angle(&q) - a).abs() < 1e-12);
            assert!((rotation_angle_trace(&q) - a).abs() < 1e-7);
        }
    }

    #[test]
    fn tum_round_trip() {
        let traj = square();
        let mut buf = Vec::new();
        write_tum(&mut buf, &traj).unwrap();
        let back = read_tum(buf.as_slice()).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in back.iter().zip(&traj) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.translation, b.translation);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
    }

    #[test]
    fn tum_parsing_errors() {
        assert!(read_tum("0 1 2 3 0 0 0\n".as_bytes()).is_err());
        assert!(read_tum("0 1 2 3 0 0 0 x\n".as_bytes()).is_err());
        assert!(read_tum("0 1 2 3 0 0 0 0\n".as_bytes()).is_err());
        let ok = read_tum("# c\n\n0.5 1 2 3 0 0 0 1\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].rotation, UnitQuaternion::identity());
    }

    #[test]
    fn validation() {
        assert!(validate_trajectory(&square()).is_ok());
        let mut t = square();
        t[2].timestamp = t[1].timestamp;
        assert!(validate_trajectory(&t).is_err());
    }
}
