use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Relative threshold on the second singular value of the cross-covariance.
const RANK_TOL: f64 = 1e-12;

/// Least-squares similarity `dst ≈ s R src + t` (Umeyama), with `det R = +1`.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Transform> {
    if src.len() != dst.len() {
        return Err(Error::dim(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::invalid(format!("Sim(3) alignment needs ≥ 3 points, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    let cov = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - mu_d) * (s - mu_s).transpose())
        .sum::<Matrix3<f64>>()
        / n;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    if !(var_s > 0.0) || !(sv[0] > 0.0) || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::degenerate("correspondences are collinear or coincident"));
    }
    let mut fix = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        fix[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&fix) * v_t;
    let scale = sv.dot(&fix) / var_s;
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3Transform {
        scale,
        rotation,
        translation,
    })
}
