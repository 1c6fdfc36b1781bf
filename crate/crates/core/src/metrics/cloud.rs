//! Point clouds: Chamfer distance, normal consistency, PLY and CSV I/O.

use std::io::{BufRead, Read, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Optional per-point normals, same length as `points`.
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::dim(format!("{} normals for {} points", normals.len(), points.len())));
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    pub cd: f64,
    /// Mean distance from predicted points to the nearest true point.
    pub accuracy: f64,
    /// Mean distance from true points to the nearest predicted point.
    pub completeness: f64,
}

fn mean_nn_distance(from: &[Vector3<f64>], to: &KdTree) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.nearest(p).expect("tree is non-empty").dist_sq.sqrt())
        .sum();
    total / from.len() as f64
}

pub fn chamfer(pred: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<Chamfer> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty clouds"));
    }
    let accuracy = mean_nn_distance(pred, &KdTree::build(truth));
    let completeness = mean_nn_distance(truth, &KdTree::build(pred));
    Ok(Chamfer {
        cd: 0.5 * (accuracy + completeness),
        accuracy,
        completeness,
    })
}

/// Relative eigenvalue floor below which a neighborhood counts as rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// PCA normals from each point and its `k` nearest neighbours. Points whose
/// neighbourhood has rank < 2 get `None`.
pub fn estimate_normals(points: &[Vector3<f64>], k: usize) -> Vec<Option<Vector3<f64>>> {
    let tree = KdTree::build(points);
    points
        .iter()
        .map(|p| {
            let nbrs = tree.knn(p, k + 1);
            let n = nbrs.len() as f64;
            let centroid = nbrs.iter().map(|nb| points[nb.index]).sum::<Vector3<f64>>() / n;
            let cov = nbrs
                .iter()
                .map(|nb| {
                    let d = points[nb.index] - centroid;
                    d * d.transpose()
                })
                .sum::<Matrix3<f64>>()
                / n;
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (smallest, middle, largest) = (order[0], order[1], order[2]);
            let top = eig.eigenvalues[largest];
            if !(top > 0.0) || eig.eigenvalues[middle] <= RANK_TOL * top {
                return None;
            }
            Some(eig.eigenvectors.column(smallest).normalize())
        })
        .collect()
}

fn directed_nc(src: &[(Vector3<f64>, Vector3<f64>)], dst: &[(Vector3<f64>, Vector3<f64>)]) -> f64 {
    let pts: Vec<Vector3<f64>> = dst.iter().map(|(p, _)| *p).collect();
    let tree = KdTree::build(&pts);
    let total: f64 = src
        .iter()
        .map(|(p, n)| {
            let nb = tree.nearest(p).expect("non-empty");
            n.dot(&dst[nb.index].1).abs()
        })
        .sum();
    total / src.len() as f64
}

/// Mean of the two directed mean `|n_p · n_q|` over nearest-neighbour pairs, with
/// normals from k-NN PCA. Rank-deficient points are excluded from both sides.
pub fn normal_consistency(pred: &[Vector3<f64>], truth: &[Vector3<f64>], k: usize) -> Result<f64> {
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k ≥ 3, got {k}")));
    }
    if pred.len() < k + 1 || truth.len() < k + 1 {
        return Err(Error::invalid(format!("both clouds need at least k + 1 = {} points", k + 1)));
    }
    let with_normals = |pts: &[Vector3<f64>]| -> Vec<(Vector3<f64>, Vector3<f64>)> {
        pts.iter()
            .zip(estimate_normals(pts, k))
            .filter_map(|(p, n)| n.map(|n| (*p, n)))
            .collect()
    };
    let (a, b) = (with_normals(pred), with_normals(truth));
    if a.is_empty() || b.is_empty() {
        return Err(Error::degenerate("every neighbourhood is rank-deficient"));
    }
    Ok(0.5 * (directed_nc(&a, &b) + directed_nc(&b, &a)))
}

/// ASCII PLY with `x y z` and, when present, `nx ny nz` vertex properties.
pub fn write_ply<W: Write>(out: &mut W, cloud: &PointCloud) -> Result<()> {
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(out, "property double x\nproperty double y\nproperty double z")?;
    if cloud.normals.is_some() {
        writeln!(out, "property double nx\nproperty double ny\nproperty double nz")?;
    }
    writeln!(out, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.normals {
            Some(ns) => {
                let n = ns[i];
                writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?
            }
            None => writeln!(out, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

pub fn read_ply<R: BufRead>(input: R) -> Result<PointCloud> {
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of PLY file".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Parse(format!("only ASCII PLY is supported, got {fmt}")))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::Parse(format!("vertex count: {e}")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push((*name).to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Parse("PLY header has no vertex element".into()))?;
    let col = |n: &str| props.iter().position(|p| p == n);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Parse("PLY vertices need x, y, z".into())),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::new();
    for i in 0..count {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("vertex {i}: {e}")))?;
        if vals.len() < props.len() {
            return Err(Error::Parse(format!("vertex {i}: expected {} values", props.len())));
        }
        points.push(Vector3::new(vals[x], vals[y], vals[z]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vector3::new(vals[a], vals[b], vals[c]));
        }
    }
    Ok(PointCloud {
        points,
        normals: normal_cols.map(|_| normals),
    })
}

/// CSV with header `x,y,z` (plus `nx,ny,nz` when normals are present).
pub fn write_csv<W: Write>(out: W, cloud: &PointCloud) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if cloud.normals.is_some() {
        w.write_record(["x", "y", "z", "nx", "ny", "nz"]).map_err(csv_err)?;
    } else {
        w.write_record(["x", "y", "z"]).map_err(csv_err)?;
    }
    for (i, p) in cloud.points.iter().enumerate() {
        let mut rec = vec![p.x.to_string(), p.y.to_string(), p.z.to_string()];
        if let Some(ns) = &cloud.normals {
            rec.extend([ns[i].x.to_string(), ns[i].y.to_string(), ns[i].z.to_string()]);
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let col = |n: &str| headers.iter().position(|h| h == n);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Parse("point CSV needs an x,y,z header".into())),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let get = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 2)))
        };
        points.push(Vector3::new(get(x)?, get(y)?, get(z)?));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vector3::new(get(a)?, get(b)?, get(c)?));
        }
    }
    Ok(PointCloud {
        points,
        normals: normal_cols.map(|_| normals),
    })
}

/// Reads PLY or CSV depending on the file extension.
pub fn read_cloud_file(path: &std::path::Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(std::io::BufReader::new(file)),
        Some("csv") => read_csv(file),
        other => Err(Error::Parse(format!("unknown point cloud extension {other:?} (want .ply or .csv)"))),
    }
}
