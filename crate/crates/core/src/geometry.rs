//! Rigid-body transforms, point clouds, and point-to-point ICP.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub type Point = [f64; 3];

/// Rotation matrix of a unit quaternion `(w, x, y, z)`, renormalized first.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = norm4(q);
    if n < 1e-12 {
        return Err(Error::DegenerateRotation(n));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    Ok(rotmat_unit([w, x, y, z]))
}

/// Rotation matrix of an already-unit quaternion.
pub(crate) fn rotmat_unit([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn norm4(q: [f64; 4]) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Quaternion of a proper rotation matrix (Shepperd's branch selection).
pub fn rotmat_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    canonical(q)
}

/// Unit norm with `w ≥ 0`.
fn canonical(q: [f64; 4]) -> [f64; 4] {
    let n = norm4(q);
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    q.map(|c| c * s)
}

/// Rigid transform `x ↦ R·x + t` with `R` stored as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// `(w, x, y, z)`, unit norm, `w ≥ 0`.
    pub rotation: [f64; 4],
    /// Meters.
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    /// Normalizes `rotation` into canonical form.
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let n = norm4(rotation);
        if n < 1e-12 {
            return Err(Error::DegenerateRotation(n));
        }
        Ok(Self {
            rotation: canonical(rotation),
            translation,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn from_matrix(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            rotation: rotmat_to_quat(r),
            translation: [t.x, t.y, t.z],
        }
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = axis.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::DegenerateRotation(n));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n], translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotmat_unit(self.rotation)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation_vector());
        m
    }

    pub fn apply(&self, p: &Point) -> Point {
        let r = self.rotation_matrix();
        let v = r * Vector3::from(*p) + self.translation_vector();
        [v.x, v.y, v.z]
    }

    pub fn inverse(&self) -> Self {
        let [w, x, y, z] = self.rotation;
        let conj = canonical([w, -x, -y, -z]);
        let r_inv = rotmat_unit(conj);
        let t = -(r_inv * self.translation_vector());
        Self {
            rotation: conj,
            translation: [t.x, t.y, t.z],
        }
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let d: f64 = self
            .rotation
            .iter()
            .zip(&other.rotation)
            .map(|(a, b)| a * b)
            .sum();
        2.0 * d.abs().min(1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation_vector() - other.translation_vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
    }
}

/// Applies `inner` first, then `outer`: `R = R_o·R_i`, `t = R_o·t_i + t_o`.
pub fn compose_poses(outer: &Pose, inner: &Pose) -> Pose {
    let q = canonical(quat_mul(outer.rotation, inner.rotation));
    let t = outer.rotation_matrix() * inner.translation_vector() + outer.translation_vector();
    Pose {
        rotation: q,
        translation: [t.x, t.y, t.z],
    }
}

/// Per-point appearance attributes stored row-major, `dim` values per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub features: Option<Features>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            features: None,
        }
    }

    pub fn with_features(points: Vec<Point>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != points.len() * dim {
            return Err(Error::dim("point features", &[points.len(), dim], &[values.len()]));
        }
        Ok(Self {
            points,
            features: Some(Features { dim, values }),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
            && self
                .features
                .as_ref()
                .is_none_or(|f| f.values.iter().all(|v| v.is_finite()))
    }

    /// Subset of points (and features) by index.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let features = self.features.as_ref().map(|f| Features {
            dim: f.dim,
            values: indices.iter().flat_map(|&i| f.row(i).iter().copied()).collect(),
        });
        PointCloud { points, features }
    }

    /// Mean point; independent of point order down to the last bit.
    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        std::array::from_fn(|k| {
            let column: Vec<f64> = self.points.iter().map(|p| p[k]).collect();
            crate::tensor::order_free_sum(&column) / n
        })
    }
}

/// `R·x + t` for every point; features are carried through unchanged.
pub fn transform_points(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    let r = pose.rotation_matrix();
    let t = pose.translation_vector();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let v = r * Vector3::from(*p) + t;
            [v.x, v.y, v.z]
        })
        .collect();
    PointCloud {
        points,
        features: cloud.features.clone(),
    }
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Index and distance of the closest target point for every query point,
/// by exhaustive search; ties go to the lowest index.
pub fn nearest_neighbors(queries: &[Point], targets: &[Point]) -> Vec<(usize, f64)> {
    par::map(queries, |q| {
        let mut best = (0usize, f64::INFINITY);
        for (j, t) in targets.iter().enumerate() {
            let d = dist2(q, t);
            if d < best.1 {
                best = (j, d);
            }
        }
        (best.0, best.1.sqrt())
    })
}

/// Least-squares rigid transform mapping `source[i]` onto `target[i]`
/// (SVD of the cross-covariance, with reflection correction).
pub fn kabsch(source: &[Point], target: &[Point]) -> Result<Pose> {
    if source.is_empty() || source.len() != target.len() {
        return Err(Error::dim("kabsch", &[source.len()], &[target.len()]));
    }
    let n = source.len() as f64;
    let cs = source.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / n;
    let ct = target.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / n;
    let spread = source
        .iter()
        .map(|p| (Vector3::from(*p) - cs).norm())
        .fold(0.0, f64::max);
    if spread < 1e-12 {
        return Err(Error::RankDeficient("all source points coincide".into()));
    }
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*t) - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::RankDeficient("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = ct - r * cs;
    Ok(Pose::from_matrix(&r, &t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the mean residual improves by less than this (meters).
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// Mean nearest-neighbor distance at `pose`.
    pub residual: f64,
    pub iterations: usize,
    /// Residual after the initial pose and after every accepted iteration.
    pub history: Vec<f64>,
}

fn mean_residual(pose: &Pose, source: &PointCloud, target: &PointCloud) -> (Vec<usize>, f64) {
    let moved = transform_points(pose, source);
    let nn = nearest_neighbors(&moved.points, &target.points);
    let mean = nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64;
    (nn.into_iter().map(|(j, _)| j).collect(), mean)
}

/// Point-to-point ICP: the returned pose maps `source` onto `target`.
pub fn icp_align(source: &PointCloud, target: &PointCloud, init: &Pose, config: &IcpConfig) -> Result<IcpResult> {
    if source.is_empty() {
        return Err(Error::EmptyInput("icp_align source"));
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("icp_align target"));
    }
    if config.max_iters == 0 {
        return Err(Error::Config("icp max_iters must be at least 1".into()));
    }
    let mut pose = *init;
    let (mut matches, mut residual) = mean_residual(&pose, source, target);
    let mut history = vec![residual];
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        let matched: Vec<Point> = matches.iter().map(|&j| target.points[j]).collect();
        let candidate = kabsch(&source.points, &matched)?;
        let (next_matches, next_residual) = mean_residual(&candidate, source, target);
        iterations += 1;
        if next_residual > residual {
            break;
        }
        let improvement = residual - next_residual;
        pose = candidate;
        matches = next_matches;
        residual = next_residual;
        history.push(residual);
        if improvement < config.tol {
            break;
        }
    }
    Ok(IcpResult {
        pose,
        residual,
        iterations,
        history,
    })
}
