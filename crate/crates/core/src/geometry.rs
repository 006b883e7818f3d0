//! Point clouds, rigid transforms and the neighborhood queries shared by
//! rendering, the primitives and registration.
//!
//! Everything here is double precision and free of shared state.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in meters.
pub type Point3 = Vector3<f64>;

/// Rotation followed by translation: `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation about the world z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::new(*rot.matrix(), Vector3::zeros())
    }

    /// Rotation by `rotation` that keeps `center` fixed.
    pub fn about_point(rotation: Matrix3<f64>, center: &Point3) -> Self {
        Self::new(rotation, center - rotation * center)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// Orthonormal with determinant +1 and finite translation.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        ortho <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Heading of the rotated x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Angle (radians) of the relative rotation between two transforms.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        if cos < 0.0 {
            return cos.acos();
        }
        // chordal form stays accurate for small angles
        let chord = (rel - Matrix3::identity()).norm() / (2.0 * std::f64::consts::SQRT_2);
        2.0 * chord.min(1.0).asin()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Segmentation tag of a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Object,
    Background,
}

impl Label {
    /// Value of the one-channel segmentation mask.
    pub fn mask(self) -> f64 {
        match self {
            Label::Object => 1.0,
            Label::Background => 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<Label>,
    /// Per-point goal flow, present only once the cloud is goal conditioned.
    pub flow: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, labels: Vec<Label>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self {
            points,
            labels,
            flow: None,
        })
    }

    /// All points share one label.
    pub fn uniform(points: Vec<Point3>, label: Label) -> Self {
        let labels = vec![label; points.len()];
        Self {
            points,
            labels,
            flow: None,
        }
    }

    pub fn with_flow(mut self, flow: Vec<Vector3<f64>>) -> Result<Self> {
        if flow.len() != self.points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} flow vectors",
                self.points.len(),
                flow.len()
            )));
        }
        self.flow = Some(flow);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            flow: self
                .flow
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
        }
    }

    /// Appends `other`; flow is kept only if both sides carry it.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let flow = match (&self.flow, &other.flow) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        PointCloud {
            points,
            labels,
            flow,
        }
    }

    pub fn indices_with(&self, label: Label) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    pub fn subset(&self, label: Label) -> PointCloud {
        self.select(&self.indices_with(label))
    }

    pub fn centroid(&self) -> Option<Point3> {
        centroid(&self.points)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        bounds(&self.points)
    }

    /// ASCII form: a line with `N`, then `x y z label fx fy fz` per point,
    /// `label` being 1 for object and 0 for background. Flow is written as
    /// zeros when absent.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.len() * 64 + 16);
        let _ = writeln!(out, "{}", self.len());
        for (i, p) in self.points.iter().enumerate() {
            let f = self
                .flow
                .as_ref()
                .map(|f| f[i])
                .unwrap_or_else(Vector3::zeros);
            let _ = writeln!(
                out,
                "{:e} {:e} {:e} {} {:e} {:e} {:e}",
                p.x,
                p.y,
                p.z,
                self.labels[i].mask() as u8,
                f.x,
                f.y,
                f.z
            );
        }
        out
    }

    /// Parses [`PointCloud::to_ascii`] output. Flow is attached when any
    /// vector is non-zero.
    pub fn from_ascii(text: &str) -> Result<PointCloud> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing header".into()))?;
        let n: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad header {header:?}")))?;
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut flow = Vec::with_capacity(n);
        for (row, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 7 {
                return Err(Error::Parse(format!("row {row}: expected 7 fields")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {row}: bad number {s:?}")))
            };
            points.push(Vector3::new(num(vals[0])?, num(vals[1])?, num(vals[2])?));
            labels.push(match vals[3] {
                "1" => Label::Object,
                "0" => Label::Background,
                other => return Err(Error::Parse(format!("row {row}: bad label {other:?}"))),
            });
            flow.push(Vector3::new(num(vals[4])?, num(vals[5])?, num(vals[6])?));
        }
        if points.len() != n {
            return Err(Error::Parse(format!(
                "header says {n} points, found {}",
                points.len()
            )));
        }
        let mut cloud = PointCloud::new(points, labels)?;
        if flow.iter().any(|f| *f != Vector3::zeros()) {
            cloud.flow = Some(flow);
        }
        Ok(cloud)
    }
}

pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    Some(sum / points.len() as f64)
}

pub fn bounds(points: &[Point3]) -> Option<(Point3, Point3)> {
    let first = points.first()?;
    Some(
        points
            .iter()
            .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
    )
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        labels: cloud.labels.clone(),
        flow: cloud
            .flow
            .as_ref()
            .map(|f| f.iter().map(|v| t.apply_vector(v)).collect()),
    }
}

#[derive(Default)]
struct VoxelAccumulator {
    sum: Vector3<f64>,
    flow: Vector3<f64>,
    count: usize,
    objects: usize,
}

/// One point per occupied voxel at the centroid of its members. The label
/// is the voxel's majority label (ties go to object); flow, when present, is
/// averaged. Output is ordered by voxel coordinate.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {voxel}")));
    }
    let mut grid: BTreeMap<(i64, i64, i64), VoxelAccumulator> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = voxel_key(p, voxel);
        let acc = grid.entry(key).or_default();
        acc.sum += p;
        acc.count += 1;
        if cloud.labels[i] == Label::Object {
            acc.objects += 1;
        }
        if let Some(f) = &cloud.flow {
            acc.flow += f[i];
        }
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut labels = Vec::with_capacity(grid.len());
    let mut flow = Vec::with_capacity(grid.len());
    for acc in grid.values() {
        let n = acc.count as f64;
        points.push(acc.sum / n);
        labels.push(if 2 * acc.objects >= acc.count {
            Label::Object
        } else {
            Label::Background
        });
        flow.push(acc.flow / n);
    }
    Ok(PointCloud {
        points,
        labels,
        flow: cloud.flow.as_ref().map(|_| flow),
    })
}

pub(crate) fn voxel_key(p: &Point3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Exactly `n` points: without replacement when the cloud is large enough,
/// with replacement otherwise. Deterministic in `seed`.
pub fn random_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_sample_with(cloud, n, &mut rng)
}

pub fn random_sample_with<R: Rng>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let indices: Vec<usize> = if cloud.len() >= n {
        index::sample(rng, cloud.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..cloud.len())).collect()
    };
    Ok(cloud.select(&indices))
}

/// Greedy farthest-point subset of `n` indices starting from index 0.
pub fn farthest_point_sample(points: &[Point3], n: usize) -> Vec<usize> {
    if points.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(points.len());
    let mut chosen = Vec::with_capacity(n);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    for _ in 0..n {
        chosen.push(current);
        let c = points[current];
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.1 {
                best = (i, dist[i]);
            }
        }
        current = best.0;
    }
    chosen
}

/// k-d tree over a fixed point set.
pub struct NeighborIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl NeighborIndex {
    pub fn new(points: &[Point3]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index and Euclidean distance of the closest point.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        Some((nn.item as usize, nn.distance.sqrt()))
    }

    /// Up to `k` closest points, nearest first.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        if self.len == 0 || k == 0 {
            return Vec::new();
        }
        self.tree
            .nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], k.min(self.len))
            .into_iter()
            .map(|nn| (nn.item as usize, nn.distance.sqrt()))
            .collect()
    }

    /// Indices within `radius` (inclusive), in ascending index order.
    pub fn within_radius(&self, q: &Point3, radius: f64) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let mut out: Vec<usize> = self
            .tree
            .within_unsorted::<SquaredEuclidean>(&[q.x, q.y, q.z], radius * radius)
            .into_iter()
            .map(|nn| nn.item as usize)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Unit normal from the smallest-eigenvalue eigenvector of a point set's
/// covariance, or `None` when fewer than three points are given.
pub fn plane_normal(points: &[Point3]) -> Option<Vector3<f64>> {
    if points.len() < 3 {
        return None;
    }
    let c = centroid(points)?;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, &v)| if v < best.1 { (i, v) } else { best },
        );
    let n = eig.eigenvectors.column(idx).into_owned();
    let norm = n.norm();
    (norm > 0.0).then(|| n / norm)
}

/// Per-point normals from k-nearest-neighbor PCA, flipped to point away
/// from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k_neighbors: usize) -> Result<Vec<Vector3<f64>>> {
    if cloud.len() < 3 || k_neighbors < 3 {
        return Err(Error::DegenerateNeighborhood);
    }
    let k = k_neighbors.min(cloud.len());
    let index = NeighborIndex::new(&cloud.points);
    let center = cloud.centroid().ok_or(Error::EmptyCloud)?;
    let mut normals = Vec::with_capacity(cloud.len());
    let mut neighborhood = Vec::with_capacity(k);
    for p in &cloud.points {
        neighborhood.clear();
        neighborhood.extend(
            index
                .k_nearest(p, k)
                .into_iter()
                .map(|(j, _)| cloud.points[j]),
        );
        let n = plane_normal(&neighborhood).ok_or(Error::DegenerateNeighborhood)?;
        normals.push(orient_away(n, &(p - center)));
    }
    Ok(normals)
}

/// Flips `n` so that it has a non-negative component along `outward`.
/// When the two are orthogonal the largest-magnitude component is made
/// positive so the result stays deterministic.
pub(crate) fn orient_away(n: Vector3<f64>, outward: &Vector3<f64>) -> Vector3<f64> {
    let d = n.dot(outward);
    if d.abs() > 1e-12 {
        return if d < 0.0 { -n } else { n };
    }
    let imax = n.iamax();
    if n[imax] < 0.0 {
        -n
    } else {
        n
    }
}

/// `T(x_i) - x_i` for every point of `cloud`.
pub fn goal_flow(cloud: &PointCloud, to_goal: &RigidTransform) -> Vec<Vector3<f64>> {
    cloud.points.iter().map(|p| to_goal.apply(p) - p).collect()
}
