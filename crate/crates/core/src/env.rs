//! Quasi-static DoubleBin simulator.
//!
//! Objects are convex polygons extruded along their local z axis. A resting
//! object sits on one of its stable faces, so its pose is a planar pose plus
//! a face index; a grasped object is rigidly attached to the gripper.
//! Observations are rendered by surface sampling, voxel downsampling and
//! random subsampling, with goal flow from ground-truth correspondence.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    farthest_point_sample, goal_flow, random_sample_with, voxel_downsample, Label, Point3,
    PointCloud, RigidTransform,
};
use crate::primitives::{self, PrimitiveAction, PrimitiveConstants, PrimitiveType};

/// Success threshold on the reward (strict).
pub const SUCCESS_REWARD: f64 = -0.03;
/// Size of the canonical model point set used by the reward.
pub const MODEL_POINTS: usize = 400;

/// splitmix64 finalizer over two words; used to derive per-episode and
/// per-step seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Point3) -> Point3 {
        p.sup(&self.min).inf(&self.max)
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) / 2.0
    }
}

/// Two identical open-top bins side by side along x, centered on the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGeometry {
    /// Interior size (x, y, wall height) of one bin.
    pub size: Vector3<f64>,
    /// Distance between the two bin centers along x.
    pub center_distance: f64,
    pub floor_z: f64,
}

impl Default for BinGeometry {
    fn default() -> Self {
        Self {
            size: Vector3::new(0.40, 0.24, 0.06),
            center_distance: 0.55,
            floor_z: 0.0,
        }
    }
}

impl BinGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.center_distance < self.size.x {
            return Err(Error::InvalidArgument(format!(
                "bins overlap: center distance {} < width {}",
                self.center_distance, self.size.x
            )));
        }
        if self.size.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("bin size must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self, bin: usize) -> Point3 {
        let sign = if bin == 0 { -1.0 } else { 1.0 };
        Vector3::new(sign * self.center_distance / 2.0, 0.0, self.floor_z)
    }

    /// Interior footprint of a bin as `(min, max)` corners in the plane.
    pub fn interior(&self, bin: usize) -> (Vector2<f64>, Vector2<f64>) {
        let c = self.center(bin);
        let half = Vector2::new(self.size.x / 2.0, self.size.y / 2.0);
        (c.xy() - half, c.xy() + half)
    }

    pub fn bin_containing(&self, xy: &Vector2<f64>) -> Option<usize> {
        (0..2).find(|&b| {
            let (lo, hi) = self.interior(b);
            xy.x >= lo.x && xy.x <= hi.x && xy.y >= lo.y && xy.y <= hi.y
        })
    }

    pub fn nearest_bin(&self, xy: &Vector2<f64>) -> usize {
        self.bin_containing(xy)
            .unwrap_or(if xy.x < 0.0 { 0 } else { 1 })
    }

    /// Reachable region of the gripper: both bins plus a margin, up to
    /// 0.45 m above the floor.
    pub fn workspace(&self) -> Aabb {
        let hx = self.center_distance / 2.0 + self.size.x / 2.0 + 0.05;
        let hy = self.size.y / 2.0 + 0.05;
        Aabb {
            min: Vector3::new(-hx, -hy, self.floor_z),
            max: Vector3::new(hx, hy, self.floor_z + 0.45),
        }
    }
}

/// A convex polygon extruded to `height`, both already scaled by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub name: String,
    /// Counter-clockwise vertices centered on the polygon's area centroid.
    pub base: Vec<[f64; 2]>,
    pub height: f64,
    /// Per-episode scale already applied to `base` and `height`.
    pub scale: f64,
}

impl ObjectShape {
    /// Builds a shape from arbitrary planar points: takes the convex hull,
    /// recenters it and rescales so the largest dimension is `max_dim`.
    pub fn from_outline(
        name: impl Into<String>,
        outline: &[[f64; 2]],
        height: f64,
        max_dim: f64,
    ) -> Result<Self> {
        let hull = convex_hull(outline);
        if hull.len() < 3 || height <= 0.0 {
            return Err(Error::InvalidArgument("degenerate object outline".into()));
        }
        let c = polygon_centroid(&hull);
        let base: Vec<[f64; 2]> = hull.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect();
        let mut shape = ObjectShape {
            name: name.into(),
            base,
            height,
            scale: 1.0,
        };
        let s = max_dim / shape.max_dimension();
        shape.base.iter_mut().for_each(|p| {
            p[0] *= s;
            p[1] *= s;
        });
        shape.height *= s;
        Ok(shape)
    }

    /// Axis-aligned box of the given dimensions.
    pub fn cuboid(name: impl Into<String>, x: f64, y: f64, z: f64) -> Self {
        ObjectShape {
            name: name.into(),
            base: vec![
                [-x / 2.0, -y / 2.0],
                [x / 2.0, -y / 2.0],
                [x / 2.0, y / 2.0],
                [-x / 2.0, y / 2.0],
            ],
            height: z,
            scale: 1.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> ObjectShape {
        ObjectShape {
            name: self.name.clone(),
            base: self
                .base
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor])
                .collect(),
            height: self.height * factor,
            scale: self.scale * factor,
        }
    }

    /// Largest of the polygon diameter and the extrusion height.
    pub fn max_dimension(&self) -> f64 {
        let mut diam: f64 = 0.0;
        for a in &self.base {
            for b in &self.base {
                diam = diam.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        diam.max(self.height)
    }

    pub fn is_convex(&self) -> bool {
        let n = self.base.len();
        n >= 3
            && (0..n).all(|i| {
                let a = self.base[i];
                let b = self.base[(i + 1) % n];
                let c = self.base[(i + 2) % n];
                cross2(sub2(b, a), sub2(c, b)) > 0.0
            })
    }

    pub fn num_faces(&self) -> usize {
        self.base.len() + 2
    }

    /// Corners of the prism in the object frame.
    pub fn vertices(&self) -> Vec<Point3> {
        let hh = self.height / 2.0;
        self.base
            .iter()
            .flat_map(|p| [Vector3::new(p[0], p[1], -hh), Vector3::new(p[0], p[1], hh)])
            .collect()
    }

    /// Faces in order: bottom cap, top cap, then one side per base edge.
    pub fn faces(&self) -> Vec<Face> {
        let hh = self.height / 2.0;
        let n = self.base.len();
        let mut faces = Vec::with_capacity(n + 2);
        faces.push(Face {
            normal: -Vector3::z(),
            offset: hh,
            corners: self
                .base
                .iter()
                .rev()
                .map(|p| Vector3::new(p[0], p[1], -hh))
                .collect(),
        });
        faces.push(Face {
            normal: Vector3::z(),
            offset: hh,
            corners: self
                .base
                .iter()
                .map(|p| Vector3::new(p[0], p[1], hh))
                .collect(),
        });
        for j in 0..n {
            let a = self.base[j];
            let b = self.base[(j + 1) % n];
            let e = sub2(b, a);
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            let normal = Vector3::new(e[1] / len, -e[0] / len, 0.0);
            faces.push(Face {
                normal,
                offset: normal.x * a[0] + normal.y * a[1],
                corners: vec![
                    Vector3::new(a[0], a[1], -hh),
                    Vector3::new(b[0], b[1], -hh),
                    Vector3::new(b[0], b[1], hh),
                    Vector3::new(a[0], a[1], hh),
                ],
            });
        }
        faces
    }

    /// A face is stable when the centroid projects well inside it.
    pub fn is_stable_face(&self, face: usize) -> bool {
        if face < 2 {
            return true;
        }
        let n = self.base.len();
        let j = face - 2;
        let a = self.base[j];
        let b = self.base[(j + 1) % n];
        let e = sub2(b, a);
        let t = -(a[0] * e[0] + a[1] * e[1]) / (e[0] * e[0] + e[1] * e[1]);
        (0.05..=0.95).contains(&t)
    }

    /// Rotation that turns `face` to point straight down.
    pub fn face_rotation(&self, face: usize) -> Matrix3<f64> {
        match face {
            0 => Matrix3::identity(),
            1 => RigidTransform::from_axis_angle(&Vector3::x(), std::f64::consts::PI).rotation,
            _ => {
                let n = self.faces()[face].normal;
                RigidTransform::from_axis_angle(
                    &Vector3::new(-n.y, n.x, 0.0),
                    std::f64::consts::FRAC_PI_2,
                )
                .rotation
            }
        }
    }

    /// Signed distance from an object-frame point to the prism surface
    /// (negative inside).
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        let faces = self.faces();
        let outside: Vec<f64> = faces.iter().map(|f| f.normal.dot(p) - f.offset).collect();
        let max_plane = outside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max_plane <= 0.0 {
            return max_plane;
        }
        self.closest_surface_point(p)
            .map(|c| (c - p).norm())
            .unwrap_or(max_plane)
    }

    /// Closest point on the prism surface to an object-frame point.
    pub fn closest_surface_point(&self, p: &Point3) -> Option<Point3> {
        self.faces()
            .iter()
            .map(|f| f.closest_point(p))
            .min_by(|a, b| (a - p).norm_squared().total_cmp(&(b - p).norm_squared()))
    }

    /// Uniform samples on the surface, grouped per face, `density` points per m².
    pub fn sample_faces<R: Rng>(&self, density: f64, rng: &mut R) -> Vec<Vec<Point3>> {
        self.faces()
            .iter()
            .map(|f| {
                let count = ((f.area() * density).ceil() as usize).max(3);
                (0..count).map(|_| f.sample(rng)).collect()
            })
            .collect()
    }
}

/// Planar convex face of a prism in the object frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub normal: Vector3<f64>,
    /// Distance from the object origin to the face plane.
    pub offset: f64,
    /// Counter-clockwise seen from outside.
    pub corners: Vec<Point3>,
}

impl Face {
    pub fn area(&self) -> f64 {
        let c0 = self.corners[0];
        (1..self.corners.len() - 1)
            .map(|i| {
                (self.corners[i] - c0)
                    .cross(&(self.corners[i + 1] - c0))
                    .norm()
                    / 2.0
            })
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point3 {
        // triangle fan, area weighted
        let c0 = self.corners[0];
        let areas: Vec<f64> = (1..self.corners.len() - 1)
            .map(|i| {
                (self.corners[i] - c0)
                    .cross(&(self.corners[i + 1] - c0))
                    .norm()
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut tri = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                tri = i;
                break;
            }
            pick -= a;
        }
        let (a, b) = (self.corners[tri + 1] - c0, self.corners[tri + 2] - c0);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        c0 + a * u + b * v
    }

    /// Closest point of the (convex) face polygon.
    pub fn closest_point(&self, p: &Point3) -> Point3 {
        let proj = p - self.normal * (self.normal.dot(p) - self.offset);
        let n = self.corners.len();
        let inside = (0..n).all(|i| {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % n];
            (b - a).cross(&(proj - a)).dot(&self.normal) >= 0.0
        });
        if inside {
            return proj;
        }
        (0..n)
            .map(|i| closest_on_segment(&self.corners[i], &self.corners[(i + 1) % n], p))
            .min_by(|a, b| (a - p).norm_squared().total_cmp(&(b - p).norm_squared()))
            .unwrap_or(proj)
    }
}

fn closest_on_segment(a: &Point3, b: &Point3, p: &Point3) -> Point3 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    a + ab * t
}

fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2
            && cross2(
                sub2(lower[lower.len() - 1], lower[lower.len() - 2]),
                sub2(*p, lower[lower.len() - 1]),
            ) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2
            && cross2(
                sub2(upper[upper.len() - 1], upper[upper.len() - 2]),
                sub2(*p, upper[upper.len() - 1]),
            ) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_centroid(poly: &[[f64; 2]]) -> [f64; 2] {
    let n = poly.len();
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let c = cross2(p, q);
        a += c;
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    [cx / (3.0 * a), cy / (3.0 * a)]
}

/// Length of the chord of a convex polygon along the line through `p`
/// with direction `dir`; zero when the line misses the polygon.
pub fn polygon_chord(poly: &[[f64; 2]], p: [f64; 2], dir: [f64; 2]) -> f64 {
    let (mut t_min, mut t_max) = (f64::NEG_INFINITY, f64::INFINITY);
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let e = sub2(poly[(i + 1) % n], a);
        // inside when cross(e, x - a) >= 0 for CCW polygons
        let num = cross2(e, sub2(p, a));
        let den = cross2(e, dir);
        if den.abs() < 1e-15 {
            if num < 0.0 {
                return 0.0;
            }
            continue;
        }
        let t = -num / den;
        if den > 0.0 {
            t_min = t_min.max(t);
        } else {
            t_max = t_max.min(t);
        }
    }
    (t_max - t_min).max(0.0) * (dir[0] * dir[0] + dir[1] * dir[1]).sqrt()
}

/// Smallest caliper width of a convex polygon.
pub fn polygon_min_width(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let e = sub2(poly[(i + 1) % n], a);
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            poly.iter()
                .map(|p| cross2(e, sub2(*p, a)).abs() / len)
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2], tol: f64) -> bool {
    let n = poly.len();
    n >= 3
        && (0..n).all(|i| {
            let a = poly[i];
            let e = sub2(poly[(i + 1) % n], a);
            let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
            cross2(e, sub2(p, a)) / len >= -tol
        })
}

/// Which held-out group a library object belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    UnseenInstance,
    UnseenCategory,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "unseen-instance" => Ok(Split::UnseenInstance),
            "unseen-category" => Ok(Split::UnseenCategory),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::UnseenInstance => "unseen-instance",
            Split::UnseenCategory => "unseen-category",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub shape: ObjectShape,
    pub split: Split,
}

/// Unscaled object shapes (max dimension 0.10 m).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectLibrary {
    pub entries: Vec<LibraryEntry>,
}

impl ObjectLibrary {
    /// Procedural library: categories are base-polygon vertex counts. Train
    /// and unseen-instance objects use 3-6 vertices, unseen categories 7-8.
    pub fn procedural(
        train: usize,
        unseen_instance: usize,
        unseen_category: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        let groups = [
            (Split::Train, train, 3..=6usize),
            (Split::UnseenInstance, unseen_instance, 3..=6),
            (Split::UnseenCategory, unseen_category, 7..=8),
        ];
        for (split, count, sides) in groups {
            for i in 0..count {
                let n = rng.gen_range(sides.clone());
                let shape = random_polygon_prism(&format!("{split}-{i}-n{n}"), n, &mut rng);
                entries.push(LibraryEntry { shape, split });
            }
        }
        ObjectLibrary { entries }
    }

    /// Small training set whose every resting pose can be grasped:
    /// the narrowest footprint width stays under `max_width` at the
    /// largest episode scale.
    pub fn graspable(count: usize, max_width: f64, max_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        while entries.len() < count {
            let n = rng.gen_range(3..=6usize);
            let shape = random_polygon_prism(&format!("toy-{}-n{n}", entries.len()), n, &mut rng);
            let ok = (0..shape.num_faces())
                .filter(|&f| shape.is_stable_face(f))
                .all(|f| {
                    let state = EnvState {
                        object: resting_pose(&shape, f, 0.0, 0.0, 0.0, 0.0),
                        shape: shape.clone(),
                        face: f,
                        grasp: None,
                        gripper: GripperPose {
                            position: Vector3::zeros(),
                            yaw: 0.0,
                        },
                    };
                    polygon_min_width(&state.footprint()) * max_scale <= max_width
                });
            if ok {
                entries.push(LibraryEntry {
                    shape,
                    split: Split::Train,
                });
            }
        }
        ObjectLibrary { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    /// Text form, one object per line: `name split height x,y x,y ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {:e}",
                e.shape.name, e.split, e.shape.height
            ));
            for p in &e.shape.base {
                out.push_str(&format!(" {:e},{:e}", p[0], p[1]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (row, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 6 {
                return Err(Error::Parse(format!("line {row}: too few fields")));
            }
            let height: f64 = fields[2]
                .parse()
                .map_err(|_| Error::Parse(format!("line {row}: bad height")))?;
            let mut base = Vec::new();
            for v in &fields[3..] {
                let (x, y) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("line {row}: bad vertex {v:?}")))?;
                let px: f64 = x
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {row}: bad vertex {v:?}")))?;
                let py: f64 = y
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {row}: bad vertex {v:?}")))?;
                base.push([px, py]);
            }
            let shape = ObjectShape {
                name: fields[0].to_string(),
                base,
                height,
                scale: 1.0,
            };
            if !shape.is_convex() {
                return Err(Error::Parse(format!(
                    "line {row}: base polygon is not convex"
                )));
            }
            entries.push(LibraryEntry {
                shape,
                split: fields[1].parse()?,
            });
        }
        Ok(ObjectLibrary { entries })
    }
}

fn random_polygon_prism<R: Rng>(name: &str, sides: usize, rng: &mut R) -> ObjectShape {
    loop {
        let mut angles: Vec<f64> = (0..sides)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let aspect = rng.gen_range(0.5..1.0);
        let outline: Vec<[f64; 2]> = angles
            .iter()
            .map(|a| {
                let r = rng.gen_range(0.8..1.0);
                [r * a.cos(), aspect * r * a.sin()]
            })
            .collect();
        let height = rng.gen_range(0.35..1.1);
        if let Ok(shape) = ObjectShape::from_outline(name, &outline, height, 0.10) {
            // reject slivers: need a short axis the gripper can close on
            let thin = shape.base.len() == sides
                && shape.is_convex()
                && (0..shape.num_faces())
                    .filter(|&f| shape.is_stable_face(f))
                    .count()
                    >= 3;
            if thin {
                return shape;
            }
        }
    }
}

/// Attachment of the object to the closed gripper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    /// Object pose in the gripper frame.
    pub gripper_from_object: RigidTransform,
    /// Both fingers register contact.
    pub contacts: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub position: Point3,
    pub yaw: f64,
}

impl GripperPose {
    pub fn transform(&self) -> RigidTransform {
        let mut t = RigidTransform::from_yaw(self.yaw);
        t.translation = self.position;
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub shape: ObjectShape,
    /// World pose of the object frame.
    pub object: RigidTransform,
    /// Index of the face the object rests on (last resting face while held).
    pub face: usize,
    pub grasp: Option<Grasp>,
    pub gripper: GripperPose,
}

impl EnvState {
    pub fn grasped(&self) -> bool {
        self.grasp.is_some()
    }

    pub fn world_vertices(&self) -> Vec<Point3> {
        self.shape
            .vertices()
            .iter()
            .map(|v| self.object.apply(v))
            .collect()
    }

    pub fn bottom_z(&self) -> f64 {
        self.world_vertices()
            .iter()
            .map(|v| v.z)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn top_z(&self) -> f64 {
        self.world_vertices()
            .iter()
            .map(|v| v.z)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Convex hull of the object's projection on the ground plane.
    pub fn footprint(&self) -> Vec<[f64; 2]> {
        let pts: Vec<[f64; 2]> = self.world_vertices().iter().map(|v| [v.x, v.y]).collect();
        convex_hull(&pts)
    }

    /// `(x, y, yaw)` of a resting object.
    pub fn planar_pose(&self) -> (f64, f64, f64) {
        let heading = self.object.rotation * self.shape.face_rotation(self.face).transpose();
        let yaw = heading[(1, 0)].atan2(heading[(0, 0)]);
        (self.object.translation.x, self.object.translation.y, yaw)
    }

    pub fn object_center(&self) -> Point3 {
        self.object.translation
    }

    /// Object height above the floor of its lowest point.
    pub fn lift_height(&self, bins: &BinGeometry) -> f64 {
        self.bottom_z() - bins.floor_z
    }
}

/// Pose of a resting object on `face` with planar pose `(x, y, yaw)`.
pub fn resting_pose(
    shape: &ObjectShape,
    face: usize,
    x: f64,
    y: f64,
    yaw: f64,
    floor_z: f64,
) -> RigidTransform {
    let faces = shape.faces();
    let rot = RigidTransform::from_yaw(yaw).rotation * shape.face_rotation(face);
    RigidTransform::new(rot, Vector3::new(x, y, floor_z + faces[face].offset))
}

/// Pose of the gripper between primitives.
pub fn reset_gripper(bins: &BinGeometry) -> GripperPose {
    GripperPose {
        position: Vector3::new(0.0, 0.0, bins.floor_z + 0.35),
        yaw: 0.0,
    }
}

/// Drops a released object: picks the stable face most anti-aligned with
/// gravity, lowers it to the floor and pushes its footprint inside the bin
/// below its center (or the nearest bin).
pub fn settle(state: &EnvState, bins: &BinGeometry) -> EnvState {
    let xy = state.object.translation.xy();
    settle_in(state, bins, bins.nearest_bin(&xy))
}

/// [`settle`] with the destination bin given.
pub fn settle_in(state: &EnvState, bins: &BinGeometry, bin: usize) -> EnvState {
    if state.grasped() {
        return state.clone();
    }
    let shape = &state.shape;
    let faces = shape.faces();
    let rot = state.object.rotation;
    let (face, nz) = (0..faces.len())
        .filter(|&f| shape.is_stable_face(f))
        .map(|f| (f, (rot * faces[f].normal).z))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .unwrap_or((0, -1.0));
    let mut out = state.clone();
    out.face = face;
    if !(face == state.face && nz <= -1.0 + 1e-12) {
        let n = rot * faces[face].normal;
        let align = Rotation3::rotation_between(&n, &-Vector3::z())
            .map(|r| r.into_inner())
            .unwrap_or_else(|| {
                RigidTransform::from_axis_angle(&Vector3::x(), std::f64::consts::PI).rotation
            });
        let heading = align * rot * shape.face_rotation(face).transpose();
        let yaw = heading[(1, 0)].atan2(heading[(0, 0)]);
        out.object.rotation = RigidTransform::from_yaw(yaw).rotation * shape.face_rotation(face);
    }
    out.object.translation.z = bins.floor_z + faces[face].offset;
    let footprint = out.footprint();
    let (lo, hi) = bins.interior(bin);
    for axis in 0..2 {
        let fmin = footprint
            .iter()
            .map(|p| p[axis])
            .fold(f64::INFINITY, f64::min);
        let fmax = footprint
            .iter()
            .map(|p| p[axis])
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = if fmax - fmin > hi[axis] - lo[axis] {
            (lo[axis] + hi[axis]) / 2.0 - (fmin + fmax) / 2.0
        } else if fmin < lo[axis] - 1e-12 {
            lo[axis] - fmin
        } else if fmax > hi[axis] + 1e-12 {
            hi[axis] - fmax
        } else {
            0.0
        };
        out.object.translation[axis] += shift;
    }
    out
}

/// True when both fingers touch the object or the object is lifted at
/// least twice its largest dimension above the floor.
pub fn is_grasped(state: &EnvState, bins: &BinGeometry) -> bool {
    let contacts = state.grasp.as_ref().is_some_and(|g| g.contacts);
    contacts || state.lift_height(bins) >= 2.0 * state.shape.max_dimension()
}

pub fn is_success(reward: f64) -> bool {
    reward > SUCCESS_REWARD
}

/// Fixed farthest-point subset of the surface, in the object frame.
pub fn model_points(shape: &ObjectShape) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0F_0B1EC7);
    let dense: Vec<Point3> = shape
        .sample_faces(60_000.0, &mut rng)
        .into_iter()
        .flatten()
        .collect();
    farthest_point_sample(&dense, MODEL_POINTS)
        .into_iter()
        .map(|i| dense[i])
        .collect()
}

/// Negative mean distance between model points at the current and goal poses.
pub fn compute_reward(state: &EnvState, goal: &GoalSpec) -> f64 {
    reward_between(&goal.model_points, &state.object, &goal.transform)
}

pub fn reward_between(model: &[Point3], current: &RigidTransform, goal: &RigidTransform) -> f64 {
    if model.is_empty() {
        return 0.0;
    }
    let total: f64 = model
        .iter()
        .map(|m| (goal.apply(m) - current.apply(m)).norm())
        .sum();
    -total / model.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Goal pose of the object frame.
    pub transform: RigidTransform,
    /// Object surface points at the goal pose.
    pub cloud: PointCloud,
    /// Canonical model points (object frame) used by the reward.
    pub model_points: Vec<Point3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub object_points: usize,
    pub background_points: usize,
    pub object_voxel: f64,
    pub background_voxel: f64,
    /// Surface samples per m² before downsampling.
    pub object_density: f64,
    pub background_density: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            object_points: 400,
            background_points: 1000,
            object_voxel: 0.01,
            background_voxel: 0.02,
            object_density: 40_000.0,
            background_density: 6_000.0,
        }
    }
}

/// Segmented, goal-conditioned point cloud: object points first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cloud: PointCloud,
    pub num_object: usize,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn label(&self, i: usize) -> Label {
        self.cloud.labels[i]
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.cloud.points[i]
    }

    pub fn flow(&self, i: usize) -> Vector3<f64> {
        self.cloud
            .flow
            .as_ref()
            .map(|f| f[i])
            .unwrap_or_else(Vector3::zeros)
    }

    pub fn object_cloud(&self) -> PointCloud {
        self.cloud.subset(Label::Object)
    }

    /// Per-point rows `[x, y, z, fx, fy, fz, mask]`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 7);
        for i in 0..self.len() {
            let p = self.point(i);
            let f = self.flow(i);
            out.extend_from_slice(&[p.x, p.y, p.z, f.x, f.y, f.z, self.label(i).mask()]);
        }
        out
    }
}

/// Dense samples reused across renders of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceCache {
    /// Object-frame samples per face.
    pub object_faces: Vec<Vec<Point3>>,
    /// World-frame samples of the bin interiors.
    pub background: Vec<Point3>,
}

impl SurfaceCache {
    pub fn new<R: Rng>(
        shape: &ObjectShape,
        bins: &BinGeometry,
        config: &ObservationConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            object_faces: shape.sample_faces(config.object_density, rng),
            background: sample_bins(bins, config.background_density, rng),
        }
    }
}

fn sample_bins<R: Rng>(bins: &BinGeometry, density: f64, rng: &mut R) -> Vec<Point3> {
    let mut out = Vec::new();
    let (sx, sy, h) = (bins.size.x, bins.size.y, bins.size.z);
    let mut rect = |origin: Point3, u: Vector3<f64>, v: Vector3<f64>, rng: &mut R| {
        let n = ((u.norm() * v.norm() * density).ceil()) as usize;
        for _ in 0..n {
            out.push(origin + u * rng.gen::<f64>() + v * rng.gen::<f64>());
        }
    };
    for bin in 0..2 {
        let c = bins.center(bin);
        let lo = Vector3::new(c.x - sx / 2.0, c.y - sy / 2.0, bins.floor_z);
        rect(
            lo,
            Vector3::new(sx, 0.0, 0.0),
            Vector3::new(0.0, sy, 0.0),
            rng,
        );
        rect(
            lo,
            Vector3::new(sx, 0.0, 0.0),
            Vector3::new(0.0, 0.0, h),
            rng,
        );
        rect(
            lo + Vector3::new(0.0, sy, 0.0),
            Vector3::new(sx, 0.0, 0.0),
            Vector3::new(0.0, 0.0, h),
            rng,
        );
        rect(
            lo,
            Vector3::new(0.0, sy, 0.0),
            Vector3::new(0.0, 0.0, h),
            rng,
        );
        rect(
            lo + Vector3::new(sx, 0.0, 0.0),
            Vector3::new(0.0, sy, 0.0),
            Vector3::new(0.0, 0.0, h),
            rng,
        );
    }
    out
}

/// Renders the segmented observation with ground-truth goal flow.
pub fn render_observation<R: Rng>(
    state: &EnvState,
    goal: &GoalSpec,
    cache: &SurfaceCache,
    config: &ObservationConfig,
    rng: &mut R,
) -> Result<Observation> {
    let hidden = if state.grasped() {
        None
    } else {
        Some(state.face)
    };
    let mut object_parts = Vec::new();
    for (f, samples) in cache.object_faces.iter().enumerate() {
        if Some(f) == hidden {
            continue;
        }
        let world: Vec<Point3> = samples.iter().map(|p| state.object.apply(p)).collect();
        // per-face downsampling keeps every centroid on its face
        object_parts.push(voxel_downsample(
            &PointCloud::uniform(world, Label::Object),
            config.object_voxel,
        )?);
    }
    let object = object_parts
        .iter()
        .fold(PointCloud::default(), |acc, part| acc.concat(part));
    let object = random_sample_with(&object, config.object_points, rng)?;

    let footprint = state.footprint();
    let top = state.top_z();
    let visible: Vec<Point3> = cache
        .background
        .iter()
        .filter(|p| !(p.z < top && point_in_polygon(&footprint, [p.x, p.y], 0.0)))
        .copied()
        .collect();
    let background = voxel_downsample(
        &PointCloud::uniform(visible, Label::Background),
        config.background_voxel,
    )?;
    let background = random_sample_with(&background, config.background_points, rng)?;

    let to_goal = goal.transform.compose(&state.object.inverse());
    let mut flow = goal_flow(&object, &to_goal);
    flow.extend(std::iter::repeat_n(Vector3::zeros(), background.len()));
    let num_object = object.len();
    let cloud = object.concat(&background).with_flow(flow)?;
    Ok(Observation { cloud, num_object })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Independent settled goal pose in either bin.
    DoubleBin,
    /// Goal keeps the initial orientation and resting face; only the
    /// position changes (either bin).
    TranslationOnly,
    /// Goal is the initial pose raised by the grasp lift height.
    GraspLift,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double-bin" => Ok(TaskKind::DoubleBin),
            "translation-only" => Ok(TaskKind::TranslationOnly),
            "grasp-lift" => Ok(TaskKind::GraspLift),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::DoubleBin => "double-bin",
            TaskKind::TranslationOnly => "translation-only",
            TaskKind::GraspLift => "grasp-lift",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: TaskKind,
    pub bins: BinGeometry,
    pub observation: ObservationConfig,
    pub primitives: PrimitiveConstants,
    pub max_episode_steps: usize,
    pub scale_range: (f64, f64),
    /// Library indices episodes draw from; empty means all.
    pub objects: Vec<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::DoubleBin,
            bins: BinGeometry::default(),
            observation: ObservationConfig::default(),
            primitives: PrimitiveConstants::default(),
            max_episode_steps: 10,
            scale_range: (0.8, 1.2),
            objects: Vec::new(),
        }
    }
}

/// Random settled pose: random orientation dropped over a random bin.
fn drop_object<R: Rng>(
    shape: &ObjectShape,
    bins: &BinGeometry,
    bin: usize,
    rng: &mut R,
) -> EnvState {
    let axis = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let tumble = if axis.norm() > 1e-6 {
        RigidTransform::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU))
    } else {
        RigidTransform::identity()
    };
    let (lo, hi) = bins.interior(bin);
    let x = rng.gen_range(lo.x..hi.x);
    let y = rng.gen_range(lo.y..hi.y);
    let mut object = tumble;
    object.translation = Vector3::new(x, y, bins.floor_z + bins.size.z + 0.15);
    let state = EnvState {
        shape: shape.clone(),
        object,
        face: usize::MAX,
        grasp: None,
        gripper: reset_gripper(bins),
    };
    settle_in(&state, bins, bin)
}

/// Goal cloud: model points at the goal pose.
fn goal_spec(shape: &ObjectShape, transform: RigidTransform) -> GoalSpec {
    let model = model_points(shape);
    let cloud = PointCloud::uniform(
        model.iter().map(|p| transform.apply(p)).collect(),
        Label::Object,
    );
    GoalSpec {
        transform,
        cloud,
        model_points: model,
    }
}

/// One episode start: sampled object and scale, settled initial pose, goal
/// and the first observation. Deterministic in `seed`.
pub fn reset(
    config: &EnvConfig,
    library: &ObjectLibrary,
    seed: u64,
) -> Result<(EnvState, GoalSpec, Observation, SurfaceCache)> {
    if library.is_empty() {
        return Err(Error::InvalidArgument("object library is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = if config.objects.is_empty() {
        (0..library.len()).collect()
    } else {
        config.objects.clone()
    };
    let pick = pool[rng.gen_range(0..pool.len())];
    let (lo, hi) = config.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let shape = library.entries[pick].shape.scaled(scale);

    let start_bin = rng.gen_range(0..2);
    let state = drop_object(&shape, &config.bins, start_bin, &mut rng);
    let goal_transform = match config.task {
        TaskKind::DoubleBin => {
            let bin = rng.gen_range(0..2);
            drop_object(&shape, &config.bins, bin, &mut rng).object
        }
        TaskKind::TranslationOnly => {
            let bin = rng.gen_range(0..2);
            let (lo, hi) = config.bins.interior(bin);
            let mut moved = state.clone();
            moved.object.translation.x = rng.gen_range(lo.x..hi.x);
            moved.object.translation.y = rng.gen_range(lo.y..hi.y);
            settle_in(&moved, &config.bins, bin).object
        }
        TaskKind::GraspLift => {
            let mut t = state.object;
            t.translation.z += config.primitives.lift_height;
            t
        }
    };
    let goal = goal_spec(&shape, goal_transform);
    let cache = SurfaceCache::new(&shape, &config.bins, &config.observation, &mut rng);
    let mut render_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let obs = render_observation(&state, &goal, &cache, &config.observation, &mut render_rng)?;
    Ok((state, goal, obs, cache))
}

/// One row of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub primitive: PrimitiveType,
    pub location: [f64; 3],
    pub location_index: Option<usize>,
    pub params: Vec<f64>,
    pub reward: f64,
    pub success: bool,
    pub grasped: bool,
    /// Named waypoints of the low-level motion.
    pub waypoints: Vec<primitives::Waypoint>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub success: bool,
    /// Success or step limit reached.
    pub done: bool,
    pub grasped: bool,
    pub record: TraceRecord,
}

/// Episode runner around the pure state functions.
pub struct Env {
    pub config: EnvConfig,
    library: Arc<ObjectLibrary>,
    state: EnvState,
    goal: GoalSpec,
    cache: SurfaceCache,
    obs: Observation,
    seed: u64,
    steps: usize,
}

impl Env {
    pub fn new(config: EnvConfig, library: Arc<ObjectLibrary>, seed: u64) -> Result<Self> {
        config.bins.validate()?;
        let (state, goal, obs, cache) = reset(&config, &library, seed)?;
        Ok(Self {
            config,
            library,
            state,
            goal,
            cache,
            obs,
            seed,
            steps: 0,
        })
    }

    pub fn reset(&mut self, seed: u64) -> Result<&Observation> {
        let (state, goal, obs, cache) = reset(&self.config, &self.library, seed)?;
        self.state = state;
        self.goal = goal;
        self.obs = obs;
        self.cache = cache;
        self.seed = seed;
        self.steps = 0;
        Ok(&self.obs)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grasped(&self) -> bool {
        is_grasped(&self.state, &self.config.bins)
    }

    pub fn reward(&self) -> f64 {
        compute_reward(&self.state, &self.goal)
    }

    /// Restores a mid-episode position: episode `seed`, `steps` taken and
    /// the state reached.
    pub fn restore(&mut self, seed: u64, steps: usize, state: EnvState) -> Result<()> {
        self.reset(seed)?;
        self.steps = steps;
        self.set_state(state)
    }

    pub fn episode_seed(&self) -> u64 {
        self.seed
    }

    /// Overrides the simulator state (tests, replays) and re-renders.
    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        self.state = state;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.steps as u64));
        self.obs = render_observation(
            &self.state,
            &self.goal,
            &self.cache,
            &self.config.observation,
            &mut rng,
        )?;
        Ok(())
    }

    /// Executes one primitive: one environment interaction step.
    pub fn step(&mut self, action: &PrimitiveAction) -> Result<StepOutcome> {
        let (next, waypoints) = primitives::execute(
            &self.state,
            action,
            &self.obs,
            &self.config.primitives,
            &self.config.bins,
        )?;
        self.state = next;
        self.steps += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.steps as u64));
        self.obs = render_observation(
            &self.state,
            &self.goal,
            &self.cache,
            &self.config.observation,
            &mut rng,
        )?;
        let reward = self.reward();
        let success = is_success(reward);
        let grasped = self.grasped();
        let record = TraceRecord {
            step: self.steps,
            primitive: action.primitive,
            location: [action.location.x, action.location.y, action.location.z],
            location_index: action.location_index,
            params: action.params.clone(),
            reward,
            success,
            grasped,
            waypoints,
        };
        Ok(StepOutcome {
            reward,
            success,
            done: success || self.steps >= self.config.max_episode_steps,
            grasped,
            record,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resting_box(bins: &BinGeometry) -> EnvState {
        let shape = ObjectShape::cuboid("box", 0.10, 0.06, 0.04);
        EnvState {
            object: resting_pose(&shape, 0, -0.275, 0.0, 0.3, bins.floor_z),
            shape,
            face: 0,
            grasp: None,
            gripper: reset_gripper(bins),
        }
    }

    #[test]
    fn face_rotations_point_faces_down() {
        let shape = ObjectShape::cuboid("b", 0.1, 0.06, 0.04);
        for (f, face) in shape.faces().iter().enumerate() {
            let n = shape.face_rotation(f) * face.normal;
            assert!((n + Vector3::z()).norm() < 1e-12, "face {f}: {n:?}");
        }
    }

    #[test]
    fn settle_is_a_fixed_point_for_resting_objects() {
        let bins = BinGeometry::default();
        let s = resting_box(&bins);
        assert_eq!(settle(&s, &bins), s);
        let twice = settle(&settle(&s, &bins), &bins);
        assert_eq!(twice, settle(&s, &bins));
    }

    #[test]
    fn release_drops_to_floor() {
        let bins = BinGeometry::default();
        let mut s = resting_box(&bins);
        s.object.translation.z += 0.1;
        let settled = settle(&s, &bins);
        assert!((settled.bottom_z() - bins.floor_z).abs() < 1e-12);
    }

    #[test]
    fn wall_overlap_is_pushed_inside() {
        let bins = BinGeometry::default();
        let mut s = resting_box(&bins);
        s.object.translation.x = -0.275 + 0.19;
        let settled = settle(&s, &bins);
        let (lo, hi) = bins.interior(0);
        for p in settled.footprint() {
            assert!(p[0] >= lo.x - 1e-12 && p[0] <= hi.x + 1e-12);
            assert!(p[1] >= lo.y - 1e-12 && p[1] <= hi.y + 1e-12);
        }
    }

    #[test]
    fn tumbled_object_lands_on_a_stable_face() {
        let bins = BinGeometry::default();
        let mut s = resting_box(&bins);
        s.object = RigidTransform::from_axis_angle(&Vector3::new(1.0, 0.3, 0.2), 1.1);
        s.object.translation = Vector3::new(0.3, 0.05, 0.3);
        s.face = usize::MAX;
        let settled = settle(&s, &bins);
        assert!(settled.shape.is_stable_face(settled.face));
        let n = settled.object.rotation * settled.shape.faces()[settled.face].normal;
        assert!((n.z + 1.0).abs() < 1e-9);
        assert!(settled.object.is_valid(1e-9));
    }

    #[test]
    fn chord_through_box_center() {
        let rect = vec![[-0.05, -0.03], [0.05, -0.03], [0.05, 0.03], [-0.05, 0.03]];
        assert!((polygon_chord(&rect, [0.0, 0.0], [0.0, 1.0]) - 0.06).abs() < 1e-12);
        assert!((polygon_chord(&rect, [0.0, 0.0], [1.0, 0.0]) - 0.10).abs() < 1e-12);
        assert_eq!(polygon_chord(&rect, [0.2, 0.0], [0.0, 1.0]), 0.0);
    }

    #[test]
    fn success_threshold_is_strict() {
        assert!(is_success(-0.029));
        assert!(!is_success(-0.03));
        assert!(is_success(0.0));
    }

    #[test]
    fn grasp_flags() {
        let bins = BinGeometry::default();
        let mut s = resting_box(&bins);
        assert!(!is_grasped(&s, &bins));
        s.grasp = Some(Grasp {
            gripper_from_object: RigidTransform::identity(),
            contacts: true,
        });
        assert!(is_grasped(&s, &bins));
        // height condition alone
        let mut lifted = resting_box(&bins);
        lifted.object.translation.z += 2.0 * lifted.shape.max_dimension() + 0.01;
        assert!(is_grasped(&lifted, &bins));
    }

    #[test]
    fn library_text_roundtrip() {
        let lib = ObjectLibrary::procedural(4, 2, 2, 9);
        assert_eq!(lib.len(), 8);
        for e in &lib.entries {
            assert!(e.shape.is_convex());
            assert!((e.shape.max_dimension() - 0.10).abs() < 1e-9);
        }
        let back = ObjectLibrary::from_text(&lib.to_text()).unwrap();
        assert_eq!(back.len(), lib.len());
        for (a, b) in back.entries.iter().zip(&lib.entries) {
            assert_eq!(a.split, b.split);
            assert_eq!(a.shape, b.shape);
        }
    }

    #[test]
    fn bin_overlap_rejected() {
        let bins = BinGeometry {
            center_distance: 0.135,
            ..BinGeometry::default()
        };
        assert!(bins.validate().is_err());
    }
}
