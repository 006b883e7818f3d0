//! Rigid registration without known correspondences: FPFH descriptors,
//! RANSAC over feature matches, then point-to-plane ICP. Only geometry is
//! matched; point colors are never consulted.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::ObjectShape;
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, Label, NeighborIndex, Point3, PointCloud, RigidTransform};

pub const FPFH_BINS: usize = 33;
const SUB_BINS: usize = 11;

pub type Fpfh = [f64; FPFH_BINS];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Fraction of source points with a target point within the threshold.
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub normal_neighbors: usize,
    pub feature_radius: f64,
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    /// Sampled triples whose pairwise edge lengths disagree by more than
    /// this ratio are skipped before fitting.
    pub edge_similarity: f64,
    /// Distinct RANSAC hypotheses refined by ICP.
    pub hypotheses: usize,
    pub icp_max_iterations: usize,
    pub icp_max_distance: f64,
    pub icp_tolerance: f64,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            normal_neighbors: 10,
            feature_radius: 0.025,
            max_iterations: 4000,
            inlier_threshold: 0.015,
            edge_similarity: 0.9,
            hypotheses: 4,
            icp_max_iterations: 50,
            icp_max_distance: 0.02,
            icp_tolerance: 1e-6,
            seed: 0,
        }
    }
}

/// Darboux-frame angles (alpha, phi, theta) of an oriented point pair.
fn pair_features(
    p1: &Point3,
    n1: &Vector3<f64>,
    p2: &Point3,
    n2: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let mut dp = p2 - p1;
    let d = dp.norm();
    if d == 0.0 {
        return None;
    }
    dp /= d;
    // the source is the point whose normal makes the smaller angle with the
    // line; near-ties keep argument order so the choice survives rounding
    let (ns, nt, dp) = if n1.dot(&dp).abs() >= n2.dot(&dp).abs() - 1e-12 {
        (n1, n2, dp)
    } else {
        (n2, n1, -dp)
    };
    let u = *ns;
    let v = u.cross(&dp);
    let vn = v.norm();
    if vn < 1e-12 {
        return None;
    }
    let v = v / vn;
    let w = u.cross(&v);
    let alpha = v.dot(nt);
    let phi = u.dot(&dp);
    let theta = w.dot(nt).atan2(u.dot(nt));
    Some((alpha, phi, theta))
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let t = ((value - lo) / (hi - lo) * SUB_BINS as f64).floor();
    (t.max(0.0) as usize).min(SUB_BINS - 1)
}

fn normalize_sub_histograms(h: &mut Fpfh) {
    for s in 0..3 {
        let part = &mut h[s * SUB_BINS..(s + 1) * SUB_BINS];
        let sum: f64 = part.iter().sum();
        if sum > 0.0 {
            part.iter_mut().for_each(|v| *v *= 100.0 / sum);
        }
    }
}

/// Fast point feature histograms over `radius` neighborhoods. Points
/// without neighbors get an all-zero histogram.
pub fn compute_fpfh(points: &[Point3], normals: &[Vector3<f64>], radius: f64) -> Result<Vec<Fpfh>> {
    if points.len() != normals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points, {} normals",
            points.len(),
            normals.len()
        )));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidArgument(
            "feature radius must be positive".into(),
        ));
    }
    let index = NeighborIndex::new(points);
    let neighbors: Vec<Vec<usize>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .within_radius(p, radius)
                .into_iter()
                .filter(|&j| j != i)
                .collect()
        })
        .collect();
    let pi = std::f64::consts::PI;
    let spfh: Vec<Fpfh> = (0..points.len())
        .map(|i| {
            let mut h = [0.0; FPFH_BINS];
            for &j in &neighbors[i] {
                if let Some((a, f, t)) =
                    pair_features(&points[i], &normals[i], &points[j], &normals[j])
                {
                    h[bin(a, -1.0, 1.0)] += 1.0;
                    h[SUB_BINS + bin(f, -1.0, 1.0)] += 1.0;
                    h[2 * SUB_BINS + bin(t, -pi, pi)] += 1.0;
                }
            }
            normalize_sub_histograms(&mut h);
            h
        })
        .collect();
    Ok((0..points.len())
        .map(|i| {
            let mut h = spfh[i];
            let k = neighbors[i].len();
            if k == 0 {
                return h;
            }
            for &j in &neighbors[i] {
                let w = 1.0 / ((points[j] - points[i]).norm().max(1e-12) * k as f64);
                for (hb, s) in h.iter_mut().zip(&spfh[j]) {
                    *hb += w * s;
                }
            }
            normalize_sub_histograms(&mut h);
            h
        })
        .collect())
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Degenerate);
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Point3>() / n;
    let cd = dst.iter().sum::<Point3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (
        svd.u.ok_or(Error::Degenerate)?,
        svd.v_t.ok_or(Error::Degenerate)?,
    );
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs))
}

/// Closest-feature match in `dst` for every source feature.
fn feature_matches(src: &[Fpfh], dst: &[Fpfh]) -> Vec<usize> {
    src.iter()
        .map(|f| {
            let mut best = (0, f64::INFINITY);
            for (j, g) in dst.iter().enumerate() {
                let d: f64 = f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Fitness and inlier RMSE of `t` with nearest-neighbor correspondences.
pub fn evaluate_alignment(
    src: &[Point3],
    dst_index: &NeighborIndex,
    t: &RigidTransform,
    threshold: f64,
) -> (f64, f64) {
    if src.is_empty() {
        return (0.0, 0.0);
    }
    let (mut count, mut sq) = (0usize, 0.0);
    for p in src {
        if let Some((_, d)) = dst_index.nearest(&t.apply(p)) {
            if d <= threshold {
                count += 1;
                sq += d * d;
            }
        }
    }
    let rmse = if count > 0 {
        (sq / count as f64).sqrt()
    } else {
        0.0
    };
    (count as f64 / src.len() as f64, rmse)
}

/// RANSAC over feature correspondences: each hypothesis comes from three
/// matches and the best one is refit on the matches it explains.
pub fn ransac_global(
    src: &[Point3],
    dst: &[Point3],
    src_features: &[Fpfh],
    dst_features: &[Fpfh],
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    let best = ransac_hypotheses(src, dst, src_features, dst_features, params, 1)?;
    let transform = best.first().copied().unwrap_or_default();
    let index = NeighborIndex::new(dst);
    let (fitness, inlier_rmse) =
        evaluate_alignment(src, &index, &transform, params.inlier_threshold);
    Ok(RegistrationResult {
        transform,
        fitness,
        inlier_rmse,
        converged: fitness > 0.0,
    })
}

/// Up to `keep` refit RANSAC hypotheses, best first, whose rotations differ
/// pairwise by more than 20 degrees. Near-symmetric shapes often put a
/// flipped pose close behind the true one.
pub fn ransac_hypotheses(
    src: &[Point3],
    dst: &[Point3],
    src_features: &[Fpfh],
    dst_features: &[Fpfh],
    params: &RegistrationParams,
    keep: usize,
) -> Result<Vec<RigidTransform>> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::Degenerate);
    }
    if src_features.len() != src.len() || dst_features.len() != dst.len() {
        return Err(Error::ShapeMismatch(
            "one feature per point required".into(),
        ));
    }
    let matches = feature_matches(src_features, dst_features);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let thr2 = params.inlier_threshold * params.inlier_threshold;
    let count_inliers = |t: &RigidTransform| {
        src.iter()
            .zip(&matches)
            .filter(|(p, &j)| (t.apply(p) - dst[j]).norm_squared() <= thr2)
            .count()
    };
    // hypotheses are ranked by truncated distance from a fixed source
    // subsample to the target; inlier counts at the threshold cannot tell
    // a flipped pose from the true one
    let dst_index = NeighborIndex::new(dst);
    let probe: Vec<Point3> = index::sample(&mut rng, src.len(), src.len().min(100))
        .iter()
        .map(|i| src[i])
        .collect();
    let cap = params.inlier_threshold;
    let geometric = |t: &RigidTransform| -> f64 {
        probe
            .iter()
            .map(|p| {
                dst_index
                    .nearest(&t.apply(p))
                    .map_or(cap, |(_, d)| d.min(cap))
            })
            .sum()
    };
    let distinct = 20f64.to_radians();
    let mut top: Vec<(f64, RigidTransform)> = Vec::new();
    let mut min_count = 3;
    for _ in 0..params.max_iterations {
        let pick = index::sample(&mut rng, src.len(), 3);
        let s: Vec<Point3> = pick.iter().map(|i| src[i]).collect();
        let d: Vec<Point3> = pick.iter().map(|i| dst[matches[i]]).collect();
        let similar = (0..3).all(|a| {
            let b = (a + 1) % 3;
            let (ls, ld) = ((s[a] - s[b]).norm(), (d[a] - d[b]).norm());
            ls.min(ld) >= params.edge_similarity * ls.max(ld) && ls > 0.0
        });
        if !similar {
            continue;
        }
        let Ok(t) = fit_rigid(&s, &d) else { continue };
        // cheap prefilter on the feature matches before the geometric score
        let n = count_inliers(&t);
        if n < min_count {
            continue;
        }
        min_count = min_count.max(n / 4);
        let e = geometric(&t);
        if let Some(k) = top
            .iter()
            .position(|(_, u)| u.rotation_angle_to(&t) < distinct)
        {
            if e < top[k].0 {
                top[k] = (e, t);
            }
        } else {
            top.push((e, t));
        }
        top.sort_by(|a, b| a.0.total_cmp(&b.0));
        top.truncate(keep.max(1));
    }
    Ok(top
        .into_iter()
        .map(|(_, mut transform)| {
            for _ in 0..3 {
                let (s, d): (Vec<Point3>, Vec<Point3>) = src
                    .iter()
                    .zip(&matches)
                    .filter(|(p, &j)| (transform.apply(p) - dst[j]).norm_squared() <= thr2)
                    .map(|(p, &j)| (*p, dst[j]))
                    .unzip();
                match fit_rigid(&s, &d) {
                    Ok(t) if count_inliers(&t) >= s.len() => transform = t,
                    _ => break,
                }
            }
            transform
        })
        .collect())
}

/// ICP refinement result with the objective after every accepted step.
#[derive(Clone, Debug, PartialEq)]
pub struct IcpOutcome {
    pub result: RegistrationResult,
    /// Objective at the initial transform followed by each iteration.
    pub errors: Vec<f64>,
}

/// Mean truncated point-to-plane residual; depends on the transform only,
/// so successive values are comparable.
fn plane_error(
    src: &[Point3],
    dst: &[Point3],
    normals: &[Vector3<f64>],
    index: &NeighborIndex,
    t: &RigidTransform,
    cap: f64,
) -> f64 {
    let cap2 = cap * cap;
    src.iter()
        .map(|p| {
            let q = t.apply(p);
            match index.nearest(&q) {
                Some((j, d)) if d <= cap => ((q - dst[j]).dot(&normals[j])).powi(2),
                _ => cap2,
            }
        })
        .sum::<f64>()
        / src.len().max(1) as f64
}

fn small_rotation(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// Point-to-plane ICP. Each Gauss-Newton step is halved until the
/// objective does not increase, so the error log is non-increasing.
pub fn icp_point_to_plane(
    src: &[Point3],
    dst: &[Point3],
    dst_normals: &[Vector3<f64>],
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<IcpOutcome> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::Degenerate);
    }
    if dst_normals.len() != dst.len() {
        return Err(Error::ShapeMismatch(
            "one normal per target point required".into(),
        ));
    }
    let index = NeighborIndex::new(dst);
    let cap = params.icp_max_distance;
    let mut t = *init;
    let mut err = plane_error(src, dst, dst_normals, &index, &t, cap);
    let mut errors = vec![err];
    let mut converged = false;
    for _ in 0..params.icp_max_iterations {
        if err <= 1e-20 {
            converged = true;
            break;
        }
        let mut ata = Matrix6::zeros();
        let mut atb = Vector6::zeros();
        for p in src {
            let q = t.apply(p);
            let Some((j, d)) = index.nearest(&q) else {
                continue;
            };
            if d > cap {
                continue;
            }
            let n = dst_normals[j];
            let c = q.cross(&n);
            let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            let r = (q - dst[j]).dot(&n);
            ata += row * row.transpose();
            atb -= row * r;
        }
        let Some(x) = ata.cholesky().map(|c| c.solve(&atb)) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let w = Vector3::new(x[0], x[1], x[2]) * scale;
            let v = Vector3::new(x[3], x[4], x[5]) * scale;
            let step = RigidTransform::new(small_rotation(&w), v);
            let cand = step.compose(&t);
            let e = plane_error(src, dst, dst_normals, &index, &cand, cap);
            if e <= err {
                accepted = Some((cand, e));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            converged = true;
            break;
        };
        let rel = (err - e) / err.max(1e-300);
        t = cand;
        err = e;
        errors.push(err);
        if rel < params.icp_tolerance {
            converged = true;
            break;
        }
    }
    let (fitness, inlier_rmse) = evaluate_alignment(src, &index, &t, params.inlier_threshold);
    Ok(IcpOutcome {
        result: RegistrationResult {
            transform: t,
            fitness,
            inlier_rmse,
            converged,
        },
        errors,
    })
}

/// Full pipeline: normals, features, RANSAC, then ICP from each kept
/// hypothesis; the lowest final ICP objective wins.
pub fn register(src: &[Point3], dst: &[Point3], params: &RegistrationParams) -> Result<IcpOutcome> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::Degenerate);
    }
    let k = params.normal_neighbors;
    let sn = estimate_normals(&PointCloud::uniform(src.to_vec(), Label::Object), k)?;
    let dn = estimate_normals(&PointCloud::uniform(dst.to_vec(), Label::Object), k)?;
    let sf = compute_fpfh(src, &sn, params.feature_radius)?;
    let df = compute_fpfh(dst, &dn, params.feature_radius)?;
    let mut inits = ransac_hypotheses(src, dst, &sf, &df, params, params.hypotheses)?;
    if inits.is_empty() {
        inits.push(RigidTransform::identity());
    }
    // point-to-plane error forgives sliding along faces, so hypotheses are
    // ranked by truncated point-to-point distance instead
    let index = NeighborIndex::new(dst);
    let cap = params.icp_max_distance;
    let score = |t: &RigidTransform| -> f64 {
        src.iter()
            .map(|p| index.nearest(&t.apply(p)).map_or(cap, |(_, d)| d.min(cap)))
            .sum()
    };
    let mut best: Option<(f64, IcpOutcome)> = None;
    for init in inits {
        let out = icp_point_to_plane(src, dst, &dn, &init, params)?;
        let e = score(&out.result.transform);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, out));
        }
    }
    best.map(|(_, out)| out).ok_or(Error::Degenerate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalFlowEstimate {
    pub flow: Vec<Vector3<f64>>,
    pub result: RegistrationResult,
    /// Set when fewer than 30% of points found a partner.
    pub low_fitness: bool,
}

/// Registers the observed object points onto the goal object points and
/// returns `T(x) - x` per observed point.
pub fn estimate_goal_flow(
    obs_obj: &PointCloud,
    goal_obj: &PointCloud,
    params: &RegistrationParams,
) -> Result<GoalFlowEstimate> {
    let out = register(&obs_obj.points, &goal_obj.points, params)?;
    let t = out.result.transform;
    Ok(GoalFlowEstimate {
        flow: obs_obj.points.iter().map(|p| t.apply(p) - p).collect(),
        result: out.result,
        low_fitness: out.result.fitness < 0.3,
    })
}

/// Asymmetric prism used by the synthetic study.
pub fn benchmark_shape() -> ObjectShape {
    ObjectShape::from_outline(
        "bench",
        &[[0.0, 0.0], [0.15, 0.0], [0.11, 0.05], [0.02, 0.08]],
        0.05,
        0.16,
    )
    .expect("valid benchmark outline")
}

/// Surface samples of the benchmark prism with an off-center block on its
/// top face. A bare prism is mirror symmetric through its mid-plane, which
/// local descriptors cannot tell apart.
pub fn benchmark_cloud<R: Rng>(density: f64, rng: &mut R) -> Vec<Point3> {
    let base = benchmark_shape();
    let faces = base.sample_faces(density, rng);
    let top_z = faces[1].first().map_or(0.0, |p| p.z);
    let (cx, cy, hx, hy, hz) = (0.02, 0.0, 0.025, 0.02, 0.02);
    let under = |p: &Point3| (p.x - cx).abs() <= hx && (p.y - cy).abs() <= hy;
    let mut out: Vec<Point3> = faces
        .into_iter()
        .enumerate()
        .flat_map(|(k, f)| f.into_iter().filter(move |p| k != 1 || !under(p)))
        .collect();
    let block = ObjectShape::cuboid("block", 2.0 * hx, 2.0 * hy, 2.0 * hz);
    let block_faces = block.sample_faces(density, rng);
    let bottom = block_faces[0].first().map_or(0.0, |p| p.z);
    out.extend(
        block_faces
            .into_iter()
            .skip(1)
            .flatten()
            .map(|p| Point3::new(p.x + cx, p.y + cy, p.z - bottom + top_z)),
    );
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub truth: RigidTransform,
    pub recovered: RigidTransform,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub fitness: f64,
    /// Whether the ICP error log never increased.
    pub monotone: bool,
    /// Mean error of the estimated per-point flow.
    pub flow_error: f64,
}

/// Random transform with uniform yaw, at most 10 degrees of tilt and up to
/// 0.2 m of translation.
pub fn yaw_dominant_transform<R: Rng>(rng: &mut R) -> RigidTransform {
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let tilt_axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
    let tilt = rng.gen_range(0.0..10f64.to_radians());
    let r = Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(tilt_axis + Vector3::new(1e-9, 0.0, 0.0)),
        tilt,
    ) * Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let t = Vector3::new(
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.05..0.05),
    );
    RigidTransform::new(r.into_inner(), t)
}

/// One synthetic trial: `points` surface samples, a random transform and
/// Gaussian noise of `noise` meters on the target.
pub fn run_trial(
    trial: usize,
    seed: u64,
    points: usize,
    noise: f64,
    params: &RegistrationParams,
) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::env::mix_seed(seed, trial as u64));
    let dense = benchmark_cloud(40_000.0, &mut rng);
    if dense.len() < points {
        return Err(Error::InvalidArgument(
            "benchmark shape too small for requested points".into(),
        ));
    }
    let src: Vec<Point3> = index::sample(&mut rng, dense.len(), points)
        .iter()
        .map(|i| dense[i])
        .collect();
    let truth = yaw_dominant_transform(&mut rng);
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dst: Vec<Point3> = src
        .iter()
        .map(|p| {
            truth.apply(p)
                + Vector3::new(
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                )
        })
        .collect();
    let params = RegistrationParams {
        seed: rng.gen(),
        ..params.clone()
    };
    let out = register(&src, &dst, &params)?;
    let rec = out.result.transform;
    let flow_error = src
        .iter()
        .map(|p| (rec.apply(p) - truth.apply(p)).norm())
        .sum::<f64>()
        / src.len() as f64;
    Ok(TrialResult {
        trial,
        truth,
        recovered: rec,
        rotation_error_deg: rec.rotation_angle_to(&truth).to_degrees(),
        translation_error: rec.translation_distance_to(&truth),
        fitness: out.result.fitness,
        monotone: out.errors.windows(2).all(|w| w[1] <= w[0]),
        flow_error,
    })
}

fn transform_fields(t: &RigidTransform) -> String {
    let r = Rotation3::from_matrix_unchecked(t.rotation);
    let (roll, pitch, yaw) = r.euler_angles();
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        t.translation.x, t.translation.y, t.translation.z, roll, pitch, yaw
    )
}

pub fn benchmark_csv(results: &[TrialResult]) -> String {
    let mut out = String::from(
        "trial,true_tx,true_ty,true_tz,true_roll,true_pitch,true_yaw,rec_tx,rec_ty,rec_tz,rec_roll,rec_pitch,rec_yaw,rotation_error_deg,translation_error_m,fitness\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.4}\n",
            r.trial,
            transform_fields(&r.truth),
            transform_fields(&r.recovered),
            r.rotation_error_deg,
            r.translation_error,
            r.fitness
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_rigid_recovers_exact_transform() {
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.0, 0.2, 0.0),
            Point3::new(0.0, 0.0, 0.3),
        ];
        let t = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0).normalize(), 0.7)
            .compose(&RigidTransform::from_translation(Vector3::new(
                0.1, -0.2, 0.3,
            )));
        let dst: Vec<Point3> = src.iter().map(|p| t.apply(p)).collect();
        let fit = fit_rigid(&src, &dst).unwrap();
        assert!(fit.rotation_angle_to(&t) < 1e-12);
        assert!(fit.translation_distance_to(&t) < 1e-12);
    }

    #[test]
    fn isolated_point_has_zero_histogram() {
        let f = compute_fpfh(&[Point3::zeros()], &[Vector3::z()], 0.1).unwrap();
        assert!(f[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Point3::zeros(), Point3::x()];
        let f = vec![[0.0; FPFH_BINS]; 2];
        assert!(matches!(
            ransac_global(&p, &p, &f, &f, &RegistrationParams::default()),
            Err(Error::Degenerate)
        ));
    }
}
