//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,6` restricts the run to a subset; the learning
//! criteria (7, 8, 9) take about an hour on one core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use nalgebra::Vector3;
use primap::agent::{select_eval, select_explore, CriticMap, K};
use primap::env::*;
use primap::geometry::{Label, PointCloud, RigidTransform};
use primap::harness::{evaluate, Method, Trainer};
use primap::primitives::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "autodiff vs central differences", c1_autodiff),
        (2, "softmax exploration frequencies", c2_sampling),
        (3, "greedy selection vs brute force", c3_selection),
        (4, "reward exactness and success threshold", c4_reward),
        (
            5,
            "primitive constants and area-of-interest corners",
            c5_primitives,
        ),
        (6, "registration study", c6_registration),
        (10, "determinism and resume", c10_determinism),
        (7, "grasp-lift learning", c7_lift),
        (
            8,
            "translation-only learning separation (with 9: length monotonicity)",
            c8_separation,
        ),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let wanted = only
            .as_ref()
            .is_none_or(|o| o.contains(&id) || (id == 8 && o.contains(&9)));
        if !wanted {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => (
                false,
                format!(
                    "panicked: {}",
                    e.downcast_ref::<String>().cloned().unwrap_or_default()
                ),
            ),
        };
        // criterion 8 prints its own line for 9
        if id == 8 && !detail.contains("#9 ") {
            failed += 1;
            println!("criterion  9 FAIL [length monotonicity] no trained policies");
        }
        for line in detail.lines() {
            let (id, ok, text) = match line.strip_prefix("#9 ") {
                Some(rest) => {
                    let pass = rest.starts_with("ok");
                    (
                        9,
                        pass,
                        rest.trim_start_matches("ok ")
                            .trim_start_matches("bad ")
                            .to_string(),
                    )
                }
                None => (id, ok, line.to_string()),
            };
            if !ok {
                failed += 1;
            }
            println!(
                "criterion {id:>2} {} [{name}] {text} ({:.1}s)",
                if ok { "PASS" } else { "FAIL" },
                t0.elapsed().as_secs_f64()
            );
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn within(t0: Instant, limit: Duration) -> bool {
    t0.elapsed() < limit
}

fn c1_autodiff() -> Outcome {
    let t0 = Instant::now();
    let mut s = GradcheckStats::default();
    for net in 0..50 {
        gradcheck(net, 1e-5, &mut s);
    }
    let ok = s.worst < 1e-4 && s.skipped * 100 < s.checked && within(t0, Duration::from_secs(60));
    (
        ok,
        format!(
            "50 nets, {} coords, {} kink skips, worst rel err {:.2e} (< 1e-4)",
            s.checked, s.skipped, s.worst
        ),
    )
}

fn hand_map(n: usize, seed: u64) -> CriticMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: Vec<f64> = (0..n * K).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let valid: Vec<bool> = (0..n * K).map(|j| j % 3 != 1).collect();
    CriticMap { n, q, valid }
}

fn c2_sampling() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut masked_hits = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, (beta, eps)) in [(0.1, 0.0), (0.25, 0.0), (0.1, 0.1)]
        .into_iter()
        .enumerate()
    {
        let map = hand_map(4 + m, m as u64);
        let valid: Vec<usize> = (0..map.q.len()).filter(|&j| map.valid[j]).collect();
        let z: f64 = valid.iter().map(|&j| (map.q[j] / beta).exp()).sum();
        let p: Vec<f64> = (0..map.q.len())
            .map(|j| {
                if map.valid[j] {
                    (1.0 - eps) * (map.q[j] / beta).exp() / z + eps / valid.len() as f64
                } else {
                    0.0
                }
            })
            .collect();
        let draws = 100_000;
        let mut counts = vec![0usize; p.len()];
        for _ in 0..draws {
            let (i, k) = select_explore(&map, beta, eps, &mut rng).unwrap();
            counts[i * K + k] += 1;
        }
        masked_hits += (0..p.len())
            .filter(|&j| !map.valid[j])
            .map(|j| counts[j])
            .sum::<usize>();
        let tv = counts
            .iter()
            .zip(&p)
            .map(|(c, q)| (*c as f64 / draws as f64 - q).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    let ok = worst < 0.01 && masked_hits == 0 && within(t0, Duration::from_secs(60));
    (
        ok,
        format!("3 maps x 1e5 draws, worst TV {worst:.4} (< 0.01), masked picks {masked_hits}"),
    )
}

fn c3_selection() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    let mut ties = 0;
    for t in 0..1000 {
        let n = 1 + t % 12;
        let q: Vec<f64> = (0..n * K)
            .map(|_| {
                if t % 2 == 0 {
                    rng.gen_range(0..3) as f64
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let mut valid: Vec<bool> = (0..n * K).map(|_| rng.gen_bool(0.6)).collect();
        valid[rng.gen_range(0..n * K)] = true;
        let map = CriticMap { n, q, valid };
        // scan primitive-major over points, keep the first maximum in (i, k) order
        let mut best: Option<(usize, usize)> = None;
        let mut count_max = 0;
        let max = (0..n * K)
            .filter(|&j| map.valid[j])
            .map(|j| map.q[j])
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            for k in 0..K {
                if map.valid[i * K + k] && map.q[i * K + k] == max {
                    count_max += 1;
                    if best.is_none() {
                        best = Some((i, k));
                    }
                }
            }
        }
        ties += (count_max > 1) as usize;
        if select_eval(&map).ok() != best {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0 && ties > 100 && within(t0, Duration::from_secs(10));
    (
        ok,
        format!("1000 maps ({ties} with ties), {mismatches} mismatches"),
    )
}

fn box_state(x: f64, yaw: f64) -> EnvState {
    let bins = BinGeometry::default();
    let shape = ObjectShape::cuboid("box", 0.10, 0.06, 0.04);
    EnvState {
        object: resting_pose(&shape, 0, x, 0.0, yaw, bins.floor_z),
        shape,
        face: 0,
        grasp: None,
        gripper: reset_gripper(&bins),
    }
}

fn goal_at(shape: &ObjectShape, transform: RigidTransform) -> GoalSpec {
    let model = model_points(shape);
    GoalSpec {
        cloud: PointCloud::uniform(
            model.iter().map(|p| transform.apply(p)).collect(),
            Label::Object,
        ),
        transform,
        model_points: model,
    }
}

fn c4_reward() -> Outcome {
    let s = box_state(-0.275, 0.3);
    let goal = goal_at(&s.shape, s.object);
    let at_goal = compute_reward(&s, &goal);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = Vector3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.1..0.1),
        );
        let mut moved = s.clone();
        moved.object.translation += t;
        worst = worst.max((compute_reward(&moved, &goal) + t.norm()).abs());
    }
    let at = |d: f64| {
        let mut m = s.clone();
        m.object.translation.x += d;
        compute_reward(&m, &goal)
    };
    let r_edge = at(0.03);
    let strict = !is_success(-0.03)
        && is_success(-0.03 + 1e-12)
        && is_success(at(0.0299))
        && !is_success(at(0.0301));
    let ok = at_goal == 0.0 && worst < 1e-12 && strict;
    (
        ok,
        format!("reward at goal {at_goal}, worst |r + |t|| {worst:.1e} over 100 translations, r(3 cm) = {r_edge:.15}, strict threshold {strict}"),
    )
}

fn nearest(obs: &Observation, target: &Vector3<f64>, label: Label) -> usize {
    (0..obs.len())
        .filter(|&i| obs.label(i) == label)
        .min_by(|&a, &b| {
            (obs.point(a) - target)
                .norm()
                .total_cmp(&(obs.point(b) - target).norm())
        })
        .unwrap()
}

fn c5_primitives() -> Outcome {
    let bins = BinGeometry::default();
    let c = PrimitiveConstants::default();
    let s = box_state(-0.275, 0.0);
    let goal = goal_at(&s.shape, s.object);
    let config = ObservationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let cache = SurfaceCache::new(&s.shape, &bins, &config, &mut rng);
    let obs = render_observation(&s, &goal, &cache, &config, &mut rng).unwrap();

    // poke on the -x side face: pre-contact 4 cm out along the estimated normal
    let i = nearest(
        &obs,
        &(s.object.translation + Vector3::new(-0.05, 0.0, 0.0)),
        Label::Object,
    );
    let loc = obs.point(i);
    let normal = estimate_contact_normal(&obs, &loc, c.normal_neighbors);
    let poke = PrimitiveAction::at_point(PrimitiveType::Poke, &obs, i, &[1.0, 0.0, 0.0, 0.0, 1.0]);
    let (_, traj) = execute(&s, &poke, &obs, &c, &bins).unwrap();
    let pre = Vector3::from(
        traj.iter()
            .find(|w| w.name == "pre_contact")
            .unwrap()
            .position,
    );
    let pre_err = (pre - (loc + normal * 0.04)).norm();

    // grasp across the short axis lifts by 15 cm
    let top = nearest(
        &obs,
        &(s.object.translation + Vector3::new(0.0, 0.0, 0.02)),
        Label::Object,
    );
    let grasp = PrimitiveAction::at_point(PrimitiveType::Grasp, &obs, top, &[0.0, 1.0]);
    let (held, _) = execute(&s, &grasp, &obs, &c, &bins).unwrap();
    let lift_err = (held.bottom_z() - s.bottom_z() - 0.15).abs();

    // move-to with zero offsets targets the selected point
    let cache2 = SurfaceCache::new(&held.shape, &bins, &config, &mut rng);
    let obs2 = render_observation(&held, &goal, &cache2, &config, &mut rng).unwrap();
    let j = nearest(&obs2, &Vector3::new(0.3, 0.0, 0.3), Label::Background);
    let mv = PrimitiveAction::at_point(PrimitiveType::MoveTo, &obs2, j, &[0.0, 0.0, 0.0, 0.0, 1.0]);
    let (moved, _) = execute(&held, &mv, &obs2, &c, &bins).unwrap();
    let point = obs2.point(j);
    let move_err = (moved.gripper.position.xy() - point.xy()).norm();
    let move_ok = move_err < 1e-12
        && moved.gripper.position.z >= point.z - 1e-12
        && mv.translation().norm() == 0.0;

    // area-of-interest corners
    let object_box = Aabb {
        min: Vector3::new(0.1, -0.2, 0.0),
        max: Vector3::new(0.3, 0.1, 0.05),
    };
    let workspace = bins.workspace();
    let mut corner_err: f64 = 0.0;
    for m in 0..8 {
        let raw = Vector3::new(
            if m & 1 == 0 { -1.0 } else { 1.0 },
            if m & 2 == 0 { -1.0 } else { 1.0 },
            if m & 4 == 0 { -1.0 } else { 1.0 },
        );
        for (prim, area) in [
            (PrimitiveType::Poke, &object_box),
            (PrimitiveType::MoveTo, &workspace),
        ] {
            let p = map_regressed_location(&raw, prim, &object_box, &workspace);
            let expect = Vector3::from_fn(|a, _| {
                if raw[a] < 0.0 {
                    area.min[a]
                } else {
                    area.max[a]
                }
            });
            corner_err = corner_err.max((p - expect).norm());
        }
    }
    let ok = pre_err < 1e-12
        && lift_err < 1e-9
        && move_ok
        && corner_err == 0.0
        && c.pre_contact == 0.04
        && c.lift_height == 0.15;
    (
        ok,
        format!("pre-contact err {pre_err:.1e}, lift err {lift_err:.1e}, move-to xy err {move_err:.1e}, AoI corner err {corner_err:.1e}"),
    )
}

fn c6_registration() -> Outcome {
    let t0 = Instant::now();
    let (good, monotone) = registration_study(100, 0);
    let ok = good >= 95 && monotone == 100 && within(t0, Duration::from_secs(300));
    (
        ok,
        format!(
            "{good}/100 trials within 3 deg and 5 mm (need 95), {monotone}/100 monotone ICP logs"
        ),
    )
}

fn c10_determinism() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for method in Method::ALL {
        let config = tiny_run(method, 17);
        let mut a = Trainer::new(config.clone()).unwrap();
        let mut b = Trainer::new(config.clone()).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        let same = a.metrics_csv() == b.metrics_csv();
        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(config.clone()).unwrap();
        first.run_until(37).unwrap();
        first.save_checkpoint(dir.path()).unwrap();
        let mut resumed = Trainer::load_checkpoint(dir.path(), config).unwrap();
        resumed.run().unwrap();
        let resume = resumed.metrics_csv() == a.metrics_csv()
            && resumed.policy().save().tensors == a.policy().save().tensors;
        ok &= same && resume;
        details.push(format!("{method}: repeat {same}, resume {resume}"));
    }
    (ok, details.join("; "))
}

fn c7_lift() -> Outcome {
    let t0 = Instant::now();
    let mut best = Vec::new();
    let mut steps = Vec::new();
    for seed in 0..3 {
        let mut c = toy_config(Method::Ours, TaskKind::GraspLift, seed);
        c.total_steps = 50_000;
        let t = train(c, 10, 0.9);
        best.push(
            t.metrics()
                .iter()
                .map(|m| m.success_rate(10))
                .fold(0.0, f64::max),
        );
        steps.push(t.step_count());
    }
    let med = median(best.clone());
    let ok = med >= 0.9 && within(t0, Duration::from_secs(30 * 60));
    (
        ok,
        format!("median greedy success {med:.2} (need 0.90), per seed {best:?} at steps {steps:?}"),
    )
}

/// Best success at length 10 over the run and the mean of the last five
/// evaluations; also checks length monotonicity of the final policy.
fn separation_run(method: Method, seed: u64) -> (f64, f64, u64, bool, Vec<f64>) {
    let mut c = toy_config(method, TaskKind::TranslationOnly, seed);
    c.total_steps = 30_000;
    // ours may stop once clearly above target; baselines always get the full budget
    let stop = if method == Method::Ours { 0.9 } else { 2.0 };
    let t = train(c, 10, stop);
    let rates: Vec<f64> = t.metrics().iter().map(|m| m.success_rate(10)).collect();
    let best = rates.iter().copied().fold(0.0, f64::max);
    let tail = &rates[rates.len().saturating_sub(5)..];
    let last5 = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let by_len: Vec<f64> = [10, 20, 30]
        .iter()
        .map(|&l| {
            evaluate(t.policy(), t.eval_env_config(), t.library(), &[l], 20)
                .unwrap()
                .success_rate(l)
                .0
        })
        .collect();
    let mono = by_len.windows(2).all(|w| w[0] <= w[1]);
    (best, last5, t.step_count(), mono, by_len)
}

fn c8_separation() -> Outcome {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut medians = Vec::new();
    let mut mono_all = true;
    let mut mono_detail = Vec::new();
    for method in Method::ALL {
        let mut best = Vec::new();
        let mut last = Vec::new();
        for seed in 0..3 {
            let (b, l, steps, mono, by_len) = separation_run(method, seed);
            best.push(b);
            last.push(l);
            mono_all &= mono;
            mono_detail.push(format!("{method}/{seed} {by_len:?}"));
            let _ = steps;
        }
        let med = median(best.clone());
        lines.push(format!(
            "{method}: median best {med:.2} {best:?}, last-5 mean {last:?}"
        ));
        medians.push(med);
    }
    let ours = medians[0];
    let margin = medians[1..]
        .iter()
        .map(|b| ours - b)
        .fold(f64::INFINITY, f64::min);
    let ok = ours >= 0.6 && margin >= 0.15 && within(t0, Duration::from_secs(4 * 3600));
    let mut out = format!(
        "ours {ours:.2} (need 0.60), smallest margin over a baseline {margin:.2} (need 0.15); {}",
        lines.join("; ")
    );
    out.push_str(&format!(
        "\n#9 {} success at lengths 10 <= 20 <= 30 for all 12 trained policies: {}",
        if mono_all { "ok" } else { "bad" },
        mono_detail.join(", ")
    ));
    (ok, out)
}
