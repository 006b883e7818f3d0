mod common;

use primap::agent::{AgentConfig, Policy, Transition};
use primap::baselines::*;
use primap::env::{Aabb, Env};
use primap::harness::{Method, Trainer};
use primap::primitives::PrimitiveType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [BaselineKind; 3] = [
    BaselineKind::Pdqn,
    BaselineKind::Raps,
    BaselineKind::HacmanLogit,
];

/// Warmup-only trainer: its buffer holds random transitions.
fn filled(kind: BaselineKind) -> Trainer {
    let mut c = common::tiny_run(Method::Baseline(kind), 0);
    c.total_steps = 40;
    c.warmup_steps = 40;
    c.eval_interval = 40;
    let mut t = Trainer::new(c).unwrap();
    t.run().unwrap();
    t
}

fn fresh(kind: BaselineKind, t: &Trainer, seed: u64) -> Baseline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = AgentConfig {
        learning_rate: 3e-3,
        ..t.config.agent.clone()
    };
    Baseline::new(
        kind,
        config,
        t.config.network.clone(),
        t.eval_env_config().bins.workspace(),
        &mut rng,
    )
    .unwrap()
}

fn inside(b: &Aabb, p: &primap::geometry::Point3) -> bool {
    (0..3).all(|i| p[i] >= b.min[i] - 1e-12 && p[i] <= b.max[i] + 1e-12)
}

#[test]
fn actions_are_admissible_and_in_range() {
    for kind in KINDS {
        let t = filled(kind);
        let policy = fresh(kind, &t, 1);
        let workspace = t.eval_env_config().bins.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut env = Env::new(t.eval_env_config().clone(), t.library(), 3).unwrap();
        for step in 0..60 {
            let record = primap::agent::ObsRecord::new(env.observation(), env.grasped(), 5.0);
            let explore = step % 2 == 0;
            let (action, stored) = policy
                .act(env.observation(), &record, explore, &mut rng)
                .unwrap();
            assert_eq!(stored.continuous.len(), Baseline::action_dim(kind));
            assert!(stored.continuous.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(
                action.primitive.allowed(env.grasped()),
                "{kind} {:?}",
                action.primitive
            );
            assert_eq!(action.params.len(), action.primitive.param_dim());
            match action.location_index {
                Some(i) => assert!(action.primitive.valid_at(record.label(i), record.grasped)),
                None => {
                    let area = match action.primitive {
                        PrimitiveType::Poke | PrimitiveType::Grasp => record.object_box,
                        _ => workspace,
                    };
                    assert!(
                        inside(&area, &action.location),
                        "{kind} {:?}",
                        action.location
                    );
                }
            }
            if env.step(&action).unwrap().done {
                env.reset(step as u64).unwrap();
            }
        }
    }
}

#[test]
fn greedy_actions_ignore_the_rng() {
    for kind in KINDS {
        let t = filled(kind);
        let policy = fresh(kind, &t, 4);
        let env = Env::new(t.eval_env_config().clone(), t.library(), 5).unwrap();
        let record = primap::agent::ObsRecord::new(env.observation(), env.grasped(), 5.0);
        let a = policy
            .act(
                env.observation(),
                &record,
                false,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
        let b = policy
            .act(
                env.observation(),
                &record,
                false,
                &mut ChaCha8Rng::seed_from_u64(2),
            )
            .unwrap();
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn critic_loss_falls_on_a_frozen_batch() {
    for kind in KINDS {
        let t = filled(kind);
        let mut policy = fresh(kind, &t, 6);
        let batch: Vec<&Transition> = t.buffer().items().iter().take(16).collect();
        let targets: Vec<f64> = batch.iter().map(|b| b.reward).collect();
        let (first, _) = policy.update_critic(&batch, &targets).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = policy.update_critic(&batch, &targets).unwrap().0;
        }
        assert!(last < 0.1 * first, "{kind}: {first} -> {last}");
    }
}

#[test]
fn full_updates_stay_finite_and_save_load_roundtrips() {
    for kind in KINDS {
        let t = filled(kind);
        let mut policy = fresh(kind, &t, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let batch = t.buffer().sample(8, &mut rng);
            let m = policy.update(&batch).unwrap();
            assert!(m.critic_loss.is_finite() && m.mean_q.is_finite());
            // baselines update the actor every step by default
            assert!(m.actor_loss.is_some_and(f64::is_finite));
        }
        assert_eq!(policy.learner_steps(), 20);
        let mut other = fresh(kind, &t, 99);
        other.load(&policy.save()).unwrap();
        assert_eq!(other.learner_steps(), 20);
        let env = Env::new(t.eval_env_config().clone(), t.library(), 9).unwrap();
        let record = primap::agent::ObsRecord::new(env.observation(), env.grasped(), 5.0);
        let a = policy
            .act(env.observation(), &record, false, &mut rng)
            .unwrap();
        let b = other
            .act(env.observation(), &record, false, &mut rng)
            .unwrap();
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn softmax_sampling_matches_probabilities() {
    let scores = [0.3, -1.0, 2.0, 0.0, 1.5];
    let valid = [true, true, false, true, true];
    let p = softmax_masked(&scores, &valid, 0.7).unwrap();
    let z: f64 = [0, 1, 3, 4]
        .iter()
        .map(|&j| (scores[j] / 0.7f64).exp())
        .sum();
    for j in 0..5 {
        let expect = if valid[j] {
            (scores[j] / 0.7f64).exp() / z
        } else {
            0.0
        };
        assert!((p[j] - expect).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut counts = [0usize; 5];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_softmax(&scores, &valid, 0.7, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[2], 0);
    let tv: f64 = counts
        .iter()
        .zip(&p)
        .map(|(c, q)| (*c as f64 / draws as f64 - q).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "{tv}");
    assert_eq!(
        argmax_masked(&[1.0, 3.0, 3.0], &[true, true, true]).unwrap(),
        1
    );
    assert!(argmax_masked(&[1.0], &[false]).is_err());
}

#[test]
fn names_roundtrip() {
    for kind in KINDS {
        assert_eq!(kind.name().parse::<BaselineKind>().unwrap(), kind);
    }
    assert!("hacman".parse::<BaselineKind>().is_err());
}
