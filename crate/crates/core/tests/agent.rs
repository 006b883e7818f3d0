use std::sync::Arc;

use primap::agent::*;
use primap::env::{Env, ObjectLibrary, TaskKind};
use primap::harness::{LibrarySpec, Method, RunConfig};
use primap::primitives::PrimitiveType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(n: usize, rng: &mut ChaCha8Rng, mask_p: f64, ties: bool) -> CriticMap {
    let q = (0..n * K)
        .map(|_| {
            if ties {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    let mut valid: Vec<bool> = (0..n * K).map(|_| rng.gen::<f64>() >= mask_p).collect();
    valid[rng.gen_range(0..n * K)] = true;
    CriticMap { n, q, valid }
}

/// exp(q/β) normalised over valid entries, mixed with ε uniform.
fn oracle_probs(map: &CriticMap, beta: f64, eps: f64) -> Vec<f64> {
    let valid: Vec<usize> = (0..map.q.len()).filter(|&j| map.valid[j]).collect();
    let z: f64 = valid.iter().map(|&j| (map.q[j] / beta).exp()).sum();
    (0..map.q.len())
        .map(|j| {
            if map.valid[j] {
                (1.0 - eps) * (map.q[j] / beta).exp() / z + eps / valid.len() as f64
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn explore_frequencies_follow_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (beta, eps) in [(0.1, 0.1), (1.0, 0.0), (0.5, 0.3)] {
        let map = random_map(6, &mut rng, 0.3, false);
        let p = oracle_probs(&map, beta, eps);
        let draws = 100_000;
        let mut counts = vec![0usize; p.len()];
        for _ in 0..draws {
            let (i, k) = select_explore(&map, beta, eps, &mut rng).unwrap();
            counts[i * K + k] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&p)
            .map(|(c, q)| (*c as f64 / draws as f64 - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv {tv}");
        for j in 0..p.len() {
            if !map.valid[j] {
                assert_eq!(counts[j], 0);
            }
        }
        // the closed form in the library agrees with the oracle
        let lib = explore_probabilities(&map, beta, eps).unwrap();
        assert!(lib.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn low_temperature_collapses_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = random_map(8, &mut rng, 0.2, false);
    let best = select_eval(&map).unwrap();
    for _ in 0..1000 {
        assert_eq!(select_explore(&map, 1e-4, 0.0, &mut rng).unwrap(), best);
    }
}

#[test]
fn eval_selection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 0..1000 {
        let map = random_map(1 + t % 9, &mut rng, 0.4, t % 2 == 0);
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..map.n {
            for k in 0..K {
                if map.valid[i * K + k] && best.is_none_or(|b| map.q[i * K + k] > b.2) {
                    best = Some((i, k, map.q[i * K + k]));
                }
            }
        }
        let (i, k, _) = best.unwrap();
        assert_eq!(select_eval(&map).unwrap(), (i, k));
    }
    let none = CriticMap {
        n: 1,
        q: vec![0.0; K],
        valid: vec![false; K],
    };
    assert!(select_eval(&none).is_err());
}

fn toy_records(count: usize, seed: u64) -> (Vec<Arc<ObsRecord>>, Vec<Transition>) {
    let mut c = RunConfig::for_method(Method::Ours);
    c.task = TaskKind::TranslationOnly;
    c.library = LibrarySpec::Procedural {
        train: 4,
        unseen_instance: 0,
        unseen_category: 0,
        seed: 0,
    };
    c.object_points = 8;
    c.background_points = 16;
    let library: Arc<ObjectLibrary> = Arc::new(c.library.build(1.2).unwrap());
    let env_config = c.env_config(c.train_split, &library);
    let mut env = Env::new(env_config, library, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent = MapAgent::new(AgentConfig::default(), tiny_net(), &mut rng).unwrap();
    let mut records = vec![Arc::new(ObsRecord::new(
        env.observation(),
        env.grasped(),
        5.0,
    ))];
    let mut transitions = Vec::new();
    for _ in 0..count {
        let prev = records.last().unwrap().clone();
        let (action, stored) = agent
            .random_action(env.observation(), &prev, &mut rng)
            .unwrap();
        let out = env.step(&action).unwrap();
        let next = Arc::new(ObsRecord::new(env.observation(), out.grasped, 5.0));
        transitions.push(Transition {
            obs: prev,
            action: stored,
            reward: out.reward,
            next_obs: next.clone(),
            done: out.success,
        });
        if out.done {
            env.reset(rng.gen()).unwrap();
            records.push(Arc::new(ObsRecord::new(
                env.observation(),
                env.grasped(),
                5.0,
            )));
        } else {
            records.push(next);
        }
    }
    (records, transitions)
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        local: vec![8, 16],
        decode: vec![16, 8],
        head_hidden: 8,
        feature_scale: 5.0,
    }
}

#[test]
fn replay_sampling_is_uniform() {
    let (_, transitions) = toy_records(20, 4);
    let mut buffer = ReplayBuffer::new(20);
    for t in transitions {
        buffer.push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 20];
    let draws = 200_000;
    for _ in 0..draws / 10 {
        for i in buffer.sample_indices(10, &mut rng) {
            counts[i] += 1;
        }
    }
    let e = draws as f64 / 20.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 19 degrees of freedom, 0.999 quantile ≈ 43.8
    assert!(chi2 < 43.8, "chi2 {chi2}");
}

#[test]
fn actor_climbs_a_hand_set_critic() {
    let (records, _) = toy_records(12, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = AgentConfig {
        learning_rate: 1e-2,
        ..AgentConfig::default()
    };
    let mut agent = MapAgent::new(config, tiny_net(), &mut rng).unwrap();
    let f = tiny_net().feature_width();
    // critic 0: Q_k = relu(Σ_d a_d + 10), increasing in every parameter
    for k in 0..K {
        let layers = agent.critics[0].heads[k].layers().to_vec();
        let store = &mut agent.critic_params[0].store;
        for &(w, b) in &layers {
            store.get_mut(w).data_mut().fill(0.0);
            store.get_mut(b).data_mut().fill(0.0);
        }
        let dim = PrimitiveType::ALL[k].param_dim();
        for d in 0..dim {
            store.get_mut(layers[0].0).set(f + d, 0, 1.0);
        }
        store.get_mut(layers[0].1).set(0, 0, 10.0);
        store.get_mut(layers[1].0).set(0, 0, 1.0);
    }
    let transitions: Vec<Transition> = records
        .iter()
        .map(|r| Transition {
            obs: r.clone(),
            action: StoredAction {
                primitive: 0,
                index: 0,
                continuous: vec![0.0; 5],
            },
            reward: 0.0,
            next_obs: r.clone(),
            done: true,
        })
        .collect();
    let batch: Vec<&Transition> = transitions.iter().collect();
    let mean_param = |agent: &MapAgent| {
        let (mut s, mut n) = (0.0, 0usize);
        for r in &records {
            let (actor, critic) = agent.build_maps(r).unwrap();
            for i in 0..r.len() {
                for k in 0..K {
                    if critic.is_valid(i, k) {
                        for v in actor.params(i, k) {
                            s += v;
                            n += 1;
                        }
                    }
                }
            }
        }
        s / n.max(1) as f64
    };
    let before = mean_param(&agent);
    let critic_before = agent.critic_params[0].store.clone();
    let mut losses = Vec::new();
    for _ in 0..300 {
        losses.push(agent.update_actor(&batch).unwrap());
    }
    let after = mean_param(&agent);
    assert!(after > 0.9 && after > before, "{before} -> {after}");
    assert!(losses.last().unwrap() < &losses[0]);
    // the critic is untouched by actor updates
    assert_eq!(
        agent.critic_params[0].store.values(),
        critic_before.values()
    );
}

#[test]
fn critic_loss_falls_on_a_frozen_batch() {
    let (_, transitions) = toy_records(32, 8);
    let batch: Vec<&Transition> = transitions.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = AgentConfig {
        learning_rate: 3e-3,
        ..AgentConfig::default()
    };
    let mut agent = MapAgent::new(config, tiny_net(), &mut rng).unwrap();
    let targets: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    let (first, _) = agent.update_critic(&batch, &targets).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = agent.update_critic(&batch, &targets).unwrap().0;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn td_targets_stop_at_terminal_transitions() {
    let (_, mut transitions) = toy_records(8, 10);
    for (j, t) in transitions.iter_mut().enumerate() {
        t.done = j % 2 == 0;
        t.reward = -0.1 * j as f64;
    }
    let batch: Vec<&Transition> = transitions.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let agent = MapAgent::new(AgentConfig::default(), tiny_net(), &mut rng).unwrap();
    let y = agent.td_targets(&batch).unwrap();
    for (j, t) in transitions.iter().enumerate() {
        if t.done {
            assert_eq!(y[j], t.reward);
        } else {
            assert_ne!(y[j], t.reward);
        }
    }
    assert_eq!(td_target(-1.0, 0.9, false, 2.0), -1.0 + 0.9 * 2.0);
}

#[test]
fn random_actions_respect_the_mask() {
    let (records, transitions) = toy_records(200, 12);
    assert!(records.len() > 1);
    for t in &transitions {
        let prim = PrimitiveType::ALL[t.action.primitive];
        assert!(prim.valid_at(t.obs.label(t.action.index), t.obs.grasped));
        assert!(t.action.continuous.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
