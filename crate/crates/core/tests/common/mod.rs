#![allow(dead_code)]

use primap::env::TaskKind;
use primap::harness::{LibrarySpec, Method, RunConfig, Trainer};
use primap::registration::{run_trial, RegistrationParams};
use primap::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small network and learner settings that train in minutes on a CPU.
pub fn toy_config(method: Method, task: TaskKind, seed: u64) -> RunConfig {
    let mut c = RunConfig::for_method(method);
    c.seed = seed;
    c.task = task;
    c.library = LibrarySpec::Procedural {
        train: 4,
        unseen_instance: 0,
        unseen_category: 0,
        seed: 0,
    };
    c.object_points = 16;
    c.background_points = 32;
    c.rotate_on_move = false;
    c.network.local = vec![16, 32];
    c.network.decode = vec![32, 16];
    c.network.head_hidden = 16;
    c.agent.batch_size = 32;
    c.agent.learning_rate = 1e-3;
    c.warmup_steps = 1000;
    c.eval_interval = 1000;
    c.eval_episodes = 20;
    c
}

/// A few hundred steps, for plumbing tests.
pub fn tiny_run(method: Method, seed: u64) -> RunConfig {
    let mut c = toy_config(method, TaskKind::TranslationOnly, seed);
    c.object_points = 8;
    c.background_points = 16;
    c.network.local = vec![8];
    c.network.decode = vec![8];
    c.network.head_hidden = 8;
    c.agent.batch_size = 8;
    c.total_steps = 60;
    c.warmup_steps = 20;
    c.eval_interval = 20;
    c.eval_episodes = 2;
    c.eval_episode_lens = vec![2, 4];
    c.train_episode_len = 5;
    c
}

/// Trains until `max_steps` or until success at length `len` reaches
/// `stop_at`; returns the trainer.
pub fn train(config: RunConfig, len: usize, stop_at: f64) -> Trainer {
    let mut t = Trainer::new(config).unwrap();
    let mut seen = 0;
    while t.step_count() < t.config.total_steps {
        t.env_step().unwrap();
        if t.metrics().len() != seen {
            seen = t.metrics().len();
            if t.metrics()[seen - 1].success_rate(len) >= stop_at {
                break;
            }
        }
    }
    t
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[derive(Debug, Default)]
pub struct GradcheckStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Analytic gradients of a random linear functional of a random network's
/// output against central differences with step `h`. Coordinates whose two
/// one-sided slopes disagree straddle a relu or max kink and are skipped.
pub fn gradcheck(net: usize, h: f64, stats: &mut GradcheckStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + net as u64);
    let mut store = ParamStore::new();
    let input = rng.gen_range(2..6);
    let rows = 6;
    enum Net {
        M(Mlp),
        E(PointEncoder, usize),
    }
    let model = if net.is_multiple_of(2) {
        let depth = rng.gen_range(1..4);
        let mut widths = vec![input];
        for _ in 0..depth {
            widths.push(rng.gen_range(1..7));
        }
        let out = [Activation::Identity, Activation::Tanh, Activation::Relu][net / 2 % 3];
        Net::M(Mlp::new(MlpSpec::new(widths, out), &mut store, "m", &mut rng).unwrap())
    } else {
        let hidden = rng.gen_range(2..6);
        let spec = PointEncoderSpec {
            local: vec![input, hidden],
            decode: vec![2 * hidden, rng.gen_range(2..6)],
        };
        let clouds = [1, 2, 3][net / 2 % 3];
        Net::E(
            PointEncoder::new(&spec, &mut store, "e", &mut rng).unwrap(),
            clouds,
        )
    };
    let x = Tensor::uniform(rows, input, 1.0, &mut rng);
    let forward = |store: &ParamStore, slot: Option<usize>| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = match &model {
            Net::M(m) => m.forward(&mut g, store, slot, xi).unwrap(),
            Net::E(e, clouds) => e.forward(&mut g, store, slot, xi, *clouds).unwrap(),
        };
        (g, y)
    };
    let (g0, y0) = forward(&store, None);
    let shape = g0.value(y0).shape();
    let weights = {
        let mut r = ChaCha8Rng::seed_from_u64(net as u64);
        Tensor::uniform(shape[0], shape[1], 1.0, &mut r)
    };
    let loss = |store: &ParamStore| {
        let (mut g, y) = forward(store, None);
        let l = g.weighted_sum(y, weights.clone()).unwrap();
        g.value(l).item()
    };
    let (mut g, y) = forward(&store, Some(0));
    let l = g.weighted_sum(y, weights.clone()).unwrap();
    let analytic = g.backward(l).unwrap().for_slot(0, &store);
    let f0 = loss(&store);
    for p in 0..store.len() {
        for j in 0..store.get(p).len() {
            let orig = store.get(p).data()[j];
            store.get_mut(p).data_mut()[j] = orig + h;
            let fp = loss(&store);
            store.get_mut(p).data_mut()[j] = orig - h;
            let fm = loss(&store);
            store.get_mut(p).data_mut()[j] = orig;
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            let central = (fp - fm) / (2.0 * h);
            if (right - left).abs() > 1e-3 * central.abs().max(1.0) {
                stats.skipped += 1;
                continue;
            }
            let a = analytic[p].data()[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-6);
            stats.worst = stats.worst.max(rel);
            stats.checked += 1;
        }
    }
}

/// Synthetic registration trials: (passing, monotone ICP logs).
pub fn registration_study(trials: usize, seed: u64) -> (usize, usize) {
    let params = RegistrationParams::default();
    let mut good = 0;
    let mut monotone = 0;
    for t in 0..trials {
        let r = run_trial(t, seed, 500, 0.002, &params).unwrap();
        if r.rotation_error_deg < 3.0 && r.translation_error < 0.005 {
            good += 1;
        }
        if r.monotone {
            monotone += 1;
        }
    }
    (good, monotone)
}
