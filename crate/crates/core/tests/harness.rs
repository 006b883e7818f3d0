mod common;

use std::fs;

use common::tiny_run;
use primap::agent::Policy;
use primap::harness::*;
use primap::primitives::PrimitiveType;
use primap::Error;

fn tensors(p: &dyn Policy) -> Vec<Vec<f64>> {
    p.save()
        .tensors
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect()
}

#[test]
fn identical_runs_are_bit_identical() {
    for method in Method::ALL {
        let mut a = Trainer::new(tiny_run(method, 3)).unwrap();
        let mut b = Trainer::new(tiny_run(method, 3)).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv(), "{method}");
        assert_eq!(tensors(a.policy()), tensors(b.policy()), "{method}");
        assert_eq!(a.metrics().len(), 3);
    }
    // a different seed gives a different run
    let mut a = Trainer::new(tiny_run(Method::Ours, 3)).unwrap();
    let mut c = Trainer::new(tiny_run(Method::Ours, 4)).unwrap();
    a.run().unwrap();
    c.run().unwrap();
    assert_ne!(tensors(a.policy()), tensors(c.policy()));
}

#[test]
fn resume_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Ours, Method::ALL[1]] {
        let mut full = Trainer::new(tiny_run(method, 5)).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(tiny_run(method, 5)).unwrap();
        // 33 is mid-episode and between evaluations
        first.run_until(33).unwrap();
        let ckpt = dir.path().join(format!("{method}"));
        first.save_checkpoint(&ckpt).unwrap();
        drop(first);
        let mut resumed = Trainer::load_checkpoint(&ckpt, tiny_run(method, 5)).unwrap();
        assert_eq!(resumed.step_count(), 33);
        resumed.run().unwrap();
        assert_eq!(resumed.metrics_csv(), full.metrics_csv(), "{method}");
        assert_eq!(
            tensors(resumed.policy()),
            tensors(full.policy()),
            "{method}"
        );
        assert_eq!(resumed.buffer().len(), full.buffer().len());
    }
}

#[test]
fn checkpoint_double_roundtrip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_run(Method::Ours, 6)).unwrap();
    t.run_until(45).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    t.save_checkpoint(&a).unwrap();
    Trainer::load_checkpoint(&a, tiny_run(Method::Ours, 6))
        .unwrap()
        .save_checkpoint(&b)
        .unwrap();
    assert_eq!(
        fs::read(a.join("data.bin")).unwrap(),
        fs::read(b.join("data.bin")).unwrap()
    );
    let strip = |p: &std::path::Path| {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(p.join("manifest.json")).unwrap()).unwrap();
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn checkpoint_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_run(Method::Ours, 7)).unwrap();
    t.run_until(25).unwrap();
    let ckpt = dir.path().join("ck");
    t.save_checkpoint(&ckpt).unwrap();

    let err = Trainer::load_checkpoint(&ckpt, tiny_run(Method::Ours, 8))
        .err()
        .unwrap();
    let msg = err.to_string();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(msg.contains("seed: 7 -> 8"), "{msg}");

    // a larger step budget is the one accepted change
    let mut longer = tiny_run(Method::Ours, 7);
    longer.total_steps = 80;
    let mut extended = Trainer::load_checkpoint(&ckpt, longer).unwrap();
    extended.run().unwrap();
    assert_eq!(extended.step_count(), 80);

    let data = fs::read(ckpt.join("data.bin")).unwrap();
    fs::write(ckpt.join("data.bin"), &data[..data.len() - 8]).unwrap();
    assert!(matches!(
        Trainer::load_checkpoint(&ckpt, tiny_run(Method::Ours, 7)),
        Err(Error::Checkpoint(_))
    ));
    fs::write(ckpt.join("data.bin"), &data).unwrap();

    let manifest = fs::read_to_string(ckpt.join("manifest.json")).unwrap();
    fs::write(ckpt.join("manifest.json"), &manifest[..manifest.len() / 2]).unwrap();
    assert!(matches!(
        Trainer::load_checkpoint(&ckpt, tiny_run(Method::Ours, 7)),
        Err(Error::Checkpoint(_))
    ));

    let bumped = manifest.replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(ckpt.join("manifest.json"), bumped).unwrap();
    let err = Trainer::load_checkpoint(&ckpt, tiny_run(Method::Ours, 7))
        .err()
        .unwrap();
    assert!(err.to_string().contains("99"), "{err}");
}

#[test]
fn output_dir_gets_metrics_timing_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_run(Method::Ours, 9);
    let mut t = Trainer::new(config.clone())
        .unwrap()
        .with_output(dir.path());
    t.run().unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("step,success_rate,success_len2,success_len4,"));
    assert!(lines[1].starts_with("20,"));
    assert!(lines[1].ends_with(&format!("{},{}", config.hash(), build_id())));
    assert!(!csv.contains("wall"));
    assert_eq!(
        fs::read_to_string(dir.path().join("timing.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    let resumed = Trainer::load_checkpoint(&dir.path().join("checkpoint"), config).unwrap();
    assert_eq!(resumed.step_count(), 60);
}

#[test]
fn success_is_monotone_in_episode_length() {
    let mut t = Trainer::new(tiny_run(Method::Ours, 10)).unwrap();
    t.run().unwrap();
    // separate evaluations per length, sharing only the episode seeds
    let rates: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&l| {
            evaluate(t.policy(), t.eval_env_config(), t.library(), &[l], 6)
                .unwrap()
                .success_rate(l)
                .0
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    let joint = evaluate(t.policy(), t.eval_env_config(), t.library(), &[2, 4, 8], 6).unwrap();
    for (i, &l) in [2, 4, 8].iter().enumerate() {
        assert_eq!(joint.success_rate(l).0, rates[i]);
    }
}

#[test]
fn heatmaps_cover_every_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_run(Method::Ours, 11);
    let mut t = Trainer::new(config.clone())
        .unwrap()
        .with_output(dir.path());
    t.run().unwrap();
    let agent = load_agent(&dir.path().join("checkpoint"), &config).unwrap();
    let env = primap::env::Env::new(t.eval_env_config().clone(), t.library(), 0).unwrap();
    let export = heatmap_layers(&agent, env.observation(), env.grasped()).unwrap();
    assert_eq!(export.layers.len(), 5);
    for layer in &export.layers {
        for i in 0..export.points.len() {
            let label = env.observation().label(i);
            assert_eq!(
                layer.valid[i],
                layer.primitive.valid_at(label, env.grasped())
            );
            assert!((0.0..=1.0).contains(&layer.values[i]));
        }
    }
    let (i, k) = export.selected;
    assert_eq!(export.layers[k].selected, Some(i));
    assert!(export.layers[k].valid[i]);
    let workspace = t.eval_env_config().bins.workspace();
    let files = write_heatmaps(&export, &workspace, &dir.path().join("maps"), "s0").unwrap();
    assert_eq!(files.len(), 10);
    let ppm = fs::read(
        dir.path()
            .join("maps")
            .join(format!("s0_{}.ppm", PrimitiveType::Poke.name())),
    )
    .unwrap();
    assert!(ppm.starts_with(b"P6\n240 "));
    let csv = fs::read_to_string(
        dir.path()
            .join("maps")
            .join(format!("s0_{}.csv", PrimitiveType::Grasp.name())),
    )
    .unwrap();
    assert_eq!(csv.lines().count(), export.points.len() + 1);
    assert_eq!(colormap(0.0), [0, 0, 255]);
    assert_eq!(colormap(1.0), [255, 0, 0]);
    // baselines have no maps
    let mut pd = tiny_run(Method::ALL[1], 11);
    pd.total_steps = 20;
    assert!(load_agent(dir.path(), &pd).is_err());
}

#[test]
fn traces_replay_identically() {
    let mut t = Trainer::new(tiny_run(Method::Ours, 12)).unwrap();
    t.run().unwrap();
    let records = rollout(t.policy(), t.eval_env_config(), t.library(), 77, 6).unwrap();
    assert!(!records.is_empty());
    let text = trace_lines(&records).unwrap();
    assert_eq!(text.lines().count(), records.len());
    let parsed = parse_trace(&text).unwrap();
    assert_eq!(parsed, records);
    let fresh = replay_trace(t.eval_env_config(), t.library(), 77, &parsed).unwrap();
    assert_eq!(fresh, records);
    assert!(parse_trace("{not json").is_err());
}

#[test]
fn config_files_roundtrip_and_reject_unknown_keys() {
    let c = tiny_run(Method::ALL[3], 13);
    let back = RunConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back.to_text(), c.to_text());
    assert_eq!(back.hash(), c.hash());
    let edited = format!("{}\n# comment\nseed = 14\n", c.to_text());
    assert_eq!(RunConfig::from_text(&edited).unwrap().seed, 14);
    assert!(RunConfig::from_text("no_such_key = 1").is_err());
    assert!(RunConfig::from_text("seed = minus one").is_err());
    let diff = config_diff(
        &c.to_text(),
        &RunConfig::from_text(&edited).unwrap().to_text(),
    );
    assert_eq!(diff, vec!["seed: 13 -> 14".to_string()]);
}
