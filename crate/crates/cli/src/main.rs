use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use primap::env::{Env, Split};
use primap::harness::{self, RunConfig, Trainer};
use primap::registration::{benchmark_csv, run_trial, RegistrationParams};

#[derive(Parser)]
#[command(
    name = "primap",
    about = "Primitive action maps: training, evaluation and registration tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set seed=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        for o in &self.overrides {
            if !o.contains('=') {
                bail!("--set expects KEY=VALUE, got {o:?}");
            }
            text.push('\n');
            text.push_str(o);
        }
        Ok(RunConfig::from_text(&text)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy, writing metrics.csv and checkpoints to the output dir
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to $PRIMAP_OUTPUT_DIR or ./runs
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/checkpoint when it exists
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// train, unseen-instance or unseen-category
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-primitive critic heatmaps (CSV + PPM) for one observation
    Heatmap {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode seed of the rendered scene
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic registration study
    RegisterBench {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 500)]
        points: usize,
        #[arg(long, default_value_t = 0.002)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Record a greedy episode as JSONL, or re-execute a recorded one
    Replay {
        #[command(flatten)]
        config: ConfigArgs,
        /// Policy to roll out; omit when replaying a trace
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trace to re-execute and compare
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            resume,
        } => train(
            config.load()?,
            out.unwrap_or_else(harness::default_output_dir),
            resume,
        ),
        Command::Eval {
            config,
            checkpoint,
            episodes,
            split,
            csv,
        } => eval(config.load()?, checkpoint, episodes, split, csv),
        Command::Heatmap {
            config,
            checkpoint,
            seed,
            out,
        } => heatmap(config.load()?, checkpoint, seed, out),
        Command::RegisterBench {
            trials,
            points,
            noise,
            seed,
            csv,
        } => register_bench(trials, points, noise, seed, csv),
        Command::Replay {
            config,
            checkpoint,
            trace,
            seed,
            steps,
            out,
        } => replay(config.load()?, checkpoint, trace, seed, steps, out),
    }
}

fn train(config: RunConfig, out: PathBuf, resume: bool) -> Result<()> {
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume && ckpt.join("manifest.json").exists() {
        let t = Trainer::load_checkpoint(&ckpt, config)?;
        log::info!("resumed at step {}", t.step_count());
        t
    } else {
        Trainer::new(config)?
    }
    .with_output(&out);
    let total = trainer.config.total_steps;
    let started = Instant::now();
    let mut seen = trainer.metrics().len();
    while trainer.step_count() < total {
        trainer.env_step()?;
        if trainer.metrics().len() != seen {
            seen = trainer.metrics().len();
            let m = &trainer.metrics()[seen - 1];
            log::info!(
                "step {} success {:?} critic {:.4} q {:.3} ({:.0}s)",
                m.step,
                m.success,
                m.critic_loss,
                m.mean_q,
                started.elapsed().as_secs_f64()
            );
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    println!("{}", out.join("metrics.csv").display());
    Ok(())
}

fn eval(
    mut config: RunConfig,
    checkpoint: PathBuf,
    episodes: Option<usize>,
    split: Option<Split>,
    csv: Option<PathBuf>,
) -> Result<()> {
    let episodes = episodes.unwrap_or(config.eval_episodes);
    let policy = Trainer::load_policy(&checkpoint, &config)?;
    if let Some(s) = split {
        config.eval_split = s;
    }
    let library = Arc::new(config.library.build(1.2)?);
    let env_config = config.env_config(config.eval_split, &library);
    let report = harness::evaluate(
        policy.as_ref(),
        &env_config,
        library,
        &config.eval_episode_lens,
        episodes,
    )?;
    let mut text = String::from("length,object,success_rate,stderr\n");
    for &len in &config.eval_episode_lens {
        let (p, se) = report.success_rate(len);
        println!("length {len}: success {p:.3} ± {se:.3} over {episodes} episodes");
        text.push_str(&format!("{len},all,{p},{se}\n"));
        for (name, (p, se)) in report.per_object(len) {
            text.push_str(&format!("{len},{name},{p},{se}\n"));
        }
    }
    if let Some(path) = csv {
        fs::write(&path, text)?;
    }
    Ok(())
}

fn heatmap(config: RunConfig, checkpoint: PathBuf, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let agent = harness::load_agent(&checkpoint, &config)?;
    let library = Arc::new(config.library.build(1.2)?);
    let env_config = config.env_config(config.eval_split, &library);
    let workspace = env_config.bins.workspace();
    let env = Env::new(env_config, library, seed)?;
    let export = harness::heatmap_layers(&agent, env.observation(), env.grasped())?;
    let dir = out.unwrap_or_else(|| harness::default_output_dir().join("heatmaps"));
    for p in harness::write_heatmaps(&export, &workspace, &dir, &format!("seed{seed}"))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn register_bench(
    trials: usize,
    points: usize,
    noise: f64,
    seed: u64,
    csv: Option<PathBuf>,
) -> Result<()> {
    let params = RegistrationParams::default();
    let started = Instant::now();
    let results = (0..trials)
        .map(|t| run_trial(t, seed, points, noise, &params))
        .collect::<primap::Result<Vec<_>>>()?;
    let good = results
        .iter()
        .filter(|r| r.rotation_error_deg < 3.0 && r.translation_error < 0.005)
        .count();
    let monotone = results.iter().filter(|r| r.monotone).count();
    println!(
        "{good}/{trials} trials within 3 deg and 5 mm; {monotone}/{trials} monotone ICP logs; {:.1}s",
        started.elapsed().as_secs_f64()
    );
    let text = benchmark_csv(&results);
    match csv {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn replay(
    config: RunConfig,
    checkpoint: Option<PathBuf>,
    trace: Option<PathBuf>,
    seed: u64,
    steps: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let library = Arc::new(config.library.build(1.2)?);
    let env_config = config.env_config(config.eval_split, &library);
    let records = match (checkpoint, trace) {
        (_, Some(trace)) => {
            let recorded = harness::parse_trace(&fs::read_to_string(&trace)?)?;
            let fresh = harness::replay_trace(&env_config, library, seed, &recorded)?;
            let diverged = recorded
                .iter()
                .zip(&fresh)
                .position(|(a, b)| a.reward != b.reward || a.success != b.success);
            match diverged {
                Some(i) => bail!("replay diverges at step {}", recorded[i].step),
                None => println!("replayed {} steps identically", fresh.len()),
            }
            fresh
        }
        (Some(ckpt), None) => {
            let policy = Trainer::load_policy(&ckpt, &config)?;
            harness::rollout(policy.as_ref(), &env_config, library, seed, steps)?
        }
        (None, None) => bail!("replay needs --checkpoint or --trace"),
    };
    let text = harness::trace_lines(&records)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
