//! Run configuration, training and evaluation loops, metrics, checkpoints
//! and heatmap export.
//!
//! Config files are plain `key = value` lines; `#` starts a comment and
//! lists are comma separated. Every key of [`RunConfig::to_text`] may be
//! given; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    select_eval, AgentConfig, MapAgent, NetworkConfig, ObsRecord, Policy, PolicyState,
    ReplayBuffer, StoredAction, Transition, K,
};
use crate::baselines::{Baseline, BaselineKind};
use crate::env::{
    mix_seed, Aabb, BinGeometry, Env, EnvConfig, EnvState, ObjectLibrary, Observation, Split,
    TaskKind, TraceRecord,
};
use crate::error::{Error, Result};
use crate::primitives::{PrimitiveConstants, PrimitiveType};
use crate::tensor::Tensor;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_VAR: &str = "PRIMAP_OUTPUT_DIR";
pub const CHECKPOINT_VERSION: u32 = 1;
const EVAL_SALT: u64 = 0xE7A1_5EED;
const TRAIN_SALT: u64 = 0x7EA1_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ours,
    Baseline(BaselineKind),
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Ours,
        Method::Baseline(BaselineKind::Pdqn),
        Method::Baseline(BaselineKind::Raps),
        Method::Baseline(BaselineKind::HacmanLogit),
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ours => f.write_str("ours"),
            Method::Baseline(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "ours" {
            Ok(Method::Ours)
        } else {
            s.parse().map(Method::Baseline)
        }
    }
}

/// Where the object shapes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LibrarySpec {
    /// Few procedural shapes that are graspable in every resting pose.
    Graspable {
        count: usize,
        seed: u64,
    },
    Procedural {
        train: usize,
        unseen_instance: usize,
        unseen_category: usize,
        seed: u64,
    },
    File(PathBuf),
}

impl LibrarySpec {
    pub fn build(&self, max_scale: f64) -> Result<ObjectLibrary> {
        match self {
            LibrarySpec::Graspable { count, seed } => {
                Ok(ObjectLibrary::graspable(*count, 0.07, max_scale, *seed))
            }
            LibrarySpec::Procedural {
                train,
                unseen_instance,
                unseen_category,
                seed,
            } => Ok(ObjectLibrary::procedural(
                *train,
                *unseen_instance,
                *unseen_category,
                *seed,
            )),
            LibrarySpec::File(path) => ObjectLibrary::from_text(&fs::read_to_string(path)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub task: TaskKind,
    pub library: LibrarySpec,
    pub train_split: Split,
    pub eval_split: Split,
    pub bin_distance: f64,
    pub object_points: usize,
    pub background_points: usize,
    pub rotate_on_move: bool,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub train_episode_len: usize,
    pub eval_episode_lens: Vec<usize>,
    pub buffer_capacity: usize,
    /// Learner updates per environment step after warmup.
    pub updates_per_step: usize,
    pub agent: AgentConfig,
    pub network: NetworkConfig,
}

impl RunConfig {
    /// Full-scale defaults for a method; baselines update every step and
    /// explore with action noise.
    pub fn for_method(method: Method) -> Self {
        let mut agent = AgentConfig::default();
        if method != Method::Ours {
            agent.actor_interval = 1;
            agent.target_interval = 1;
            agent.action_noise = 0.1;
        }
        Self {
            method,
            seed: 0,
            task: TaskKind::DoubleBin,
            library: LibrarySpec::Procedural {
                train: 32,
                unseen_instance: 16,
                unseen_category: 16,
                seed: 0,
            },
            train_split: Split::Train,
            eval_split: Split::Train,
            bin_distance: 0.55,
            object_points: 400,
            background_points: 1000,
            rotate_on_move: true,
            total_steps: 200_000,
            warmup_steps: 10_000,
            eval_interval: 5_000,
            eval_episodes: 20,
            train_episode_len: 10,
            eval_episode_lens: vec![10, 20, 30],
            buffer_capacity: 100_000,
            updates_per_step: 1,
            agent,
            network: NetworkConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument("warmup exceeds total steps".into()));
        }
        if self.eval_interval == 0 || self.train_episode_len == 0 || self.buffer_capacity == 0 {
            return Err(Error::InvalidArgument("intervals must be positive".into()));
        }
        if self.object_points == 0 || self.background_points == 0 {
            return Err(Error::InvalidArgument(
                "observation sizes must be positive".into(),
            ));
        }
        if self.eval_episode_lens.is_empty() || self.eval_episode_lens.contains(&0) {
            return Err(Error::InvalidArgument(
                "eval episode lengths must be positive".into(),
            ));
        }
        if self.network.local.is_empty() || self.network.decode.is_empty() {
            return Err(Error::InvalidArgument(
                "network widths must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn env_config(&self, split: Split, library: &ObjectLibrary) -> EnvConfig {
        let mut objects = library.indices(split);
        if objects.is_empty() {
            objects = (0..library.len()).collect();
        }
        EnvConfig {
            task: self.task,
            bins: BinGeometry {
                center_distance: self.bin_distance,
                ..BinGeometry::default()
            },
            observation: crate::env::ObservationConfig {
                object_points: self.object_points,
                background_points: self.background_points,
                ..Default::default()
            },
            primitives: PrimitiveConstants {
                rotate_on_move: self.rotate_on_move,
                ..PrimitiveConstants::default()
            },
            max_episode_steps: self.train_episode_len,
            scale_range: (0.8, 1.2),
            objects,
        }
    }

    /// Canonical text form; also the input of [`RunConfig::hash`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            ("task", self.task.to_string()),
        ];
        match &self.library {
            LibrarySpec::Graspable { count, seed } => {
                kv.push(("library", "graspable".into()));
                kv.push(("library_count", count.to_string()));
                kv.push(("library_seed", seed.to_string()));
            }
            LibrarySpec::Procedural {
                train,
                unseen_instance,
                unseen_category,
                seed,
            } => {
                kv.push(("library", "procedural".into()));
                kv.push(("library_train", train.to_string()));
                kv.push(("library_unseen_instance", unseen_instance.to_string()));
                kv.push(("library_unseen_category", unseen_category.to_string()));
                kv.push(("library_seed", seed.to_string()));
            }
            LibrarySpec::File(p) => {
                kv.push(("library", "file".into()));
                kv.push(("library_file", p.display().to_string()));
            }
        }
        let a = &self.agent;
        let n = &self.network;
        kv.extend([
            ("train_split", self.train_split.to_string()),
            ("eval_split", self.eval_split.to_string()),
            ("bin_distance", format!("{:?}", self.bin_distance)),
            ("object_points", self.object_points.to_string()),
            ("background_points", self.background_points.to_string()),
            ("rotate_on_move", self.rotate_on_move.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("train_episode_len", self.train_episode_len.to_string()),
            ("eval_episode_lens", list(&self.eval_episode_lens)),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("updates_per_step", self.updates_per_step.to_string()),
            ("gamma", format!("{:?}", a.gamma)),
            ("temperature", format!("{:?}", a.temperature)),
            ("epsilon", format!("{:?}", a.epsilon)),
            ("batch_size", a.batch_size.to_string()),
            ("actor_interval", a.actor_interval.to_string()),
            ("target_interval", a.target_interval.to_string()),
            ("tau", format!("{:?}", a.tau)),
            ("learning_rate", format!("{:?}", a.learning_rate)),
            ("twin_critics", a.twin_critics.to_string()),
            ("action_noise", format!("{:?}", a.action_noise)),
            ("local_widths", list(&n.local)),
            ("decode_widths", list(&n.decode)),
            ("head_hidden", n.head_hidden.to_string()),
            ("feature_scale", format!("{:?}", n.feature_scale)),
        ]);
        kv.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses a config file; the `method` key picks the defaults the other
    /// keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let method = match pairs.iter().find(|(k, _)| k == "method") {
            Some((_, v)) => v.parse()?,
            None => Method::Ours,
        };
        let mut config = RunConfig::for_method(method);
        for (k, v) in &pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let lib_seed = |l: &LibrarySpec| match l {
            LibrarySpec::Graspable { seed, .. } | LibrarySpec::Procedural { seed, .. } => *seed,
            LibrarySpec::File(_) => 0,
        };
        match key {
            "method" => self.method = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "task" => self.task = value.parse()?,
            "library" => {
                let seed = lib_seed(&self.library);
                self.library = match value {
                    "graspable" => LibrarySpec::Graspable { count: 4, seed },
                    "procedural" => LibrarySpec::Procedural {
                        train: 32,
                        unseen_instance: 16,
                        unseen_category: 16,
                        seed,
                    },
                    "file" => LibrarySpec::File(PathBuf::new()),
                    _ => return Err(Error::Parse(format!("library: unknown kind {value:?}"))),
                }
            }
            "library_seed" => match &mut self.library {
                LibrarySpec::Graspable { seed, .. } | LibrarySpec::Procedural { seed, .. } => {
                    *seed = num(key, value)?
                }
                LibrarySpec::File(_) => {
                    return Err(Error::Parse(
                        "library_seed needs a generated library".into(),
                    ))
                }
            },
            "library_count" => match &mut self.library {
                LibrarySpec::Graspable { count, .. } => *count = num(key, value)?,
                _ => {
                    return Err(Error::Parse(
                        "library_count needs library = graspable".into(),
                    ))
                }
            },
            "library_train" | "library_unseen_instance" | "library_unseen_category" => {
                match &mut self.library {
                    LibrarySpec::Procedural {
                        train,
                        unseen_instance,
                        unseen_category,
                        ..
                    } => {
                        let v = num(key, value)?;
                        match key {
                            "library_train" => *train = v,
                            "library_unseen_instance" => *unseen_instance = v,
                            _ => *unseen_category = v,
                        }
                    }
                    _ => return Err(Error::Parse(format!("{key} needs library = procedural"))),
                }
            }
            "library_file" => self.library = LibrarySpec::File(PathBuf::from(value)),
            "train_split" => self.train_split = value.parse()?,
            "eval_split" => self.eval_split = value.parse()?,
            "bin_distance" => self.bin_distance = num(key, value)?,
            "object_points" => self.object_points = num(key, value)?,
            "background_points" => self.background_points = num(key, value)?,
            "rotate_on_move" => self.rotate_on_move = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "train_episode_len" => self.train_episode_len = num(key, value)?,
            "eval_episode_lens" => self.eval_episode_lens = list(key, value)?,
            "buffer_capacity" => self.buffer_capacity = num(key, value)?,
            "updates_per_step" => self.updates_per_step = num(key, value)?,
            "gamma" => self.agent.gamma = num(key, value)?,
            "temperature" => self.agent.temperature = num(key, value)?,
            "epsilon" => self.agent.epsilon = num(key, value)?,
            "batch_size" => self.agent.batch_size = num(key, value)?,
            "actor_interval" => self.agent.actor_interval = num(key, value)?,
            "target_interval" => self.agent.target_interval = num(key, value)?,
            "tau" => self.agent.tau = num(key, value)?,
            "learning_rate" => self.agent.learning_rate = num(key, value)?,
            "twin_critics" => self.agent.twin_critics = num(key, value)?,
            "action_noise" => self.agent.action_noise = num(key, value)?,
            "local_widths" => self.network.local = list(key, value)?,
            "decode_widths" => self.network.decode = list(key, value)?,
            "head_hidden" => self.network.head_hidden = num(key, value)?,
            "feature_scale" => self.network.feature_scale = num(key, value)?,
            _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// 16 hex digits of FNV-1a over the canonical text.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Keys whose values differ between two config texts.
pub fn config_diff(a: &str, b: &str) -> Vec<String> {
    let ma: BTreeMap<String, String> = parse_pairs(a).unwrap_or_default().into_iter().collect();
    let mb: BTreeMap<String, String> = parse_pairs(b).unwrap_or_default().into_iter().collect();
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| ma.get(*k) != mb.get(*k))
        .map(|k| {
            format!(
                "{k}: {} -> {}",
                ma.get(k).map(String::as_str).unwrap_or("<unset>"),
                mb.get(k).map(String::as_str).unwrap_or("<unset>")
            )
        })
        .collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

const SOURCES: &[&str] = &[
    include_str!("agent.rs"),
    include_str!("baselines.rs"),
    include_str!("env.rs"),
    include_str!("geometry.rs"),
    include_str!("harness.rs"),
    include_str!("primitives.rs"),
    include_str!("registration.rs"),
    include_str!("tensor.rs"),
];

/// Short content hash of the library sources, in the style of a commit id.
pub fn build_id() -> String {
    let mut h: u64 = fnv1a(env!("CARGO_PKG_VERSION").as_bytes());
    for s in SOURCES {
        h ^= fnv1a(s.as_bytes());
        h = h.rotate_left(17).wrapping_mul(0x0100_0000_01b3);
    }
    format!("{:012x}", h & 0xffff_ffff_ffff)
}

pub fn make_policy(config: &RunConfig, workspace: Aabb, seed: u64) -> Result<Box<dyn Policy>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match config.method {
        Method::Ours => Box::new(MapAgent::new(
            config.agent.clone(),
            config.network.clone(),
            &mut rng,
        )?),
        Method::Baseline(kind) => Box::new(Baseline::new(
            kind,
            config.agent.clone(),
            config.network.clone(),
            workspace,
            &mut rng,
        )?),
    })
}

/// Outcome of one evaluation episode run to the longest requested length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub object: String,
    /// Step (1-based) at which the episode first succeeded.
    pub first_success: Option<usize>,
    pub total_reward: f64,
    pub final_reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    pub lengths: Vec<usize>,
}

impl EvalReport {
    /// Success rate and its standard error at an episode length.
    pub fn success_rate(&self, len: usize) -> (f64, f64) {
        success_stats(
            self.episodes
                .iter()
                .map(|e| e.first_success.is_some_and(|s| s <= len)),
        )
    }

    pub fn per_object(&self, len: usize) -> BTreeMap<String, (f64, f64)> {
        let mut groups: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        for e in &self.episodes {
            groups
                .entry(e.object.clone())
                .or_default()
                .push(e.first_success.is_some_and(|s| s <= len));
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, success_stats(v.into_iter())))
            .collect()
    }

    /// Mean return over the first `len` steps is not kept; this is the mean
    /// return of the full evaluated episodes.
    pub fn mean_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.total_reward).sum::<f64>() / self.episodes.len() as f64
    }
}

fn success_stats(outcomes: impl Iterator<Item = bool>) -> (f64, f64) {
    let v: Vec<f64> = outcomes.map(|s| if s { 1.0 } else { 0.0 }).collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let p = v.iter().sum::<f64>() / n;
    (p, (p * (1.0 - p) / n).sqrt())
}

/// Seed of evaluation episode `j`; shared by all checkpoints and lengths.
pub fn eval_seed(j: usize) -> u64 {
    mix_seed(EVAL_SALT, j as u64)
}

/// Greedy rollouts. Each episode runs to the longest length and stops at
/// success, so shorter lengths reuse the same trajectories.
pub fn evaluate(
    policy: &dyn Policy,
    env_config: &EnvConfig,
    library: Arc<ObjectLibrary>,
    lengths: &[usize],
    episodes: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        episodes: Vec::with_capacity(episodes),
        lengths: lengths.to_vec(),
    };
    if episodes == 0 {
        return Ok(report);
    }
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let mut config = env_config.clone();
    config.max_episode_steps = longest;
    let scale = policy.network_config().feature_scale;
    let mut env = Env::new(config, library, eval_seed(0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for j in 0..episodes {
        let seed = eval_seed(j);
        env.reset(seed)?;
        let object = env.state().shape.name.clone();
        let mut first_success = None;
        let mut total = 0.0;
        let mut last = env.reward();
        for t in 1..=longest {
            let record = ObsRecord::new(env.observation(), env.grasped(), scale);
            let (action, _) = policy.act(env.observation(), &record, false, &mut rng)?;
            let out = env.step(&action)?;
            total += out.reward;
            last = out.reward;
            if out.success {
                first_success = Some(t);
                break;
            }
        }
        report.episodes.push(EpisodeResult {
            seed,
            object,
            first_success,
            total_reward: total,
            final_reward: last,
        });
    }
    Ok(report)
}

/// One evaluation row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Success rate per evaluated episode length.
    pub success: Vec<(usize, f64)>,
    pub mean_reward: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub buffer_size: usize,
    pub updates: u64,
}

impl MetricsRow {
    /// Success at the training episode length (or the first length).
    pub fn success_rate(&self, len: usize) -> f64 {
        self.success
            .iter()
            .find(|(l, _)| *l == len)
            .or(self.success.first())
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }
}

pub fn metrics_csv(
    rows: &[MetricsRow],
    lengths: &[usize],
    config_hash: &str,
    build: &str,
) -> String {
    let mut out = String::from("step,success_rate");
    for l in lengths {
        out.push_str(&format!(",success_len{l}"));
    }
    out.push_str(
        ",mean_reward,critic_loss,actor_loss,mean_q,buffer_size,updates,config_hash,build_id\n",
    );
    for r in rows {
        let first = r.success.first().map(|s| s.1).unwrap_or(0.0);
        out.push_str(&format!("{},{first:?}", r.step));
        for (_, s) in &r.success {
            out.push_str(&format!(",{s:?}"));
        }
        out.push_str(&format!(
            ",{:?},{:?},{:?},{:?},{},{},{config_hash},{build}\n",
            r.mean_reward, r.critic_loss, r.actor_loss, r.mean_q, r.buffer_size, r.updates
        ));
    }
    out
}

/// Learner statistics accumulated between evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LearnerStats {
    critic_sum: f64,
    actor_sum: f64,
    actor_count: u64,
    q_sum: f64,
    count: u64,
}

impl LearnerStats {
    fn mean(sum: f64, n: u64) -> f64 {
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Training loop state; everything needed for an exact resume.
pub struct Trainer {
    pub config: RunConfig,
    library: Arc<ObjectLibrary>,
    eval_env_config: EnvConfig,
    env: Env,
    policy: Box<dyn Policy>,
    buffer: ReplayBuffer,
    act_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    step: u64,
    episode: u64,
    record: Arc<ObsRecord>,
    stats: LearnerStats,
    metrics: Vec<MetricsRow>,
    out_dir: Option<PathBuf>,
    started: Instant,
    timing: Vec<(u64, f64)>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let library = Arc::new(config.library.build(1.2)?);
        if library.is_empty() {
            return Err(Error::InvalidArgument("object library is empty".into()));
        }
        let train_env_config = config.env_config(config.train_split, &library);
        let eval_env_config = config.env_config(config.eval_split, &library);
        let env = Env::new(
            train_env_config.clone(),
            library.clone(),
            mix_seed(config.seed ^ TRAIN_SALT, 0),
        )?;
        let policy = make_policy(
            &config,
            train_env_config.bins.workspace(),
            mix_seed(config.seed, 1),
        )?;
        let record = Arc::new(ObsRecord::new(
            env.observation(),
            env.grasped(),
            config.network.feature_scale,
        ));
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            act_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2)),
            sample_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3)),
            config,
            library,
            eval_env_config,
            env,
            policy,
            step: 0,
            episode: 0,
            record,
            stats: LearnerStats::default(),
            metrics: Vec::new(),
            out_dir: None,
            started: Instant::now(),
            timing: Vec::new(),
        })
    }

    /// Writes metrics and a checkpoint into `dir` at every evaluation.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn policy(&self) -> &dyn Policy {
        self.policy.as_ref()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn library(&self) -> Arc<ObjectLibrary> {
        self.library.clone()
    }

    pub fn eval_env_config(&self) -> &EnvConfig {
        &self.eval_env_config
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(
            &self.metrics,
            &self.config.eval_episode_lens,
            &self.config.hash(),
            &build_id(),
        )
    }

    /// Trains until `total_steps`.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_steps)
    }

    /// Trains until `limit` environment steps (capped at `total_steps`).
    pub fn run_until(&mut self, limit: u64) -> Result<()> {
        while self.step < limit.min(self.config.total_steps) {
            self.env_step()?;
        }
        Ok(())
    }

    /// One primitive execution, the learner updates that follow it and an
    /// evaluation when due.
    pub fn env_step(&mut self) -> Result<()> {
        let obs = self.env.observation().clone();
        let (action, stored) = if self.step < self.config.warmup_steps {
            self.policy
                .random_action(&obs, &self.record, &mut self.act_rng)?
        } else {
            self.policy
                .act(&obs, &self.record, true, &mut self.act_rng)?
        };
        let out = self.env.step(&action)?;
        let next = Arc::new(ObsRecord::new(
            self.env.observation(),
            out.grasped,
            self.config.network.feature_scale,
        ));
        self.buffer.push(Transition {
            obs: self.record.clone(),
            action: stored,
            reward: out.reward,
            next_obs: next.clone(),
            done: out.success,
        });
        self.step += 1;
        if out.done {
            self.episode += 1;
            self.env
                .reset(mix_seed(self.config.seed ^ TRAIN_SALT, self.episode))?;
            self.record = Arc::new(ObsRecord::new(
                self.env.observation(),
                self.env.grasped(),
                self.config.network.feature_scale,
            ));
        } else {
            self.record = next;
        }
        if self.step > self.config.warmup_steps {
            for _ in 0..self.config.updates_per_step {
                let batch = self
                    .buffer
                    .sample(self.config.agent.batch_size, &mut self.sample_rng);
                let m = self.policy.update(&batch)?;
                let finite = m.critic_loss.is_finite()
                    && m.mean_q.is_finite()
                    && m.actor_loss.is_none_or(f64::is_finite);
                if !finite {
                    self.dump_diagnostic(&m)?;
                    return Err(Error::NonFinite(format!(
                        "learner loss at step {}: {m:?}",
                        self.step
                    )));
                }
                self.stats.critic_sum += m.critic_loss;
                self.stats.q_sum += m.mean_q;
                self.stats.count += 1;
                if let Some(a) = m.actor_loss {
                    self.stats.actor_sum += a;
                    self.stats.actor_count += 1;
                }
            }
        }
        if self.step.is_multiple_of(self.config.eval_interval) {
            self.evaluate_now()?;
        }
        Ok(())
    }

    fn dump_diagnostic(&self, m: &crate::agent::UpdateMetrics) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
            let body = serde_json::json!({
                "step": self.step,
                "episode": self.episode,
                "critic_loss": m.critic_loss.to_string(),
                "actor_loss": m.actor_loss.map(|v| v.to_string()),
                "mean_q": m.mean_q.to_string(),
                "params_finite": self.policy.save().tensors.iter().all(|(_, t)| t.is_finite()),
            });
            fs::write(
                dir.join("diagnostic.json"),
                serde_json::to_string_pretty(&body)?,
            )?;
        }
        Ok(())
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let report = evaluate(
            self.policy.as_ref(),
            &self.eval_env_config,
            self.library.clone(),
            &self.config.eval_episode_lens,
            self.config.eval_episodes,
        )?;
        let s = &self.stats;
        self.metrics.push(MetricsRow {
            step: self.step,
            success: self
                .config
                .eval_episode_lens
                .iter()
                .map(|&l| (l, report.success_rate(l).0))
                .collect(),
            mean_reward: report.mean_reward(),
            critic_loss: LearnerStats::mean(s.critic_sum, s.count),
            actor_loss: LearnerStats::mean(s.actor_sum, s.actor_count),
            mean_q: LearnerStats::mean(s.q_sum, s.count),
            buffer_size: self.buffer.len(),
            updates: self.policy.learner_steps(),
        });
        self.stats = LearnerStats::default();
        self.timing
            .push((self.step, self.started.elapsed().as_secs_f64()));
        if let Some(dir) = self.out_dir.clone() {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
            let mut timing = String::from("step,wall_time_s\n");
            for (step, t) in &self.timing {
                timing.push_str(&format!("{step},{t:.3}\n"));
            }
            fs::write(dir.join("timing.csv"), timing)?;
            self.save_checkpoint(&dir.join("checkpoint"))?;
        }
        Ok(())
    }

    /// Writes `manifest.json` and `data.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let state = self.policy.save();
        let mut data: Vec<f64> = Vec::new();
        let mut tensors = Vec::with_capacity(state.tensors.len());
        for (name, t) in &state.tensors {
            tensors.push(TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        }
        let buffer_offset = data.len();
        let (records, transitions) = encode_buffer(&self.buffer, &mut data);
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            build_id: build_id(),
            config_hash: self.config.hash(),
            config: self.config.to_text(),
            step: self.step,
            episode: self.episode,
            env_seed: self.env.episode_seed(),
            env_steps: self.env.steps(),
            env_state: self.env.state().clone(),
            act_rng: self.act_rng.clone(),
            sample_rng: self.sample_rng.clone(),
            counters: state.counters.clone(),
            tensors,
            buffer: BufferEntry {
                capacity: self.buffer.capacity(),
                cursor: self.buffer.cursor(),
                records,
                transitions,
                offset: buffer_offset,
            },
            stats: self.stats.clone(),
            metrics: self.metrics.clone(),
            data_len: data.len(),
        };
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(dir.join("data.bin"))?;
        f.write_all(&bytes)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Rebuilds a trainer from a checkpoint written with the same config.
    pub fn load_checkpoint(dir: &Path, config: RunConfig) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} != {CHECKPOINT_VERSION}",
                manifest.format_version
            )));
        }
        // the step budget may grow on resume; everything else must match
        let mut saved = RunConfig::from_text(&manifest.config)?;
        saved.total_steps = config.total_steps;
        if saved.hash() != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config mismatch: {}",
                config_diff(&saved.to_text(), &config.to_text()).join("; ")
            )));
        }
        let bytes = fs::read(dir.join("data.bin"))?;
        if bytes.len() != manifest.data_len * 8 {
            return Err(Error::Checkpoint(format!(
                "data.bin holds {} bytes, manifest expects {}",
                bytes.len(),
                manifest.data_len * 8
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut state = PolicyState {
            tensors: Vec::with_capacity(manifest.tensors.len()),
            counters: manifest.counters.clone(),
        };
        for e in &manifest.tensors {
            let end = e.offset + e.rows * e.cols;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} out of range", e.name)));
            }
            state.tensors.push((
                e.name.clone(),
                Tensor::from_vec(e.rows, e.cols, data[e.offset..end].to_vec())?,
            ));
        }
        let buffer = decode_buffer(&manifest.buffer, &data)?;

        let mut trainer = Trainer::new(config)?;
        trainer.policy.load(&state)?;
        trainer
            .env
            .restore(manifest.env_seed, manifest.env_steps, manifest.env_state)?;
        trainer.record = Arc::new(ObsRecord::new(
            trainer.env.observation(),
            trainer.env.grasped(),
            trainer.config.network.feature_scale,
        ));
        trainer.buffer = buffer;
        trainer.act_rng = manifest.act_rng;
        trainer.sample_rng = manifest.sample_rng;
        trainer.step = manifest.step;
        trainer.episode = manifest.episode;
        trainer.stats = manifest.stats;
        trainer.metrics = manifest.metrics;
        Ok(trainer)
    }

    /// Policy state only, for evaluation or heatmaps.
    pub fn load_policy(dir: &Path, config: &RunConfig) -> Result<Box<dyn Policy>> {
        let trainer = Trainer::load_checkpoint(dir, config.clone())?;
        Ok(trainer.policy)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BufferEntry {
    capacity: usize,
    cursor: usize,
    records: usize,
    transitions: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    build_id: String,
    config_hash: String,
    config: String,
    step: u64,
    episode: u64,
    env_seed: u64,
    env_steps: usize,
    env_state: EnvState,
    act_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    counters: Vec<(String, u64)>,
    tensors: Vec<TensorEntry>,
    buffer: BufferEntry,
    stats: LearnerStats,
    metrics: Vec<MetricsRow>,
    data_len: usize,
}

/// Observations are written once each (they are shared between
/// consecutive transitions), then transitions refer to them by id.
fn encode_buffer(buffer: &ReplayBuffer, data: &mut Vec<f64>) -> (usize, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order: Vec<&Arc<ObsRecord>> = Vec::new();
    for t in buffer.items() {
        for r in [&t.obs, &t.next_obs] {
            let key = Arc::as_ptr(r) as usize;
            if let std::collections::btree_map::Entry::Vacant(e) = ids.entry(key) {
                e.insert(order.len());
                order.push(r);
            }
        }
    }
    for r in &order {
        data.push(r.len() as f64);
        data.push(if r.grasped { 1.0 } else { 0.0 });
        data.extend_from_slice(r.object_box.min.as_slice());
        data.extend_from_slice(r.object_box.max.as_slice());
        data.extend_from_slice(&r.features);
    }
    for t in buffer.items() {
        data.push(ids[&(Arc::as_ptr(&t.obs) as usize)] as f64);
        data.push(ids[&(Arc::as_ptr(&t.next_obs) as usize)] as f64);
        data.push(t.action.primitive as f64);
        data.push(t.action.index as f64);
        data.push(t.reward);
        data.push(if t.done { 1.0 } else { 0.0 });
        data.push(t.action.continuous.len() as f64);
        data.extend_from_slice(&t.action.continuous);
    }
    (order.len(), buffer.len())
}

fn decode_buffer(entry: &BufferEntry, data: &[f64]) -> Result<ReplayBuffer> {
    let mut pos = entry.offset;
    let mut take = |n: usize| -> Result<&[f64]> {
        let end = pos + n;
        if end > data.len() {
            return Err(Error::Checkpoint("replay buffer section truncated".into()));
        }
        let s = &data[pos..end];
        pos = end;
        Ok(s)
    };
    let mut records = Vec::with_capacity(entry.records);
    for _ in 0..entry.records {
        let head = take(8)?;
        let n = head[0] as usize;
        let grasped = head[1] != 0.0;
        let object_box = Aabb {
            min: nalgebra::Vector3::new(head[2], head[3], head[4]),
            max: nalgebra::Vector3::new(head[5], head[6], head[7]),
        };
        let features = take(n * crate::agent::FEATURES)?.to_vec();
        records.push(Arc::new(ObsRecord {
            features,
            grasped,
            object_box,
        }));
    }
    let mut items = Vec::with_capacity(entry.transitions);
    for _ in 0..entry.transitions {
        let head = take(7)?.to_vec();
        let (o, no) = (head[0] as usize, head[1] as usize);
        if o >= records.len() || no >= records.len() {
            return Err(Error::Checkpoint(
                "transition refers to a missing observation".into(),
            ));
        }
        let continuous = take(head[6] as usize)?.to_vec();
        items.push(Transition {
            obs: records[o].clone(),
            action: StoredAction {
                primitive: head[2] as usize,
                index: head[3] as usize,
                continuous,
            },
            reward: head[4],
            next_obs: records[no].clone(),
            done: head[5] != 0.0,
        });
    }
    ReplayBuffer::from_parts(entry.capacity, items, entry.cursor)
}

/// Critic values of one primitive over the observation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapLayer {
    pub primitive: PrimitiveType,
    /// Q normalized to [0, 1] over valid points (0.5 when constant).
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// Point chosen by greedy selection, when it uses this primitive.
    pub selected: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapExport {
    pub points: Vec<[f64; 3]>,
    pub layers: Vec<HeatmapLayer>,
    pub selected: (usize, usize),
}

pub fn heatmap_layers(agent: &MapAgent, obs: &Observation, grasped: bool) -> Result<HeatmapExport> {
    let record = ObsRecord::new(obs, grasped, agent.net.feature_scale);
    let (_, critic) = agent.build_maps(&record)?;
    let selected = select_eval(&critic)?;
    let n = obs.len();
    let layers = (0..K)
        .map(|k| {
            let valid: Vec<bool> = (0..n).map(|i| critic.is_valid(i, k)).collect();
            let qs: Vec<f64> = (0..n).map(|i| critic.get(i, k)).collect();
            let (lo, hi) = (0..n)
                .filter(|&i| valid[i])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    (lo.min(qs[i]), hi.max(qs[i]))
                });
            let values = qs
                .iter()
                .zip(&valid)
                .map(|(q, ok)| {
                    if !ok {
                        0.0
                    } else if hi > lo {
                        (q - lo) / (hi - lo)
                    } else {
                        0.5
                    }
                })
                .collect();
            HeatmapLayer {
                primitive: PrimitiveType::ALL[k],
                values,
                valid,
                selected: (selected.1 == k).then_some(selected.0),
            }
        })
        .collect();
    Ok(HeatmapExport {
        points: (0..n).map(|i| obs.point(i).into()).collect(),
        layers,
        selected,
    })
}

/// Colormap: value v in [0, 1] maps to rgb (255·v, 0, 255·(1 − v)), blue
/// for low and red for high. Invalid points are grey (128), empty pixels
/// dark (24), the selected point a white square.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (255.0 * v).round() as u8,
        0,
        (255.0 * (1.0 - v)).round() as u8,
    ]
}

/// Top-down image of one layer over the workspace rectangle.
pub fn heatmap_ppm(
    export: &HeatmapExport,
    layer: &HeatmapLayer,
    workspace: &Aabb,
    width: usize,
) -> Vec<u8> {
    let sx = workspace.max.x - workspace.min.x;
    let sy = workspace.max.y - workspace.min.y;
    let height = ((width as f64) * sy / sx).ceil().max(1.0) as usize;
    let mut img = vec![[24u8; 3]; width * height];
    let to_px = |p: &[f64; 3]| {
        let u = ((p[0] - workspace.min.x) / sx * (width as f64 - 1.0))
            .round()
            .clamp(0.0, width as f64 - 1.0) as usize;
        let v = ((workspace.max.y - p[1]) / sy * (height as f64 - 1.0))
            .round()
            .clamp(0.0, height as f64 - 1.0) as usize;
        (u, v)
    };
    let mut order: Vec<usize> = (0..export.points.len()).collect();
    order.sort_by(|&a, &b| export.points[a][2].total_cmp(&export.points[b][2]));
    let splat = |img: &mut Vec<[u8; 3]>, (u, v): (usize, usize), r: isize, c: [u8; 3]| {
        for du in -r..=r {
            for dv in -r..=r {
                let (x, y) = (u as isize + du, v as isize + dv);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    img[y as usize * width + x as usize] = c;
                }
            }
        }
    };
    for i in order {
        let c = if layer.valid[i] {
            colormap(layer.values[i])
        } else {
            [128; 3]
        };
        splat(&mut img, to_px(&export.points[i]), 1, c);
    }
    if let Some(i) = layer.selected {
        splat(&mut img, to_px(&export.points[i]), 3, [255; 3]);
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in img {
        out.extend_from_slice(&px);
    }
    out
}

/// Writes `{prefix}_{primitive}.csv` and `.ppm` for every primitive.
pub fn write_heatmaps(
    export: &HeatmapExport,
    workspace: &Aabb,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for layer in &export.layers {
        let base = format!("{prefix}_{}", layer.primitive.name());
        let mut csv = String::from("x,y,z,q_norm,valid,selected\n");
        for (i, p) in export.points.iter().enumerate() {
            csv.push_str(&format!(
                "{:?},{:?},{:?},{:?},{},{}\n",
                p[0],
                p[1],
                p[2],
                layer.values[i],
                layer.valid[i] as u8,
                (layer.selected == Some(i)) as u8
            ));
        }
        let csv_path = dir.join(format!("{base}.csv"));
        fs::write(&csv_path, csv)?;
        let ppm_path = dir.join(format!("{base}.ppm"));
        fs::write(&ppm_path, heatmap_ppm(export, layer, workspace, 240))?;
        written.push(csv_path);
        written.push(ppm_path);
    }
    Ok(written)
}

/// Greedy episode from `seed`, stopping at success or `len` steps.
pub fn rollout(
    policy: &dyn Policy,
    env_config: &EnvConfig,
    library: Arc<ObjectLibrary>,
    seed: u64,
    len: usize,
) -> Result<Vec<TraceRecord>> {
    let mut config = env_config.clone();
    config.max_episode_steps = len;
    let mut env = Env::new(config, library, seed)?;
    let scale = policy.network_config().feature_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for _ in 0..len {
        let record = ObsRecord::new(env.observation(), env.grasped(), scale);
        let (action, _) = policy.act(env.observation(), &record, false, &mut rng)?;
        let step = env.step(&action)?;
        let stop = step.done;
        out.push(step.record);
        if stop {
            break;
        }
    }
    Ok(out)
}

/// Re-executes a recorded episode from its seed; the returned records are
/// the fresh ones, so callers can compare them with the input.
pub fn replay_trace(
    env_config: &EnvConfig,
    library: Arc<ObjectLibrary>,
    seed: u64,
    records: &[TraceRecord],
) -> Result<Vec<TraceRecord>> {
    let mut config = env_config.clone();
    config.max_episode_steps = records.len().max(1);
    let mut env = Env::new(config, library, seed)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let action = crate::primitives::PrimitiveAction {
            primitive: r.primitive,
            location: r.location.into(),
            location_index: r.location_index,
            params: r.params.clone(),
        };
        out.push(env.step(&action)?.record);
    }
    Ok(out)
}

/// The agent of a checkpoint written by a run of our method.
pub fn load_agent(dir: &Path, config: &RunConfig) -> Result<MapAgent> {
    if config.method != Method::Ours {
        return Err(Error::InvalidArgument(format!(
            "heatmaps need method ours, config has {}",
            config.method
        )));
    }
    let state = Trainer::load_checkpoint(dir, config.clone())?.policy.save();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = MapAgent::new(config.agent.clone(), config.network.clone(), &mut rng)?;
    agent.load(&state)?;
    Ok(agent)
}

/// Line-delimited JSON trace of an episode.
pub fn trace_lines(records: &[TraceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Output directory from the environment, defaulting to `runs`.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        for m in Method::ALL {
            let mut c = RunConfig::for_method(m);
            c.seed = 7;
            c.eval_episode_lens = vec![10, 30];
            let back = RunConfig::from_text(&c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn baseline_defaults() {
        let c = RunConfig::for_method("raps".parse().unwrap());
        assert_eq!(c.agent.actor_interval, 1);
        assert_eq!(c.agent.action_noise, 0.1);
        let o = RunConfig::for_method(Method::Ours);
        assert_eq!(o.agent.actor_interval, 4);
        assert_eq!(o.agent.action_noise, 0.0);
    }

    #[test]
    fn unknown_keys_and_diffs() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
        let a = RunConfig::for_method(Method::Ours);
        let mut b = a.clone();
        b.seed = 3;
        assert_eq!(
            config_diff(&a.to_text(), &b.to_text()),
            vec!["seed: 0 -> 3".to_string()]
        );
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
    }
}
