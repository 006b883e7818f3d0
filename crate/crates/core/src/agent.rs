//! Hybrid actor/critic-map policy and its TD3-style learner.
//!
//! The actor map holds motion parameters for every point and primitive; the
//! critic map scores every (point, primitive) pair given those parameters.
//! Location and primitive come from the critic map, parameters from the
//! actor map at the chosen entry.

use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Aabb, Observation};
use crate::error::{Error, Result};
use crate::geometry::Label;
use crate::primitives::{PrimitiveAction, PrimitiveType, MAX_PARAMS};
use crate::tensor::{
    soft_update, Activation, Adam, Graph, Mlp, MlpSpec, NodeId, ParamStore, PointEncoder,
    PointEncoderSpec, Tensor,
};

pub const K: usize = PrimitiveType::COUNT;
/// Per-point input features: position, goal flow, object mask.
pub const FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Softmax temperature for exploration.
    pub temperature: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub actor_interval: u64,
    pub target_interval: u64,
    pub tau: f64,
    pub learning_rate: f64,
    pub twin_critics: bool,
    /// Gaussian noise added to continuous outputs while exploring (0 for the
    /// map policy).
    pub action_noise: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            temperature: 0.1,
            epsilon: 0.1,
            batch_size: 64,
            actor_interval: 4,
            target_interval: 4,
            tau: 0.005,
            learning_rate: 1e-4,
            twin_critics: true,
            action_noise: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        if self.actor_interval == 0 || self.target_interval == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "intervals and batch size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(
                "epsilon and tau must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Network widths shared by all methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Per-point layers after the 7 input features.
    pub local: Vec<usize>,
    /// Layers after concatenating local and pooled features.
    pub decode: Vec<usize>,
    pub head_hidden: usize,
    /// Multiplier on positions and flow before they enter a network.
    pub feature_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            local: vec![64, 128],
            decode: vec![128, 64],
            head_hidden: 64,
            feature_scale: 5.0,
        }
    }
}

impl NetworkConfig {
    pub fn encoder_spec(&self) -> PointEncoderSpec {
        let mut local = vec![FEATURES];
        local.extend(&self.local);
        let mut decode = vec![2 * self.local.last().copied().unwrap_or(FEATURES)];
        decode.extend(&self.decode);
        PointEncoderSpec { local, decode }
    }

    pub fn feature_width(&self) -> usize {
        self.decode.last().copied().unwrap_or(0)
    }
}

/// Network-ready copy of an observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    /// N × 7 rows, positions and flow already scaled.
    pub features: Vec<f64>,
    pub grasped: bool,
    /// Bounds of the observed object points (for regressed locations).
    pub object_box: Aabb,
}

impl ObsRecord {
    pub fn new(obs: &Observation, grasped: bool, feature_scale: f64) -> Self {
        let mut features = obs.features();
        for row in features.chunks_mut(FEATURES) {
            row[..6].iter_mut().for_each(|v| *v *= feature_scale);
        }
        let (min, max) = obs
            .object_cloud()
            .bounds()
            .unwrap_or((nalgebra::Vector3::zeros(), nalgebra::Vector3::zeros()));
        Self {
            features,
            grasped,
            object_box: Aabb { min, max },
        }
    }

    pub fn len(&self) -> usize {
        self.features.len() / FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn label(&self, i: usize) -> Label {
        if self.features[i * FEATURES + 6] > 0.5 {
            Label::Object
        } else {
            Label::Background
        }
    }

    /// Validity of every (point, primitive) pair, row-major N × K.
    pub fn mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len() * K);
        for i in 0..self.len() {
            let label = self.label(i);
            out.extend(
                PrimitiveType::ALL
                    .iter()
                    .map(|p| p.valid_at(label, self.grasped)),
            );
        }
        out
    }
}

/// Stacks equally sized records row-wise.
pub fn stack_features(records: &[&ObsRecord]) -> Result<Tensor> {
    let n = records.first().map(|r| r.len()).unwrap_or(0);
    if records.iter().any(|r| r.len() != n) || n == 0 {
        return Err(Error::ShapeMismatch("observations differ in size".into()));
    }
    let mut data = Vec::with_capacity(records.len() * n * FEATURES);
    for r in records {
        data.extend_from_slice(&r.features);
    }
    Tensor::from_vec(records.len() * n, FEATURES, data)
}

/// Action as stored in the replay buffer; the meaning of `continuous`
/// depends on the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredAction {
    pub primitive: usize,
    pub index: usize,
    pub continuous: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Arc<ObsRecord>,
    pub action: StoredAction,
    pub reward: f64,
    pub next_obs: Arc<ObsRecord>,
    pub done: bool,
}

/// Ring buffer with uniform sampling.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Slot the next push will write.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Rebuilds a buffer from its stored items in slot order.
    pub fn from_parts(capacity: usize, items: Vec<Transition>, cursor: usize) -> Result<Self> {
        if items.len() > capacity || cursor >= capacity.max(1) {
            return Err(Error::Checkpoint(
                "replay buffer cursor out of range".into(),
            ));
        }
        Ok(Self {
            capacity,
            items,
            cursor,
        })
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch)
            .map(|_| rng.gen_range(0..self.items.len()))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(batch, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Motion parameters for every point and primitive, N × K × 5.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorMap {
    pub n: usize,
    pub values: Vec<f64>,
}

impl ActorMap {
    pub fn params(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * K + k) * MAX_PARAMS;
        &self.values[start..start + PrimitiveType::ALL[k].param_dim()]
    }
}

/// Q for every point and primitive with a validity mask, both N × K.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticMap {
    pub n: usize,
    pub q: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CriticMap {
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.q[i * K + k]
    }

    pub fn is_valid(&self, i: usize, k: usize) -> bool {
        self.valid[i * K + k]
    }
}

/// Argmax over valid entries, lowest flat index on ties. Returns `(i, k)`.
pub fn select_eval(critic: &CriticMap) -> Result<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (flat, (&q, &ok)) in critic.q.iter().zip(&critic.valid).enumerate() {
        if ok && best.is_none_or(|(_, b)| q > b) {
            best = Some((flat, q));
        }
    }
    best.map(|(flat, _)| (flat / K, flat % K))
        .ok_or(Error::NoValidAction)
}

/// Selection probabilities of every entry under the exploration policy:
/// ε uniform over valid entries mixed with a softmax of Q / β.
pub fn explore_probabilities(
    critic: &CriticMap,
    temperature: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let valid: Vec<usize> = (0..critic.q.len()).filter(|&j| critic.valid[j]).collect();
    if valid.is_empty() {
        return Err(Error::NoValidAction);
    }
    let max = valid
        .iter()
        .map(|&j| critic.q[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; critic.q.len()];
    let mut total = 0.0;
    for &j in &valid {
        let w = ((critic.q[j] - max) / temperature).exp();
        probs[j] = w;
        total += w;
    }
    let uniform = epsilon / valid.len() as f64;
    for &j in &valid {
        probs[j] = (1.0 - epsilon) * probs[j] / total + uniform;
    }
    Ok(probs)
}

pub fn select_explore<R: Rng + ?Sized>(
    critic: &CriticMap,
    temperature: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let valid: Vec<usize> = (0..critic.q.len()).filter(|&j| critic.valid[j]).collect();
    if valid.is_empty() {
        return Err(Error::NoValidAction);
    }
    if rng.gen::<f64>() < epsilon {
        let j = *valid.choose(rng).ok_or(Error::NoValidAction)?;
        return Ok((j / K, j % K));
    }
    let max = valid
        .iter()
        .map(|&j| critic.q[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = valid
        .iter()
        .map(|&j| ((critic.q[j] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    for (&j, w) in valid.iter().zip(&weights) {
        if pick < *w {
            return Ok((j / K, j % K));
        }
        pick -= w;
    }
    // rounding left the draw past the end
    let j = valid[weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)];
    Ok((j / K, j % K))
}

/// Online parameters, their target copy and optimizer.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub store: ParamStore,
    pub target: ParamStore,
    pub opt: Adam,
}

impl Trainable {
    pub fn new(store: ParamStore, lr: f64) -> Self {
        Self {
            opt: Adam::new(&store, lr),
            target: store.clone(),
            store,
        }
    }

    pub fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        self.opt.apply(&mut self.store, grads)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target, &self.store, tau)
    }

    pub fn save(&self, prefix: &str, state: &mut PolicyState) {
        let (m, v) = self.opt.moments();
        for (i, t) in self.store.values().iter().enumerate() {
            let name = self.store.name(i);
            state
                .tensors
                .push((format!("{prefix}/online/{name}"), t.clone()));
            state.tensors.push((
                format!("{prefix}/target/{name}"),
                self.target.get(i).clone(),
            ));
            state
                .tensors
                .push((format!("{prefix}/adam_m/{name}"), m[i].clone()));
            state
                .tensors
                .push((format!("{prefix}/adam_v/{name}"), v[i].clone()));
        }
        state
            .counters
            .push((format!("{prefix}/adam_step"), self.opt.step));
    }

    pub fn load(&mut self, prefix: &str, state: &PolicyState) -> Result<()> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for i in 0..self.store.len() {
            let name = self.store.name(i).to_string();
            let online = state.tensor(&format!("{prefix}/online/{name}"))?;
            let target = state.tensor(&format!("{prefix}/target/{name}"))?;
            if online.shape() != self.store.get(i).shape() || target.shape() != online.shape() {
                return Err(Error::Checkpoint(format!("shape of {prefix}/{name}")));
            }
            *self.store.get_mut(i) = online.clone();
            *self.target.get_mut(i) = target.clone();
            m.push(state.tensor(&format!("{prefix}/adam_m/{name}"))?.clone());
            v.push(state.tensor(&format!("{prefix}/adam_v/{name}"))?.clone());
        }
        let step = state.counter(&format!("{prefix}/adam_step"))?;
        self.opt = Adam::from_moments(self.opt.lr, step, m, v);
        Ok(())
    }
}

/// Named tensors and counters making up a policy's learnable state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyState {
    pub tensors: Vec<(String, Tensor)>,
    pub counters: Vec<(String, u64)>,
}

impl PolicyState {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {name}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub mean_q: f64,
}

/// What every learning method offers the training loop.
pub trait Policy {
    fn name(&self) -> &'static str;
    fn network_config(&self) -> &NetworkConfig;
    /// Greedy (`explore = false`) or exploratory action.
    fn act(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        explore: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)>;
    /// Uniformly random admissible action used to fill the buffer.
    fn random_action(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)>;
    fn update(&mut self, batch: &[&Transition]) -> Result<UpdateMetrics>;
    fn learner_steps(&self) -> u64;
    fn save(&self) -> PolicyState;
    fn load(&mut self, state: &PolicyState) -> Result<()>;
}

/// Encoder plus one tanh head per primitive with parameters.
#[derive(Clone, Debug)]
pub struct ActorNet {
    pub encoder: PointEncoder,
    pub heads: Vec<Option<Mlp>>,
}

impl ActorNet {
    pub fn new<R: Rng>(net: &NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let encoder = PointEncoder::new(&net.encoder_spec(), store, "actor.encoder", rng)?;
        let f = net.feature_width();
        let mut heads = Vec::with_capacity(K);
        for p in PrimitiveType::ALL {
            let dim = p.param_dim();
            heads.push(if dim == 0 {
                None
            } else {
                Some(Mlp::new(
                    MlpSpec::new(vec![f, net.head_hidden, dim], Activation::Tanh),
                    store,
                    &format!("actor.head.{}", p.name()),
                    rng,
                )?)
            });
        }
        Ok(Self { encoder, heads })
    }

    /// Per-primitive parameter rows for every stacked point.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<Vec<Option<NodeId>>> {
        let f = self.encoder.forward(g, store, slot, x, clouds)?;
        self.heads
            .iter()
            .map(|h| h.as_ref().map(|m| m.forward(g, store, slot, f)).transpose())
            .collect()
    }
}

/// Encoder plus one scalar head per primitive taking `[f_i, a^m]`.
#[derive(Clone, Debug)]
pub struct CriticNet {
    pub encoder: PointEncoder,
    pub heads: Vec<Mlp>,
}

impl CriticNet {
    pub fn new<R: Rng>(
        net: &NetworkConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = PointEncoder::new(
            &net.encoder_spec(),
            store,
            &format!("{prefix}.encoder"),
            rng,
        )?;
        let f = net.feature_width();
        let mut heads = Vec::with_capacity(K);
        for p in PrimitiveType::ALL {
            heads.push(Mlp::new(
                MlpSpec::new(
                    vec![f + p.param_dim(), net.head_hidden, 1],
                    Activation::Identity,
                ),
                store,
                &format!("{prefix}.head.{}", p.name()),
                rng,
            )?);
        }
        Ok(Self { encoder, heads })
    }

    pub fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        self.encoder.forward(g, store, slot, x, clouds)
    }

    pub fn head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        k: usize,
        f: NodeId,
        params: Option<NodeId>,
    ) -> Result<NodeId> {
        let input = match params {
            Some(p) => g.concat_cols(&[f, p])?,
            None => f,
        };
        self.heads[k].forward(g, store, slot, input)
    }
}

/// The spatially grounded hybrid actor/critic-map method.
pub struct MapAgent {
    pub config: AgentConfig,
    pub net: NetworkConfig,
    pub actor: ActorNet,
    pub actor_params: Trainable,
    pub critics: Vec<CriticNet>,
    pub critic_params: Vec<Trainable>,
    steps: u64,
}

impl MapAgent {
    pub fn new<R: Rng>(config: AgentConfig, net: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let actor = ActorNet::new(&net, &mut store, rng)?;
        let actor_params = Trainable::new(store, config.learning_rate);
        let count = if config.twin_critics { 2 } else { 1 };
        let mut critics = Vec::new();
        let mut critic_params = Vec::new();
        for c in 0..count {
            let mut store = ParamStore::new();
            critics.push(CriticNet::new(
                &net,
                &mut store,
                &format!("critic{c}"),
                rng,
            )?);
            critic_params.push(Trainable::new(store, config.learning_rate));
        }
        Ok(Self {
            config,
            net,
            actor,
            actor_params,
            critics,
            critic_params,
            steps: 0,
        })
    }

    /// Actor and critic maps (first critic) for one observation.
    pub fn build_maps(&self, record: &ObsRecord) -> Result<(ActorMap, CriticMap)> {
        let (actor, qs) = self.maps_for(&[record], false)?;
        let critic = CriticMap {
            n: record.len(),
            q: qs.into_iter().next().unwrap_or_default(),
            valid: record.mask(),
        };
        Ok((
            actor.into_iter().next().unwrap_or(ActorMap {
                n: 0,
                values: vec![],
            }),
            critic,
        ))
    }

    /// Maps for a batch. With `target` the target networks are used and one
    /// Q map per target critic is returned per record (flattened critic-major).
    fn maps_for(
        &self,
        records: &[&ObsRecord],
        target: bool,
    ) -> Result<(Vec<ActorMap>, Vec<Vec<f64>>)> {
        let x = stack_features(records)?;
        let b = records.len();
        let n = records[0].len();
        let mut g = Graph::new();
        let xi = g.input(x);
        let actor_store = if target {
            &self.actor_params.target
        } else {
            &self.actor_params.store
        };
        let heads = self.actor.forward(&mut g, actor_store, None, xi, b)?;
        let mut actor_maps: Vec<ActorMap> = (0..b)
            .map(|_| ActorMap {
                n,
                values: vec![0.0; n * K * MAX_PARAMS],
            })
            .collect();
        for (k, h) in heads.iter().enumerate() {
            if let Some(h) = h {
                let t = g.value(*h);
                let dim = t.cols();
                for row in 0..b * n {
                    let (bi, i) = (row / n, row % n);
                    let dst = (i * K + k) * MAX_PARAMS;
                    actor_maps[bi].values[dst..dst + dim].copy_from_slice(t.row(row));
                }
            }
        }
        let critic_count = if target { self.critics.len() } else { 1 };
        let mut qs = Vec::new();
        for c in 0..critic_count {
            let store = if target {
                &self.critic_params[c].target
            } else {
                &self.critic_params[c].store
            };
            let f = self.critics[c].features(&mut g, store, None, xi, b)?;
            let mut maps = vec![vec![0.0; n * K]; b];
            for k in 0..K {
                let q = self.critics[c].head(&mut g, store, None, k, f, heads[k])?;
                let t = g.value(q);
                for row in 0..b * n {
                    maps[row / n][(row % n) * K + k] = t.data()[row];
                }
            }
            qs.extend(maps);
        }
        Ok((actor_maps, qs))
    }

    /// `y = r + γ(1 − done)·Q̄` with the greedy target action; Q̄ is the
    /// minimum over target critics at that entry.
    pub fn td_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let next: Vec<&ObsRecord> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
        let (_, qs) = self.maps_for(&next, true)?;
        let b = batch.len();
        let mut out = Vec::with_capacity(b);
        for (bi, t) in batch.iter().enumerate() {
            if t.done || self.config.gamma == 0.0 {
                out.push(t.reward);
                continue;
            }
            let critic = CriticMap {
                n: next[bi].len(),
                q: qs[bi].clone(),
                valid: next[bi].mask(),
            };
            let (i, k) = select_eval(&critic)?;
            let q = (0..self.critics.len())
                .map(|c| qs[c * b + bi][i * K + k])
                .fold(f64::INFINITY, f64::min);
            out.push(td_target(t.reward, self.config.gamma, t.done, q));
        }
        Ok(out)
    }

    /// Squared error of every critic at the stored entries; returns the
    /// first critic's loss and its mean Q.
    pub fn update_critic(&mut self, batch: &[&Transition], targets: &[f64]) -> Result<(f64, f64)> {
        let keep: Vec<usize> = (0..batch.len())
            .filter(|&b| {
                let t = batch[b];
                let ok = t.action.primitive < K
                    && t.action.index < t.obs.len()
                    && PrimitiveType::ALL[t.action.primitive]
                        .valid_at(t.obs.label(t.action.index), t.obs.grasped);
                if !ok {
                    warn!("skipping transition with an invalid stored action");
                }
                ok
            })
            .collect();
        if keep.is_empty() {
            return Ok((0.0, 0.0));
        }
        let records: Vec<&ObsRecord> = keep.iter().map(|&b| batch[b].obs.as_ref()).collect();
        let x = stack_features(&records)?;
        let n = records[0].len();
        let mut first = (0.0, 0.0);
        for c in 0..self.critics.len() {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let store = &self.critic_params[c].store;
            let f = self.critics[c].features(&mut g, store, Some(0), xi, keep.len())?;
            let mut total: Option<NodeId> = None;
            let mut q_sum = 0.0;
            for k in 0..K {
                let members: Vec<usize> = (0..keep.len())
                    .filter(|&j| batch[keep[j]].action.primitive == k)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let rows: Vec<usize> = members
                    .iter()
                    .map(|&j| j * n + batch[keep[j]].action.index)
                    .collect();
                let fk = g.gather_rows(f, &rows)?;
                let dim = PrimitiveType::ALL[k].param_dim();
                let params = if dim > 0 {
                    let mut data = Vec::with_capacity(members.len() * dim);
                    for &j in &members {
                        data.extend_from_slice(&batch[keep[j]].action.continuous[..dim]);
                    }
                    Some(g.input(Tensor::from_vec(members.len(), dim, data)?))
                } else {
                    None
                };
                let q = self.critics[c].head(&mut g, store, Some(0), k, fk, params)?;
                q_sum += g.value(q).data().iter().sum::<f64>();
                let y = Tensor::from_vec(
                    members.len(),
                    1,
                    members.iter().map(|&j| targets[keep[j]]).collect(),
                )?;
                let yi = g.input(y);
                let diff = g.sub(q, yi)?;
                let sq = g.square(diff);
                let s = g.sum(sq);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            let Some(total) = total else { continue };
            let loss = g.scale(total, 1.0 / keep.len() as f64);
            let value = g.value(loss).item();
            let grads = g.backward(loss)?.for_slot(0, &self.critic_params[c].store);
            self.critic_params[c].step(&grads)?;
            if c == 0 {
                first = (value, q_sum / keep.len() as f64);
            }
        }
        Ok(first)
    }

    /// `−mean Q` of the first critic over every valid entry with motion
    /// parameters; only the actor moves.
    pub fn update_actor(&mut self, batch: &[&Transition]) -> Result<f64> {
        let records: Vec<&ObsRecord> = batch.iter().map(|t| t.obs.as_ref()).collect();
        let x = stack_features(&records)?;
        let b = records.len();
        let n = records[0].len();
        let masks: Vec<Vec<bool>> = records.iter().map(|r| r.mask()).collect();
        let count = (0..b * n)
            .map(|row| {
                (0..K)
                    .filter(|&k| {
                        PrimitiveType::ALL[k].param_dim() > 0 && masks[row / n][(row % n) * K + k]
                    })
                    .count()
            })
            .sum::<usize>();
        if count == 0 {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let xi = g.input(x);
        let heads = self
            .actor
            .forward(&mut g, &self.actor_params.store, Some(0), xi, b)?;
        let critic_store = &self.critic_params[0].store;
        let f = self.critics[0].features(&mut g, critic_store, None, xi, b)?;
        let mut total: Option<NodeId> = None;
        for k in 0..K {
            let Some(params) = heads[k] else { continue };
            let weights: Vec<f64> = (0..b * n)
                .map(|row| {
                    if masks[row / n][(row % n) * K + k] {
                        -1.0 / count as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            if weights.iter().all(|w| *w == 0.0) {
                continue;
            }
            let q = self.critics[0].head(&mut g, critic_store, None, k, f, Some(params))?;
            let s = g.weighted_sum(q, Tensor::from_vec(b * n, 1, weights)?)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let Some(loss) = total else { return Ok(0.0) };
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.for_slot(0, &self.actor_params.store);
        self.actor_params.step(&grads)?;
        Ok(value)
    }

    fn soft_update_targets(&mut self) -> Result<()> {
        self.actor_params.soft_update(self.config.tau)?;
        for c in &mut self.critic_params {
            c.soft_update(self.config.tau)?;
        }
        Ok(())
    }

    fn to_action(
        obs: &Observation,
        actor: &ActorMap,
        i: usize,
        k: usize,
    ) -> (PrimitiveAction, StoredAction) {
        let p = actor.params(i, k);
        let prim = PrimitiveType::ALL[k];
        let action = PrimitiveAction::at_point(prim, obs, i, p);
        let mut continuous = p.to_vec();
        continuous.resize(MAX_PARAMS, 0.0);
        (
            action,
            StoredAction {
                primitive: k,
                index: i,
                continuous,
            },
        )
    }
}

/// `r + γ(1 − done)·q`.
pub fn td_target(reward: f64, gamma: f64, done: bool, q: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q
    }
}

impl Policy for MapAgent {
    fn name(&self) -> &'static str {
        "ours"
    }

    fn network_config(&self) -> &NetworkConfig {
        &self.net
    }

    fn act(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        explore: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)> {
        let (actor, critic) = self.build_maps(record)?;
        let (i, k) = if explore {
            select_explore(&critic, self.config.temperature, self.config.epsilon, rng)?
        } else {
            select_eval(&critic)?
        };
        Ok(Self::to_action(obs, &actor, i, k))
    }

    fn random_action(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)> {
        let mask = record.mask();
        let valid: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        let j = *valid.choose(rng).ok_or(Error::NoValidAction)?;
        let (i, k) = (j / K, j % K);
        let dim = PrimitiveType::ALL[k].param_dim();
        let mut continuous: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action = PrimitiveAction::at_point(PrimitiveType::ALL[k], obs, i, &continuous);
        continuous.resize(MAX_PARAMS, 0.0);
        Ok((
            action,
            StoredAction {
                primitive: k,
                index: i,
                continuous,
            },
        ))
    }

    fn update(&mut self, batch: &[&Transition]) -> Result<UpdateMetrics> {
        let targets = self.td_targets(batch)?;
        let (critic_loss, mean_q) = self.update_critic(batch, &targets)?;
        self.steps += 1;
        let actor_loss = if self.steps.is_multiple_of(self.config.actor_interval) {
            Some(self.update_actor(batch)?)
        } else {
            None
        };
        if self.steps.is_multiple_of(self.config.target_interval) {
            self.soft_update_targets()?;
        }
        Ok(UpdateMetrics {
            critic_loss,
            actor_loss,
            mean_q,
        })
    }

    fn learner_steps(&self) -> u64 {
        self.steps
    }

    fn save(&self) -> PolicyState {
        let mut state = PolicyState::default();
        self.actor_params.save("actor", &mut state);
        for (c, t) in self.critic_params.iter().enumerate() {
            t.save(&format!("critic{c}"), &mut state);
        }
        state.counters.push(("learner_steps".into(), self.steps));
        state
    }

    fn load(&mut self, state: &PolicyState) -> Result<()> {
        self.actor_params.load("actor", state)?;
        for (c, t) in self.critic_params.iter_mut().enumerate() {
            t.load(&format!("critic{c}"), state)?;
        }
        self.steps = state.counter("learner_steps")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(q: Vec<f64>, valid: Vec<bool>) -> CriticMap {
        CriticMap {
            n: q.len() / K,
            q,
            valid,
        }
    }

    #[test]
    fn eval_picks_lowest_index_on_ties() {
        let mut q = vec![0.0; 3 * K];
        q[7] = 1.0;
        q[11] = 1.0;
        let c = map(q, vec![true; 3 * K]);
        assert_eq!(select_eval(&c).unwrap(), (1, 2));
    }

    #[test]
    fn masked_entries_are_skipped() {
        let mut q = vec![0.0; 2 * K];
        q[0] = 5.0;
        let mut valid = vec![false; 2 * K];
        valid[9] = true;
        let c = map(q, valid);
        assert_eq!(select_eval(&c).unwrap(), (1, 4));
        let p = explore_probabilities(&c, 0.1, 0.1).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[9] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_masked_errors() {
        let c = map(vec![0.0; K], vec![false; K]);
        assert!(matches!(select_eval(&c), Err(Error::NoValidAction)));
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        assert!(select_explore(&c, 0.1, 0.1, &mut rng).is_err());
    }

    #[test]
    fn td_target_arithmetic() {
        assert!((td_target(-0.05, 0.99, false, -0.1) + 0.149).abs() < 1e-15);
        assert_eq!(td_target(-0.05, 0.99, true, -0.1), -0.05);
        assert_eq!(td_target(-0.05, 0.0, false, -0.1), -0.05);
    }

    #[test]
    fn buffer_wraps() {
        let rec = Arc::new(ObsRecord {
            features: vec![0.0; FEATURES],
            grasped: false,
            object_box: Aabb {
                min: nalgebra::Vector3::zeros(),
                max: nalgebra::Vector3::zeros(),
            },
        });
        let mut buf = ReplayBuffer::new(3);
        for r in 0..5 {
            buf.push(Transition {
                obs: rec.clone(),
                action: StoredAction {
                    primitive: 0,
                    index: 0,
                    continuous: vec![],
                },
                reward: -(r as f64),
                next_obs: rec.clone(),
                done: false,
            });
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.cursor(), 2);
        let rewards: Vec<f64> = buf.items().iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![-3.0, -4.0, -2.0]);
    }
}
