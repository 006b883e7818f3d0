//! Comparison policies: P-DQN, RAPS and HACMan with primitive logits.
//!
//! P-DQN and RAPS see the scene through one pooled feature and regress
//! locations in (-1, 1)³, which are mapped onto an area of interest before
//! execution. HACMan(logit) keeps per-point features but picks the point by
//! a single Q per point and the primitive from per-point logits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{
    stack_features, AgentConfig, NetworkConfig, ObsRecord, Policy, PolicyState, StoredAction,
    Trainable, Transition, UpdateMetrics, FEATURES, K,
};
use crate::env::{Aabb, Observation};
use crate::error::{Error, Result};
use crate::primitives::{map_regressed_location, PrimitiveAction, PrimitiveType};
use crate::tensor::{Activation, Graph, Mlp, MlpSpec, NodeId, ParamStore, PointEncoder, Tensor};

/// Logits are tanh-bounded outputs multiplied by this.
pub const LOGIT_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Pdqn,
    Raps,
    HacmanLogit,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Pdqn => "pdqn",
            BaselineKind::Raps => "raps",
            BaselineKind::HacmanLogit => "hacman_logit",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdqn" => Ok(BaselineKind::Pdqn),
            "raps" => Ok(BaselineKind::Raps),
            "hacman_logit" => Ok(BaselineKind::HacmanLogit),
            _ => Err(Error::InvalidArgument(format!("unknown baseline {s:?}"))),
        }
    }
}

/// Offsets of each primitive's block in a concatenated vector where every
/// primitive contributes its parameters plus `extra` location dims.
pub fn block_offsets(extra: usize) -> [usize; K + 1] {
    let mut out = [0; K + 1];
    for k in 0..K {
        out[k + 1] = out[k] + PrimitiveType::ALL[k].param_dim() + extra;
    }
    out
}

/// Index of the largest valid score, lowest index on ties.
pub fn argmax_masked(scores: &[f64], valid: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for j in 0..scores.len() {
        if valid[j] && best.is_none_or(|b| scores[j] > scores[b]) {
            best = Some(j);
        }
    }
    best.ok_or(Error::NoValidAction)
}

/// Softmax probabilities of `scores / temperature` over the valid entries.
pub fn softmax_masked(scores: &[f64], valid: &[bool], temperature: f64) -> Result<Vec<f64>> {
    let max = (0..scores.len())
        .filter(|&j| valid[j])
        .map(|j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidAction);
    }
    let w: Vec<f64> = (0..scores.len())
        .map(|j| {
            if valid[j] {
                ((scores[j] - max) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

pub fn sample_softmax<R: Rng + ?Sized>(
    scores: &[f64],
    valid: &[bool],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    let p = softmax_masked(scores, valid, temperature)?;
    let mut pick = rng.gen::<f64>();
    for (j, pj) in p.iter().enumerate() {
        if valid[j] && pick < *pj {
            return Ok(j);
        }
        pick -= pj;
    }
    (0..p.len())
        .rev()
        .find(|&j| valid[j] && p[j] > 0.0)
        .ok_or(Error::NoValidAction)
}

fn admissible_mask(grasped: bool) -> Vec<bool> {
    PrimitiveType::ALL
        .iter()
        .map(|p| p.allowed(grasped))
        .collect()
}

enum Encoder {
    /// Per-point MLP and max-pool: one row per cloud.
    Global(Mlp),
    /// Segmentation-style: one row per point.
    PerPoint(PointEncoder),
}

impl Encoder {
    fn new<R: Rng>(
        per_point: bool,
        net: &NetworkConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<(Self, usize)> {
        if per_point {
            let e = PointEncoder::new(
                &net.encoder_spec(),
                store,
                &format!("{prefix}.encoder"),
                rng,
            )?;
            let w = e.output_width();
            Ok((Encoder::PerPoint(e), w))
        } else {
            let spec = net.encoder_spec();
            let width = *spec.local.last().unwrap_or(&FEATURES);
            let mlp = Mlp::new(
                MlpSpec::new(spec.local, Activation::Relu),
                store,
                &format!("{prefix}.encoder"),
                rng,
            )?;
            Ok((Encoder::Global(mlp), width))
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        match self {
            Encoder::Global(mlp) => {
                let h = mlp.forward(g, store, slot, x)?;
                g.segment_max(h, clouds)
            }
            Encoder::PerPoint(e) => e.forward(g, store, slot, x, clouds),
        }
    }
}

struct Net {
    encoder: Encoder,
    head: Mlp,
}

impl Net {
    fn actor<R: Rng>(
        per_point: bool,
        out: usize,
        net: &NetworkConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let (encoder, width) = Encoder::new(per_point, net, store, "actor", rng)?;
        let head = Mlp::new(
            MlpSpec::new(vec![width, net.head_hidden, out], Activation::Tanh),
            store,
            "actor.head",
            rng,
        )?;
        Ok(Self { encoder, head })
    }

    fn critic<R: Rng>(
        per_point: bool,
        action: usize,
        out: usize,
        net: &NetworkConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let (encoder, width) = Encoder::new(per_point, net, store, prefix, rng)?;
        let head = Mlp::new(
            MlpSpec::new(
                vec![width + action, net.head_hidden, out],
                Activation::Identity,
            ),
            store,
            &format!("{prefix}.head"),
            rng,
        )?;
        Ok(Self { encoder, head })
    }

    fn act(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        let f = self.encoder.forward(g, store, slot, x, clouds)?;
        self.head.forward(g, store, slot, f)
    }

    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        x: NodeId,
        clouds: usize,
    ) -> Result<NodeId> {
        self.encoder.forward(g, store, slot, x, clouds)
    }

    fn score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slot: Option<usize>,
        f: NodeId,
        action: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat_cols(&[f, action])?;
        self.head.forward(g, store, slot, cat)
    }
}

/// One of the three comparison methods, trained with the shared TD3 recipe.
pub struct Baseline {
    pub kind: BaselineKind,
    pub config: AgentConfig,
    pub net: NetworkConfig,
    workspace: Aabb,
    actor: Net,
    pub actor_params: Trainable,
    critics: Vec<Net>,
    pub critic_params: Vec<Trainable>,
    steps: u64,
}

impl Baseline {
    pub fn new<R: Rng>(
        kind: BaselineKind,
        config: AgentConfig,
        net: NetworkConfig,
        workspace: Aabb,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let per_point = kind == BaselineKind::HacmanLogit;
        let dim = Self::action_dim(kind);
        let mut store = ParamStore::new();
        let actor = Net::actor(per_point, dim, &net, &mut store, rng)?;
        let actor_params = Trainable::new(store, config.learning_rate);
        let q_out = if kind == BaselineKind::Pdqn { K } else { 1 };
        let mut critics = Vec::new();
        let mut critic_params = Vec::new();
        for c in 0..if config.twin_critics { 2 } else { 1 } {
            let mut store = ParamStore::new();
            critics.push(Net::critic(
                per_point,
                dim,
                q_out,
                &net,
                &mut store,
                &format!("critic{c}"),
                rng,
            )?);
            critic_params.push(Trainable::new(store, config.learning_rate));
        }
        Ok(Self {
            kind,
            config,
            net,
            workspace,
            actor,
            actor_params,
            critics,
            critic_params,
            steps: 0,
        })
    }

    /// Width of the continuous action vector.
    pub fn action_dim(kind: BaselineKind) -> usize {
        match kind {
            BaselineKind::Pdqn => block_offsets(3)[K],
            BaselineKind::Raps => block_offsets(3)[K] + K,
            BaselineKind::HacmanLogit => block_offsets(0)[K] + K,
        }
    }

    fn logits(&self, a: &[f64]) -> Vec<f64> {
        let start = a.len() - K;
        a[start..].iter().map(|v| v * LOGIT_SCALE).collect()
    }

    fn noisy(&self, mut a: Vec<f64>, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        if self.config.action_noise > 0.0 {
            let normal = Normal::new(0.0, self.config.action_noise).expect("positive noise");
            for v in &mut a {
                *v = (*v + normal.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        a
    }

    /// Actor output for one observation (one row, or one row per point).
    fn actor_output(&self, record: &ObsRecord) -> Result<Tensor> {
        let x = stack_features(&[record])?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let a = self
            .actor
            .act(&mut g, &self.actor_params.store, None, xi, 1)?;
        Ok(g.value(a).clone())
    }

    /// Critic scores of given actions for one observation.
    pub fn critic_scores(&self, record: &ObsRecord, actions: Tensor) -> Result<Tensor> {
        let x = stack_features(&[record])?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let store = &self.critic_params[0].store;
        let f = self.critics[0].encode(&mut g, store, None, xi, 1)?;
        let ai = g.input(actions);
        let q = self.critics[0].score(&mut g, store, None, f, ai)?;
        Ok(g.value(q).clone())
    }

    /// Executable action from a chosen primitive and its continuous vector.
    fn regressed_action(&self, record: &ObsRecord, k: usize, a: &[f64]) -> PrimitiveAction {
        let off = block_offsets(3);
        let prim = PrimitiveType::ALL[k];
        let dim = prim.param_dim();
        let block = &a[off[k]..off[k + 1]];
        let raw = nalgebra::Vector3::new(block[dim], block[dim + 1], block[dim + 2]);
        PrimitiveAction {
            primitive: prim,
            location: map_regressed_location(&raw, prim, &record.object_box, &self.workspace),
            location_index: None,
            params: block[..dim].to_vec(),
        }
    }

    fn choose(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        a_all: Tensor,
        explore: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)> {
        let admissible = admissible_mask(record.grasped);
        match self.kind {
            BaselineKind::Pdqn => {
                let a = a_all.row(0).to_vec();
                let q = self.critic_scores(record, Tensor::from_vec(1, a.len(), a.clone())?)?;
                let k = if explore {
                    sample_softmax(q.data(), &admissible, self.config.temperature, rng)?
                } else {
                    argmax_masked(q.data(), &admissible)?
                };
                Ok((
                    self.regressed_action(record, k, &a),
                    StoredAction {
                        primitive: k,
                        index: 0,
                        continuous: a,
                    },
                ))
            }
            BaselineKind::Raps => {
                let a = a_all.row(0).to_vec();
                let logits = self.logits(&a);
                let k = if explore {
                    sample_softmax(&logits, &admissible, 1.0, rng)?
                } else {
                    argmax_masked(&logits, &admissible)?
                };
                Ok((
                    self.regressed_action(record, k, &a),
                    StoredAction {
                        primitive: k,
                        index: 0,
                        continuous: a,
                    },
                ))
            }
            BaselineKind::HacmanLogit => {
                let q = self.critic_scores(record, a_all.clone())?;
                let i = argmax_masked(q.data(), &vec![true; q.len()])?;
                let a = a_all.row(i).to_vec();
                let label = record.label(i);
                let valid: Vec<bool> = PrimitiveType::ALL
                    .iter()
                    .map(|p| p.valid_at(label, record.grasped))
                    .collect();
                let logits = self.logits(&a);
                let k = if explore {
                    sample_softmax(&logits, &valid, 1.0, rng)?
                } else {
                    argmax_masked(&logits, &valid)?
                };
                let off = block_offsets(0);
                let action = PrimitiveAction::at_point(
                    PrimitiveType::ALL[k],
                    obs,
                    i,
                    &a[off[k]..off[k + 1]],
                );
                Ok((
                    action,
                    StoredAction {
                        primitive: k,
                        index: i,
                        continuous: a,
                    },
                ))
            }
        }
    }

    /// Chooses the index the target policy acts on for every next state and
    /// returns the minimum target-critic value there.
    fn target_values(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let next: Vec<&ObsRecord> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
        let b = next.len();
        let n = next[0].len();
        let x = stack_features(&next)?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let a = self
            .actor
            .act(&mut g, &self.actor_params.target, None, xi, b)?;
        let mut per_critic = Vec::new();
        for (c, net) in self.critics.iter().enumerate() {
            let store = &self.critic_params[c].target;
            let f = net.encode(&mut g, store, None, xi, b)?;
            let q = net.score(&mut g, store, None, f, a)?;
            per_critic.push(g.value(q).clone());
        }
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let q = match self.kind {
                BaselineKind::Pdqn => {
                    let k =
                        argmax_masked(per_critic[0].row(bi), &admissible_mask(next[bi].grasped))?;
                    per_critic
                        .iter()
                        .map(|t| t.get(bi, k))
                        .fold(f64::INFINITY, f64::min)
                }
                BaselineKind::Raps => per_critic
                    .iter()
                    .map(|t| t.get(bi, 0))
                    .fold(f64::INFINITY, f64::min),
                BaselineKind::HacmanLogit => {
                    let rows = &per_critic[0].data()[bi * n..(bi + 1) * n];
                    let i = argmax_masked(rows, &vec![true; n])?;
                    per_critic
                        .iter()
                        .map(|t| t.get(bi * n + i, 0))
                        .fold(f64::INFINITY, f64::min)
                }
            };
            out.push(q);
        }
        Ok(out)
    }

    pub fn td_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let q = self.target_values(batch)?;
        Ok(batch
            .iter()
            .zip(q)
            .map(|(t, q)| crate::agent::td_target(t.reward, self.config.gamma, t.done, q))
            .collect())
    }

    pub fn update_critic(&mut self, batch: &[&Transition], targets: &[f64]) -> Result<(f64, f64)> {
        let records: Vec<&ObsRecord> = batch.iter().map(|t| t.obs.as_ref()).collect();
        let b = records.len();
        let n = records[0].len();
        let x = stack_features(&records)?;
        let dim = Self::action_dim(self.kind);
        let mut actions = Vec::with_capacity(b * dim);
        for t in batch {
            if t.action.continuous.len() != dim {
                return Err(Error::ShapeMismatch("stored action width".into()));
            }
            actions.extend_from_slice(&t.action.continuous);
        }
        let actions = Tensor::from_vec(b, dim, actions)?;
        let y = Tensor::from_vec(b, 1, targets.to_vec())?;
        let mut first = (0.0, 0.0);
        for c in 0..self.critics.len() {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let store = &self.critic_params[c].store;
            let f = self.critics[c].encode(&mut g, store, Some(0), xi, b)?;
            let f = if self.kind == BaselineKind::HacmanLogit {
                let rows: Vec<usize> = batch
                    .iter()
                    .enumerate()
                    .map(|(bi, t)| bi * n + t.action.index)
                    .collect();
                g.gather_rows(f, &rows)?
            } else {
                f
            };
            let ai = g.input(actions.clone());
            let q = self.critics[c].score(&mut g, store, Some(0), f, ai)?;
            let q = if self.kind == BaselineKind::Pdqn {
                let idx: Vec<(usize, usize)> = batch
                    .iter()
                    .enumerate()
                    .map(|(bi, t)| (bi, t.action.primitive))
                    .collect();
                g.gather_elems(q, &idx)?
            } else {
                q
            };
            let mean_q = g.value(q).data().iter().sum::<f64>() / b as f64;
            let loss = g.mse(q, y.clone())?;
            let value = g.value(loss).item();
            let grads = g.backward(loss)?.for_slot(0, &self.critic_params[c].store);
            self.critic_params[c].step(&grads)?;
            if c == 0 {
                first = (value, mean_q);
            }
        }
        Ok(first)
    }

    pub fn update_actor(&mut self, batch: &[&Transition]) -> Result<f64> {
        let records: Vec<&ObsRecord> = batch.iter().map(|t| t.obs.as_ref()).collect();
        let b = records.len();
        let x = stack_features(&records)?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let a = self
            .actor
            .act(&mut g, &self.actor_params.store, Some(0), xi, b)?;
        let store = &self.critic_params[0].store;
        let f = self.critics[0].encode(&mut g, store, None, xi, b)?;
        let q = self.critics[0].score(&mut g, store, None, f, a)?;
        let loss = if self.kind == BaselineKind::Pdqn {
            let mut w = Vec::with_capacity(b * K);
            let mut count = 0usize;
            for r in &records {
                for m in admissible_mask(r.grasped) {
                    w.push(if m { 1.0 } else { 0.0 });
                    count += m as usize;
                }
            }
            let w: Vec<f64> = w.into_iter().map(|v| -v / count.max(1) as f64).collect();
            g.weighted_sum(q, Tensor::from_vec(b, K, w)?)?
        } else {
            let m = g.mean(q);
            g.scale(m, -1.0)
        };
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.for_slot(0, &self.actor_params.store);
        self.actor_params.step(&grads)?;
        Ok(value)
    }
}

impl Policy for Baseline {
    fn name(&self) -> &'static str {
        self.kind.name()
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
        let out = self.actor_output(record)?;
        let out = if explore {
            let (rows, cols) = (out.rows(), out.cols());
            Tensor::from_vec(rows, cols, self.noisy(out.into_vec(), rng))?
        } else {
            out
        };
        self.choose(obs, record, out, explore, rng)
    }

    fn random_action(
        &self,
        obs: &Observation,
        record: &ObsRecord,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(PrimitiveAction, StoredAction)> {
        let dim = Self::action_dim(self.kind);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match self.kind {
            BaselineKind::Pdqn | BaselineKind::Raps => {
                let allowed: Vec<usize> = (0..K)
                    .filter(|&k| PrimitiveType::ALL[k].allowed(record.grasped))
                    .collect();
                let k = *allowed.choose(rng).ok_or(Error::NoValidAction)?;
                Ok((
                    self.regressed_action(record, k, &a),
                    StoredAction {
                        primitive: k,
                        index: 0,
                        continuous: a,
                    },
                ))
            }
            BaselineKind::HacmanLogit => {
                let i = rng.gen_range(0..record.len());
                let label = record.label(i);
                let valid: Vec<usize> = (0..K)
                    .filter(|&k| PrimitiveType::ALL[k].valid_at(label, record.grasped))
                    .collect();
                let k = *valid.choose(rng).ok_or(Error::NoValidAction)?;
                let off = block_offsets(0);
                let action = PrimitiveAction::at_point(
                    PrimitiveType::ALL[k],
                    obs,
                    i,
                    &a[off[k]..off[k + 1]],
                );
                Ok((
                    action,
                    StoredAction {
                        primitive: k,
                        index: i,
                        continuous: a,
                    },
                ))
            }
        }
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
            self.actor_params.soft_update(self.config.tau)?;
            for c in &mut self.critic_params {
                c.soft_update(self.config.tau)?;
            }
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
