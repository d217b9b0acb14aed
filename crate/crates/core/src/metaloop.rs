//! Two-timescale training: fast updates of module and policy parameters over
//! short spans, slow updates of attention and value parameters over longer
//! concatenated meta-sequences, plus the baseline and ablation variants.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, CoreKind};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::rl::{
    collect_rollout, ppo_update, EnvPool, EpisodeStat, GaeConfig, LossReport, Optimizer, PpoConfig, Rollout,
    TaskDistribution, UpdateGroup,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantName {
    #[serde(rename = "metaRims")]
    MetaRims,
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "modular")]
    Modular,
    #[serde(rename = "metaLstm")]
    MetaLstm,
    #[serde(rename = "metaFlip")]
    MetaFlip,
    #[serde(rename = "slowLR")]
    SlowLr,
}

impl VariantName {
    pub const ALL: [VariantName; 6] = [
        VariantName::MetaRims,
        VariantName::Vanilla,
        VariantName::Modular,
        VariantName::MetaLstm,
        VariantName::MetaFlip,
        VariantName::SlowLr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::MetaRims => "metaRims",
            VariantName::Vanilla => "vanilla",
            VariantName::Modular => "modular",
            VariantName::MetaLstm => "metaLstm",
            VariantName::MetaFlip => "metaFlip",
            VariantName::SlowLr => "slowLR",
        }
    }

    pub fn core(self) -> CoreKind {
        match self {
            VariantName::Vanilla | VariantName::MetaLstm => CoreKind::Lstm,
            _ => CoreKind::Rims,
        }
    }

    pub fn two_loops(self) -> bool {
        matches!(self, VariantName::MetaRims | VariantName::MetaLstm | VariantName::MetaFlip)
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Fast and slow parameter sets. Single-loop variants keep everything fast.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub fast: Vec<ParamId>,
    pub slow: Vec<ParamId>,
}

impl ParamPartition {
    /// Splits the store by role for `variant`. Encoder and mission embedding
    /// go with `inputs_fast`, otherwise with the slow set.
    pub fn for_variant<T: Scalar>(variant: VariantName, store: &ParamStore<T>, inputs_fast: bool) -> Result<Self> {
        use ParamRole::*;
        let is_fast = |role: ParamRole| -> bool {
            match role {
                Encoder | MissionEmbedding => inputs_fast,
                PolicyHead => true,
                ValueHead => false,
                ModuleDynamics | ModuleQuery => variant != VariantName::MetaFlip,
                InputAttention | NullRow | CommAttention => variant == VariantName::MetaFlip,
                LstmCore => true,
            }
        };
        let mut part = Self {
            fast: Vec::new(),
            slow: Vec::new(),
        };
        for (id, p) in store.iter() {
            if !variant.two_loops() || is_fast(p.role) {
                part.fast.push(id);
            } else {
                part.slow.push(id);
            }
        }
        part.validate(store)?;
        Ok(part)
    }

    /// Disjoint, and together covering every parameter.
    pub fn validate<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let mut seen = vec![0u8; store.len()];
        for id in self.fast.iter().chain(&self.slow) {
            seen[id.index()] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            let name = store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
            return Err(Error::PartitionViolation(format!(
                "{name} belongs to {} partition members",
                seen[i]
            )));
        }
        Ok(())
    }

    pub fn is_single(&self) -> bool {
        self.slow.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Steps of BPTT per inner update; the outer span is four times this.
    pub t_in: usize,
    pub inner_per_outer: usize,
    /// Parallel environments per rollout.
    pub envs: usize,
    /// Rollout worker threads.
    pub workers: usize,
    /// Single worker and zero reported fps, for byte-identical re-runs.
    pub deterministic: bool,
    /// Episodes in the sliding window behind reported reward and success.
    pub window: usize,
    /// Whether encoder and mission embedding join the fast set.
    pub inputs_fast: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_in: 16,
            inner_per_outer: 4,
            envs: 16,
            workers: 8,
            deterministic: false,
            window: 100,
            inputs_fast: true,
        }
    }
}

impl LoopConfig {
    pub fn t_out(&self) -> usize {
        4 * self.t_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.inner_per_outer == 0 || self.envs == 0 || self.workers == 0 || self.window == 0 {
            return Err(Error::Config(
                "t_in, inner_per_outer, envs, workers and window must be positive".into(),
            ));
        }
        Ok(())
    }

    fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Inner,
    Outer,
    Single,
}

/// One row of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub frames: u64,
    pub updates: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub loss_clip: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub fps: f64,
    pub phase: Phase,
    /// Episodes in the window behind `mean_reward` and `success_rate`.
    pub window_episodes: usize,
}

/// Whether training should go on after an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// A variant bound to an agent, its optimizers and its environments.
pub struct Trainer<T> {
    pub variant: VariantName,
    pub agent: Agent<T>,
    pub partition: ParamPartition,
    pub loop_cfg: LoopConfig,
    pub ppo: PpoConfig,
    pub gae: GaeConfig,
    fast_opt: Optimizer<T>,
    slow_opt: Optimizer<T>,
    inner_pool: EnvPool<T>,
    outer_pool: EnvPool<T>,
    frames: u64,
    updates: u64,
    window: VecDeque<EpisodeStat>,
    active_sizes_ok: bool,
}

/// Builds the trainer for a named variant.
#[allow(clippy::too_many_arguments)]
pub fn make_variant<T: Scalar>(
    name: &str,
    mut agent_cfg: AgentConfig,
    loop_cfg: LoopConfig,
    ppo: PpoConfig,
    gae: GaeConfig,
    tasks: TaskDistribution,
    seed: u64,
) -> Result<Trainer<T>> {
    let variant: VariantName = name.parse()?;
    agent_cfg.core = variant.core();
    let agent = Agent::new(agent_cfg, seed)?;
    Trainer::new(variant, agent, loop_cfg, ppo, gae, tasks, seed)
}

impl<T: Scalar> Trainer<T> {
    /// Wraps an existing agent, e.g. one resumed from a checkpoint.
    pub fn new(
        variant: VariantName,
        agent: Agent<T>,
        loop_cfg: LoopConfig,
        ppo: PpoConfig,
        gae: GaeConfig,
        tasks: TaskDistribution,
        seed: u64,
    ) -> Result<Self> {
        loop_cfg.validate()?;
        ppo.validate()?;
        gae.validate()?;
        if agent.cfg.core != variant.core() {
            return Err(Error::Config(format!(
                "{variant} needs a {:?} core, the agent has {:?}",
                variant.core(),
                agent.cfg.core
            )));
        }
        let partition = ParamPartition::for_variant(variant, &agent.store, loop_cfg.inputs_fast)?;
        let inner_pool = EnvPool::new(&agent, tasks.clone(), loop_cfg.envs, seed.wrapping_add(1))?;
        let outer_pool = EnvPool::new(&agent, tasks, loop_cfg.envs, seed.wrapping_add(2))?;
        Ok(Self {
            variant,
            fast_opt: Optimizer::new(&ppo),
            slow_opt: Optimizer::new(&ppo),
            agent,
            partition,
            loop_cfg,
            ppo,
            gae,
            inner_pool,
            outer_pool,
            frames: 0,
            updates: 0,
            window: VecDeque::new(),
            active_sizes_ok: true,
        })
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Whether every RIM step seen in training selected exactly k modules.
    pub fn active_sizes_ok(&self) -> bool {
        self.active_sizes_ok
    }

    /// Update groups of a single-loop step: everything at α, except the
    /// attention parameters of slowLR at α/4.
    pub fn single_groups(&self) -> Vec<UpdateGroup> {
        let lr = self.ppo.lr;
        if self.variant != VariantName::SlowLr {
            return vec![UpdateGroup {
                ids: self.partition.fast.clone(),
                lr,
            }];
        }
        let (attn, rest): (Vec<ParamId>, Vec<ParamId>) = self
            .partition
            .fast
            .iter()
            .partition(|&&id| self.agent.store.get(id).role.is_attention());
        vec![
            UpdateGroup { ids: rest, lr },
            UpdateGroup { ids: attn, lr: lr / 4.0 },
        ]
    }

    fn record(&mut self, ro: &Rollout<T>) {
        self.frames += ro.frames() as u64;
        if self.agent.cfg.core == CoreKind::Rims {
            let k = self.agent.cfg.rim.n_active;
            self.active_sizes_ok &= ro.active.iter().flatten().all(|s| s.len() == k);
        }
        for e in &ro.episodes {
            self.window.push_back(e.clone());
            if self.window.len() > self.loop_cfg.window {
                self.window.pop_front();
            }
        }
    }

    fn metrics(&self, phase: Phase, loss: LossReport, frames: usize, started: Instant) -> UpdateMetrics {
        let n = self.window.len();
        let denom = n.max(1) as f64;
        let fps = if self.loop_cfg.deterministic {
            0.0
        } else {
            frames as f64 / started.elapsed().as_secs_f64().max(1e-9)
        };
        UpdateMetrics {
            frames: self.frames,
            updates: self.updates,
            mean_reward: self.window.iter().map(|e| e.reward).sum::<f64>() / denom,
            success_rate: self.window.iter().filter(|e| e.success).count() as f64 / denom,
            loss_clip: loss.clip,
            loss_value: loss.value,
            entropy: loss.entropy,
            fps,
            phase,
            window_episodes: n,
        }
    }

    /// Fast update over one span of `t_in` steps; the value head is frozen
    /// and the loss is the clipped surrogate plus the entropy bonus.
    pub fn inner_update(&mut self) -> Result<UpdateMetrics> {
        let started = Instant::now();
        let workers = self.loop_cfg.effective_workers();
        let ro = collect_rollout(&mut self.inner_pool, &self.agent, self.loop_cfg.t_in, true, workers)?;
        self.record(&ro);
        let groups = [UpdateGroup {
            ids: self.partition.fast.clone(),
            lr: self.ppo.lr,
        }];
        let loss = ppo_update(&mut self.agent, &mut self.fast_opt, &ro, &groups, &self.ppo, &self.gae, false)?;
        self.updates += 1;
        Ok(self.metrics(Phase::Inner, loss, ro.frames(), started))
    }

    /// Slow update over a fresh meta-sequence of `4·t_in` steps; the
    /// recurrent state carries across episode ends inside the sequence.
    pub fn outer_update(&mut self) -> Result<UpdateMetrics> {
        let started = Instant::now();
        let workers = self.loop_cfg.effective_workers();
        self.outer_pool.restart_all()?;
        let ro = collect_rollout(&mut self.outer_pool, &self.agent, self.loop_cfg.t_out(), false, workers)?;
        self.record(&ro);
        let groups = [UpdateGroup {
            ids: self.partition.slow.clone(),
            lr: self.ppo.slow_lr(),
        }];
        let loss = ppo_update(&mut self.agent, &mut self.slow_opt, &ro, &groups, &self.ppo, &self.gae, true)?;
        self.updates += 1;
        Ok(self.metrics(Phase::Outer, loss, ro.frames(), started))
    }

    /// Plain PPO on every parameter over one span of `t_in` steps.
    pub fn single_update(&mut self) -> Result<UpdateMetrics> {
        let started = Instant::now();
        let workers = self.loop_cfg.effective_workers();
        let ro = collect_rollout(&mut self.inner_pool, &self.agent, self.loop_cfg.t_in, true, workers)?;
        self.record(&ro);
        let groups = self.single_groups();
        let loss = ppo_update(&mut self.agent, &mut self.fast_opt, &ro, &groups, &self.ppo, &self.gae, true)?;
        self.updates += 1;
        Ok(self.metrics(Phase::Single, loss, ro.frames(), started))
    }

    /// Frames the next update will consume.
    fn next_frames(&self) -> u64 {
        let span = if self.next_is_outer() {
            self.loop_cfg.t_out()
        } else {
            self.loop_cfg.t_in
        };
        (span * self.loop_cfg.envs) as u64
    }

    fn next_is_outer(&self) -> bool {
        self.variant.two_loops() && self.updates % (self.loop_cfg.inner_per_outer as u64 + 1) == self.loop_cfg.inner_per_outer as u64
    }

    /// One update of whichever kind comes next in the cycle.
    pub fn step(&mut self) -> Result<UpdateMetrics> {
        if !self.variant.two_loops() {
            self.single_update()
        } else if self.next_is_outer() {
            self.outer_update()
        } else {
            self.inner_update()
        }
    }

    /// Repeats `inner_per_outer` inner updates and one outer update (or
    /// single-loop updates) while the next update fits in `total_frames`.
    /// `sink` sees every update and may stop training early.
    pub fn train(
        &mut self,
        total_frames: u64,
        mut sink: impl FnMut(&UpdateMetrics, &Agent<T>) -> Result<Flow>,
    ) -> Result<()> {
        while self.frames + self.next_frames() <= total_frames {
            let m = self.step()?;
            if sink(&m, &self.agent)? == Flow::Stop {
                break;
            }
        }
        Ok(())
    }
}
