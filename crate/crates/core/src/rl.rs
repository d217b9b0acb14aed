//! PPO with generalized advantage estimation on batched recurrent rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{act, ActMode, Agent, CoreState, CoreVars, Network};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gridworld::{Action, GridEnv, Observation, TaskSpec, NUM_ACTIONS};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.99,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "gamma and lambda must lie in [0, 1], got {} and {}",
                self.gamma, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    /// c₁
    pub value_coef: f64,
    /// c₂
    pub entropy_coef: f64,
    pub epochs: usize,
    /// Environments are split into this many minibatches per epoch.
    pub minibatches: usize,
    /// α, the fast (inner-loop) rate.
    pub lr: f64,
    /// β, the slow (outer-loop) rate; `None` means β = α.
    pub outer_lr: Option<f64>,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatches: 1,
            lr: 1e-3,
            outer_lr: None,
            max_grad_norm: 0.5,
            normalize_advantages: false,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(self.clip_eps > 0.0) {
            return err("clip_eps must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return err("loss coefficients must be non-negative");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return err("epochs and minibatches must be positive");
        }
        if self.lr < 0.0 || self.outer_lr.is_some_and(|b| b < 0.0) || self.max_grad_norm < 0.0 {
            return err("learning rates and the gradient cap must be non-negative");
        }
        Ok(())
    }

    pub fn slow_lr(&self) -> f64 {
        self.outer_lr.unwrap_or(self.lr)
    }
}

// ---- task sampling and environment pools --------------------------------

/// Weighted list of task families; each new episode draws one.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistribution {
    entries: Vec<(TaskSpec, f64)>,
}

impl TaskDistribution {
    pub fn new(entries: Vec<(TaskSpec, f64)>) -> Result<Self> {
        if entries.is_empty() || entries.iter().any(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("task distribution needs positive weights".into()));
        }
        for (t, _) in &entries {
            t.validate()?;
        }
        Ok(Self { entries })
    }

    pub fn single(spec: TaskSpec) -> Self {
        Self {
            entries: vec![(spec, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(TaskSpec, f64)] {
        &self.entries
    }

    /// A task with a fresh instance seed.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TaskSpec {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = &self.entries[self.entries.len() - 1].0;
        for (t, w) in &self.entries {
            if u < *w {
                pick = t;
                break;
            }
            u -= w;
        }
        pick.clone().with_seed(rng.gen())
    }
}

/// A finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStat {
    pub reward: f64,
    pub success: bool,
    pub length: usize,
}

/// One environment with its own rng stream.
#[derive(Clone, Debug)]
struct Slot {
    env: GridEnv,
    obs: Observation,
    rng: ChaCha8Rng,
    length: usize,
}

impl Slot {
    fn new(tasks: &TaskDistribution, mut rng: ChaCha8Rng) -> Result<Self> {
        let spec = tasks.sample(&mut rng);
        let env = GridEnv::new(&spec)?;
        Ok(Self {
            obs: env.observe(),
            env,
            rng,
            length: 0,
        })
    }

    fn restart(&mut self, tasks: &TaskDistribution) -> Result<()> {
        let spec = tasks.sample(&mut self.rng);
        self.env = GridEnv::new(&spec)?;
        self.obs = self.env.observe();
        self.length = 0;
        Ok(())
    }
}

/// Batched environments plus the agent's recurrent state for each.
#[derive(Clone, Debug)]
pub struct EnvPool<T> {
    slots: Vec<Slot>,
    tasks: TaskDistribution,
    pub state: CoreState<T>,
}

impl<T: Scalar> EnvPool<T> {
    pub fn new(agent: &Agent<T>, tasks: TaskDistribution, envs: usize, seed: u64) -> Result<Self> {
        if envs == 0 {
            return Err(Error::Config("need at least one environment".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let slots = (0..envs)
            .map(|_| Slot::new(&tasks, ChaCha8Rng::seed_from_u64(master.gen())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            tasks,
            state: agent.initial_state(envs),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn observations(&self) -> Vec<&Observation> {
        self.slots.iter().map(|s| &s.obs).collect()
    }

    /// Starts fresh episodes everywhere and zeroes the recurrent state.
    pub fn restart_all(&mut self) -> Result<()> {
        for s in &mut self.slots {
            s.restart(&self.tasks)?;
        }
        for b in 0..self.slots.len() {
            self.state.reset_row(b);
        }
        Ok(())
    }
}

// ---- rollouts ------------------------------------------------------------

/// `T` steps of `B` environments, time-major.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    pub obs: Vec<Vec<Observation>>,
    pub actions: Vec<Vec<usize>>,
    /// Behaviour-policy log-probabilities (θ_old).
    pub log_probs: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub rewards: Vec<Vec<T>>,
    pub dones: Vec<Vec<bool>>,
    /// Whether the recurrent state was zeroed before step `t`.
    pub resets: Vec<Vec<bool>>,
    /// Active module sets per step and environment (RIM core only).
    pub active: Vec<Vec<Vec<usize>>>,
    /// V(s_T) for the state after the last step.
    pub bootstrap: Vec<T>,
    pub init_state: CoreState<T>,
    pub episodes: Vec<EpisodeStat>,
}

impl<T: Scalar> Rollout<T> {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn batch(&self) -> usize {
        self.init_state.batch()
    }

    pub fn frames(&self) -> usize {
        self.steps() * self.batch()
    }

    /// Time indices at which an episode ended, per environment.
    pub fn boundaries(&self, b: usize) -> Vec<usize> {
        (0..self.steps()).filter(|&t| self.dones[t][b]).collect()
    }
}

/// Per-step outputs used during collection and re-evaluation.
struct Eval<T> {
    log_probs_all: Vec<T>,
    values: Vec<T>,
    state: CoreState<T>,
    active: Option<Vec<Vec<usize>>>,
}

fn eval_step<T: Scalar>(
    agent: &Agent<T>,
    state: &CoreState<T>,
    obs: &[&Observation],
) -> Result<Eval<T>> {
    let mut tape = Tape::with_params(&agent.store);
    let vars = state.to_vars(&mut tape);
    let out = agent.net().step(&mut tape, vars, obs, None)?;
    let lp = tape.log_softmax(out.logits)?;
    Ok(Eval {
        log_probs_all: tape.value(lp).data().to_vec(),
        values: tape.value(out.value).data().to_vec(),
        state: out.state.to_state(&tape, out.active.clone(), out.scores),
        active: out.active,
    })
}

/// One worker's share of a rollout.
struct Chunk<T> {
    obs: Vec<Vec<Observation>>,
    actions: Vec<Vec<usize>>,
    log_probs: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    rewards: Vec<Vec<T>>,
    dones: Vec<Vec<bool>>,
    resets: Vec<Vec<bool>>,
    active: Vec<Vec<Vec<usize>>>,
    bootstrap: Vec<T>,
    episodes: Vec<EpisodeStat>,
    state: CoreState<T>,
}

fn collect_chunk<T: Scalar>(
    agent: &Agent<T>,
    slots: &mut [Slot],
    tasks: &TaskDistribution,
    mut state: CoreState<T>,
    steps: usize,
    reset_on_done: bool,
    mode: ActMode,
) -> Result<Chunk<T>> {
    let b = slots.len();
    let mut c = Chunk {
        obs: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        resets: Vec::with_capacity(steps),
        active: Vec::with_capacity(steps),
        bootstrap: Vec::new(),
        episodes: Vec::new(),
        state: state.clone(),
    };
    let mut reset_next = vec![false; b];
    for _ in 0..steps {
        let obs: Vec<Observation> = slots.iter().map(|s| s.obs.clone()).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let ev = eval_step(agent, &state, &refs)?;
        let mut actions = Vec::with_capacity(b);
        let mut lps = Vec::with_capacity(b);
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        for (i, slot) in slots.iter_mut().enumerate() {
            let row = &ev.log_probs_all[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS];
            let a = act(row, &mut slot.rng, mode)?;
            actions.push(a);
            lps.push(row[a]);
            let r = slot.env.step(Action::from_index(a)?)?;
            slot.length += 1;
            rewards.push(T::lit(r.reward));
            dones.push(r.done);
            if r.done {
                c.episodes.push(EpisodeStat {
                    reward: r.reward,
                    success: r.success,
                    length: slot.length,
                });
                slot.restart(tasks)?;
            } else {
                slot.obs = r.obs;
            }
        }
        c.resets.push(std::mem::take(&mut reset_next));
        c.obs.push(obs);
        state = ev.state;
        if reset_on_done {
            for (i, &d) in dones.iter().enumerate() {
                if d {
                    state.reset_row(i);
                }
            }
            reset_next = dones.clone();
        } else {
            reset_next = vec![false; b];
        }
        c.actions.push(actions);
        c.log_probs.push(lps);
        c.values.push(ev.values);
        c.rewards.push(rewards);
        c.dones.push(dones);
        c.active.push(ev.active.unwrap_or_default());
    }
    let refs: Vec<&Observation> = slots.iter().map(|s| &s.obs).collect();
    c.bootstrap = eval_step(agent, &state, &refs)?.values;
    c.state = state;
    Ok(c)
}

/// Runs the current policy for `steps` steps in every environment.
///
/// With `reset_on_done` the recurrent state is zeroed whenever an episode
/// ends; otherwise it carries across episode boundaries. `workers > 1`
/// splits the environments into that many contiguous groups collected in
/// parallel; the result does not depend on the split.
pub fn collect_rollout<T: Scalar>(
    pool: &mut EnvPool<T>,
    agent: &Agent<T>,
    steps: usize,
    reset_on_done: bool,
    workers: usize,
) -> Result<Rollout<T>> {
    let b = pool.len();
    let workers = workers.clamp(1, b);
    let per = b.div_ceil(workers);
    let init_state = pool.state.clone();
    let tasks = pool.tasks.clone();
    let groups: Vec<(usize, usize)> = (0..b).step_by(per).map(|s| (s, (s + per).min(b))).collect();
    let states: Vec<CoreState<T>> = groups.iter().map(|&(s, e)| init_state.rows(s..e)).collect();
    let mut slot_groups: Vec<&mut [Slot]> = Vec::with_capacity(groups.len());
    let mut rest: &mut [Slot] = &mut pool.slots;
    for &(s, e) in &groups {
        let (head, tail) = rest.split_at_mut(e - s);
        slot_groups.push(head);
        rest = tail;
    }
    let run = |(slots, state): (&mut [Slot], CoreState<T>)| {
        collect_chunk(agent, slots, &tasks, state, steps, reset_on_done, ActMode::Sample)
    };
    let chunks: Vec<Chunk<T>> = if groups.len() > 1 {
        slot_groups.into_par_iter().zip(states).map(run).collect::<Result<_>>()?
    } else {
        slot_groups.into_iter().zip(states).map(run).collect::<Result<_>>()?
    };
    let mut out = Rollout {
        obs: vec![Vec::with_capacity(b); steps],
        actions: vec![Vec::with_capacity(b); steps],
        log_probs: vec![Vec::with_capacity(b); steps],
        values: vec![Vec::with_capacity(b); steps],
        rewards: vec![Vec::with_capacity(b); steps],
        dones: vec![Vec::with_capacity(b); steps],
        resets: vec![Vec::with_capacity(b); steps],
        active: vec![Vec::with_capacity(b); steps],
        bootstrap: Vec::with_capacity(b),
        init_state,
        episodes: Vec::new(),
    };
    let mut final_states = Vec::with_capacity(chunks.len());
    for c in chunks {
        for t in 0..steps {
            out.obs[t].extend(c.obs[t].iter().cloned());
            out.actions[t].extend(&c.actions[t]);
            out.log_probs[t].extend(&c.log_probs[t]);
            out.values[t].extend(&c.values[t]);
            out.rewards[t].extend(&c.rewards[t]);
            out.dones[t].extend(&c.dones[t]);
            out.resets[t].extend(&c.resets[t]);
            out.active[t].extend(c.active[t].iter().cloned());
        }
        out.bootstrap.extend(&c.bootstrap);
        out.episodes.extend(c.episodes);
        final_states.push(c.state);
    }
    pool.state = CoreState::concat_rows(&final_states);
    Ok(out)
}

// ---- advantages ----------------------------------------------------------

/// GAE for one environment's sequence.
///
/// `δ_t = r_t + γ V(s_{t+1})(1 − d_t) − V(s_t)`, `Â_t = δ_t + γλ(1 − d_t) Â_{t+1}`,
/// returns `Â_t + V(s_t)`.
pub fn compute_gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    bootstrap: T,
    cfg: &GaeConfig,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Contract(format!(
            "gae: {} rewards, {} values, {} done flags",
            n,
            values.len(),
            dones.len()
        )));
    }
    let (g, l) = (T::lit(cfg.gamma), T::lit(cfg.lambda));
    let mut adv = vec![T::zero(); n];
    let mut next_adv = T::zero();
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { T::zero() } else { T::one() };
        let delta = rewards[t] + g * next_value * live - values[t];
        next_adv = delta + g * l * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, ret))
}

/// GAE over a rollout; outputs are time-major `[T][B]`.
pub fn rollout_advantages<T: Scalar>(ro: &Rollout<T>, cfg: &GaeConfig) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let (steps, b) = (ro.steps(), ro.batch());
    let mut adv = vec![vec![T::zero(); b]; steps];
    let mut ret = vec![vec![T::zero(); b]; steps];
    for e in 0..b {
        let col = |m: &Vec<Vec<T>>| m.iter().map(|r| r[e]).collect::<Vec<_>>();
        let dones: Vec<bool> = ro.dones.iter().map(|r| r[e]).collect();
        let (a, r) = compute_gae(&col(&ro.rewards), &col(&ro.values), &dones, ro.bootstrap[e], cfg)?;
        for t in 0..steps {
            adv[t][e] = a[t];
            ret[t][e] = r[t];
        }
    }
    Ok((adv, ret))
}

/// Shifts and scales to mean 0, standard deviation 1.
pub fn normalize<T: Scalar>(xs: &mut [T]) {
    if xs.len() < 2 {
        return;
    }
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt() + T::lit(1e-8);
    for x in xs {
        *x = (*x - mean) / std;
    }
}

// ---- loss ----------------------------------------------------------------

/// Components of the PPO objective as tape variables (all scalars).
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    /// Quantity minimised: `−(L^CLIP − c₁ L^VF + c₂ S)`.
    pub total: Var,
    pub clip: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Assembles the loss from per-sample pieces.
///
/// `log_probs_all` is `[n, 7]` log-softmax output, `values` is `[n, 1]`.
/// With `use_value == false` the value term is reported but not added.
#[allow(clippy::too_many_arguments)]
pub fn ppo_terms<T: Scalar>(
    tape: &mut Tape<'_, T>,
    log_probs_all: Var,
    actions: &[usize],
    old_log_probs: &[T],
    advantages: &[T],
    values: Var,
    returns: &[T],
    cfg: &PpoConfig,
    use_value: bool,
) -> Result<PpoTerms> {
    let n = actions.len();
    if old_log_probs.len() != n || advantages.len() != n || returns.len() != n {
        return Err(Error::Contract("ppo: batch arrays differ in length".into()));
    }
    let logp = tape.pick(log_probs_all, actions)?;
    let old = tape.constant(Tensor::new(vec![n], old_log_probs.to_vec())?);
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    if let Some(i) = tape.value(ratio).data().iter().position(|r| !r.is_finite()) {
        return Err(Error::Numeric {
            op: "ppo_loss",
            detail: format!("non-finite probability ratio at sample {i}"),
        });
    }
    let adv = tape.constant(Tensor::new(vec![n], advantages.to_vec())?);
    let eps = T::lit(cfg.clip_eps);
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, T::one() - eps, T::one() + eps);
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let clip = tape.mean(surr);

    let probs = tape.exp(log_probs_all);
    let plogp = tape.mul(probs, log_probs_all)?;
    let neg_h = tape.sum(plogp);
    let entropy = tape.scale(neg_h, -T::one() / T::lit(n as f64));

    let v = tape.reshape(values, &[n])?;
    let target = tape.constant(Tensor::new(vec![n], returns.to_vec())?);
    let err = tape.sub(v, target)?;
    let sq = tape.mul(err, err)?;
    let value = tape.mean(sq);

    let neg_clip = tape.neg(clip);
    let ent = tape.scale(entropy, -T::lit(cfg.entropy_coef));
    let mut total = tape.add(neg_clip, ent)?;
    if use_value {
        let vt = tape.scale(value, T::lit(cfg.value_coef));
        total = tape.add(total, vt)?;
    }
    Ok(PpoTerms {
        total,
        clip,
        value,
        entropy,
    })
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Re-runs the recurrent network over environments `envs` of a rollout
/// (BPTT through all steps) and builds the PPO loss.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: Network<'_>,
    ro: &Rollout<T>,
    envs: &[usize],
    advantages: &[Vec<T>],
    returns: &[Vec<T>],
    cfg: &PpoConfig,
    use_value: bool,
) -> Result<PpoTerms> {
    let init = ro.init_state.select_rows(envs);
    let mut state: CoreVars = init.to_vars(tape);
    let mut lps = Vec::with_capacity(ro.steps());
    let mut vals = Vec::with_capacity(ro.steps());
    let (mut actions, mut old, mut adv, mut ret) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..ro.steps() {
        let keep: Vec<bool> = envs.iter().map(|&e| !ro.resets[t][e]).collect();
        state = state.mask_rows(tape, &keep)?;
        let obs: Vec<&Observation> = envs.iter().map(|&e| &ro.obs[t][e]).collect();
        let out = net.step(tape, state, &obs, None)?;
        state = out.state;
        lps.push(tape.log_softmax(out.logits)?);
        vals.push(out.value);
        for &e in envs {
            actions.push(ro.actions[t][e]);
            old.push(ro.log_probs[t][e]);
            adv.push(advantages[t][e]);
            ret.push(returns[t][e]);
        }
    }
    let lp = tape.concat(&lps, 0)?;
    let v = tape.concat(&vals, 0)?;
    ppo_terms(tape, lp, &actions, &old, &adv, v, &ret, cfg, use_value)
}

// ---- optimisation --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Parameters updated together at one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateGroup {
    pub ids: Vec<ParamId>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Adam (or plain SGD) with per-parameter moment estimates and step counts.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &PpoConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            max_grad_norm: cfg.max_grad_norm,
            moments: Vec::new(),
        }
    }

    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            max_grad_norm: 0.0,
            moments: Vec::new(),
        }
    }

    /// Steps every parameter of `groups` with its group's rate.
    ///
    /// `grads` is indexed by parameter; a gradient on a parameter outside
    /// the groups is a partition violation. Gradients are first clipped to a
    /// global norm of `max_grad_norm` (when positive). Returns the norm before
    /// clipping.
    pub fn apply_update(
        &mut self,
        store: &mut ParamStore<T>,
        groups: &[UpdateGroup],
        grads: &[Option<Tensor<T>>],
    ) -> Result<f64> {
        let mut member = vec![None; store.len()];
        for (g, group) in groups.iter().enumerate() {
            for id in &group.ids {
                if member[id.index()].replace(g).is_some() {
                    return Err(Error::PartitionViolation(format!(
                        "{} appears in two update groups",
                        store.get(*id).name
                    )));
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if g.is_some() && member.get(i).copied().flatten().is_none() {
                let name = store.iter().nth(i).map_or("?".to_string(), |(_, p)| p.name.clone());
                return Err(Error::PartitionViolation(format!(
                    "gradient present on {name}, which is outside the update partition"
                )));
            }
        }
        let sq: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        let scale = if self.max_grad_norm > 0.0 && norm > self.max_grad_norm {
            self.max_grad_norm / (norm + 1e-6)
        } else {
            1.0
        };
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for group in groups {
            for &id in &group.ids {
                let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                    continue;
                };
                let lr = T::lit(group.lr);
                let value = store.value_mut(id);
                if value.len() != g.len() {
                    return Err(Error::dim("apply_update", value.shape(), g.shape()));
                }
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (p, &gi) in value.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gi * T::lit(scale);
                        }
                    }
                    OptimizerKind::Adam => {
                        let n = value.len();
                        let st = self.moments[id.index()].get_or_insert_with(|| Moments {
                            m: vec![T::zero(); n],
                            v: vec![T::zero(); n],
                            t: 0,
                        });
                        st.t += 1;
                        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                        let c1 = T::one() - b1.powi(st.t as i32);
                        let c2 = T::one() - b2.powi(st.t as i32);
                        let eps = T::lit(self.eps);
                        for (i, p) in value.data_mut().iter_mut().enumerate() {
                            let gi = g.data()[i] * T::lit(scale);
                            st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                            st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                            let mh = st.m[i] / c1;
                            let vh = st.v[i] / c2;
                            *p -= lr * mh / (vh.sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Trainable mask over the store for a set of parameters.
pub fn trainable_mask(len: usize, ids: impl IntoIterator<Item = ParamId>) -> Vec<bool> {
    let mut m = vec![false; len];
    for id in ids {
        m[id.index()] = true;
    }
    m
}

/// One PPO update of `groups` from a rollout: `epochs` passes over
/// `minibatches` environment subsets.
pub fn ppo_update<T: Scalar>(
    agent: &mut Agent<T>,
    opt: &mut Optimizer<T>,
    ro: &Rollout<T>,
    groups: &[UpdateGroup],
    ppo: &PpoConfig,
    gae: &GaeConfig,
    use_value: bool,
) -> Result<LossReport> {
    let (mut adv, ret) = rollout_advantages(ro, gae)?;
    if ppo.normalize_advantages {
        let mut flat: Vec<T> = adv.iter().flatten().copied().collect();
        normalize(&mut flat);
        let b = ro.batch();
        for (i, a) in flat.into_iter().enumerate() {
            adv[i / b][i % b] = a;
        }
    }
    let ids: Vec<ParamId> = groups.iter().flat_map(|g| g.ids.iter().copied()).collect();
    let mask = trainable_mask(agent.store.len(), ids);
    let b = ro.batch();
    let mb = ppo.minibatches.min(b);
    let mut report = LossReport::default();
    let mut count = 0.0;
    for _ in 0..ppo.epochs {
        for m in 0..mb {
            let envs: Vec<usize> = (0..b).filter(|e| e % mb == m).collect();
            let grads = {
                let mut tape = Tape::with_trainable(&agent.store, &mask);
                let terms = ppo_loss(&mut tape, agent.net(), ro, &envs, &adv, &ret, ppo, use_value)?;
                report.total += tape.item(terms.total).as_f64();
                report.clip += tape.item(terms.clip).as_f64();
                report.value += tape.item(terms.value).as_f64();
                report.entropy += tape.item(terms.entropy).as_f64();
                count += 1.0;
                tape.backward(terms.total)?.into_param_grads()
            };
            opt.apply_update(&mut agent.store, groups, &grads)?;
        }
    }
    report.total /= count;
    report.clip /= count;
    report.value /= count;
    report.entropy /= count;
    Ok(report)
}

// ---- evaluation ----------------------------------------------------------

/// Outcome of a batch of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub success_rate: f64,
    pub episodes: usize,
    pub frames: usize,
    pub lengths: Vec<usize>,
}

impl EvalReport {
    fn from_episodes(stats: &[EpisodeStat]) -> Self {
        let n = stats.len().max(1) as f64;
        Self {
            mean_reward: stats.iter().map(|s| s.reward).sum::<f64>() / n,
            success_rate: stats.iter().filter(|s| s.success).count() as f64 / n,
            episodes: stats.len(),
            frames: stats.iter().map(|s| s.length).sum(),
            lengths: stats.iter().map(|s| s.length).collect(),
        }
    }
}

/// One agent step during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub t: usize,
    pub active_modules: Vec<usize>,
    pub input_scores: Vec<f64>,
    pub value: f64,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: ActMode,
    /// Members of each active set switched off at random after selection.
    pub off_count: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: ActMode::Greedy,
            off_count: 0,
        }
    }
}

/// The instances an evaluation with `seed` visits, in episode order.
pub fn eval_instances(tasks: &TaskDistribution, episodes: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..episodes).map(|_| tasks.sample(&mut rng)).collect())
}

/// Runs `episodes` episodes side by side, calling `record` for every step.
///
/// Each episode has its own environment and rng, so results do not depend on
/// how many run together.
pub fn run_episodes<T: Scalar>(
    agent: &Agent<T>,
    tasks: &TaskDistribution,
    episodes: usize,
    seed: u64,
    opts: EvalOptions,
    mut record: impl FnMut(&TraceRecord),
) -> Result<EvalReport> {
    if agent.cfg.core == crate::agent::CoreKind::Rims && opts.off_count >= agent.cfg.rim.n_active {
        return Err(Error::Config(format!(
            "off_count {} must be below k = {}",
            opts.off_count, agent.cfg.rim.n_active
        )));
    }
    let specs = eval_instances(tasks, episodes, seed)?;
    let mut envs = specs.iter().map(GridEnv::new).collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<Observation> = envs.iter().map(|e| e.observe()).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..episodes)
        .map(|i| ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1))))
        .collect();
    let mut alive: Vec<usize> = (0..episodes).collect();
    let mut state = agent.initial_state(episodes);
    let mut stats = vec![None; episodes];
    let mut records: Vec<Vec<TraceRecord>> = vec![Vec::new(); episodes];
    while !alive.is_empty() {
        let refs: Vec<&Observation> = alive.iter().map(|&i| &obs[i]).collect();
        let out = if opts.off_count > 0 {
            let (rngs, alive) = (&mut rngs, &alive);
            let mut off = |_: &[Vec<T>], sets: &mut Vec<Vec<usize>>| {
                for (row, set) in sets.iter_mut().enumerate() {
                    let rng = &mut rngs[alive[row]];
                    for _ in 0..opts.off_count {
                        let drop = rng.gen_range(0..set.len());
                        set.remove(drop);
                    }
                }
            };
            agent.forward_with(&state, &refs, Some(&mut off))?
        } else {
            agent.forward(&state, &refs)?
        };
        let mut still = Vec::with_capacity(alive.len());
        let mut keep_rows = Vec::with_capacity(alive.len());
        for (row, &i) in alive.iter().enumerate() {
            let logits = &out.logits.data()[row * NUM_ACTIONS..(row + 1) * NUM_ACTIONS];
            let a = act(logits, &mut rngs[i], opts.mode)?;
            let r = envs[i].step(Action::from_index(a)?)?;
            let (active_modules, input_scores) = match &out.state {
                CoreState::Rims(s) => (
                    out.active.as_ref().map(|sets| sets[row].clone()).unwrap_or_default(),
                    s.input_scores[row].iter().map(|x| x.as_f64()).collect(),
                ),
                CoreState::Lstm { .. } => (Vec::new(), Vec::new()),
            };
            records[i].push(TraceRecord {
                episode: i,
                t: envs[i].steps() - 1,
                active_modules,
                input_scores,
                value: out.values[row].as_f64(),
                action: a,
                reward: r.reward,
                done: r.done,
            });
            if r.done {
                stats[i] = Some(EpisodeStat {
                    reward: r.reward,
                    success: r.success,
                    length: envs[i].steps(),
                });
            } else {
                obs[i] = r.obs;
                still.push(i);
                keep_rows.push(row);
            }
        }
        if !still.is_empty() {
            state = out.state.select_rows(&keep_rows);
        }
        alive = still;
    }
    for r in records.iter().flatten() {
        record(r);
    }
    let stats: Vec<EpisodeStat> = stats.into_iter().map(|s| s.expect("every episode finished")).collect();
    Ok(EvalReport::from_episodes(&stats))
}

/// Evaluates without tracing.
pub fn evaluate<T: Scalar>(
    agent: &Agent<T>,
    tasks: &TaskDistribution,
    episodes: usize,
    seed: u64,
    opts: EvalOptions,
) -> Result<EvalReport> {
    run_episodes(agent, tasks, episodes, seed, opts, |_| {})
}

/// Runs the breadth-first planner on the same instances an agent evaluation
/// with `seed` would visit.
pub fn evaluate_oracle(tasks: &TaskDistribution, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut stats = Vec::with_capacity(episodes);
    for spec in eval_instances(tasks, episodes, seed)? {
        let mut env = GridEnv::new(&spec)?;
        let mut policy = crate::gridworld::OraclePolicy::new();
        loop {
            let r = env.step(policy.act(&env))?;
            if r.done {
                stats.push(EpisodeStat {
                    reward: r.reward,
                    success: r.success,
                    length: env.steps(),
                });
                break;
            }
        }
    }
    Ok(EvalReport::from_episodes(&stats))
}
