//! Recurrent actor-critic: observation encoder, mission embedding, a RIM or
//! LSTM core, and separate policy and value heads reading the whole state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gridworld::{mission_vocabulary, Observation, NUM_ACTIONS, VIEW, VIEW_LEN};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::rims::{ActiveOverride, RimCell, RimConfig, RimParams, RimState};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Rims,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub core: CoreKind,
    pub rim: RimConfig,
    pub lstm_hidden: usize,
    pub encoder_dim: usize,
    pub mission_dim: usize,
    pub head_hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            core: CoreKind::Rims,
            rim: RimConfig::default(),
            lstm_hidden: 80,
            encoder_dim: 64,
            mission_dim: 16,
            head_hidden: 64,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_dim == 0 || self.mission_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("encoder, mission and head widths must be positive".into()));
        }
        match self.core {
            CoreKind::Rims => {
                self.rim.validate()?;
                if self.rim.input_dim != self.input_dim() {
                    return Err(Error::Config(format!(
                        "rim.input_dim {} must equal encoder_dim + mission_dim = {}",
                        self.rim.input_dim,
                        self.input_dim()
                    )));
                }
            }
            CoreKind::Lstm if self.lstm_hidden == 0 => {
                return Err(Error::Config("lstm_hidden must be positive".into()))
            }
            CoreKind::Lstm => {}
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_dim + self.mission_dim
    }

    /// Width of the flattened recurrent state the heads read.
    pub fn state_dim(&self) -> usize {
        match self.core {
            CoreKind::Rims => self.rim.state_dim(),
            CoreKind::Lstm => self.lstm_hidden,
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoreParams {
    Rims(RimParams),
    Lstm(LstmParams),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentParams {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub mission: ParamId,
    pub core: CoreParams,
    pub pol_w1: ParamId,
    pub pol_b1: ParamId,
    pub pol_w2: ParamId,
    pub pol_b2: ParamId,
    pub val_w1: ParamId,
    pub val_b1: ParamId,
    pub val_w2: ParamId,
    pub val_b2: ParamId,
}

impl AgentParams {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        use ParamRole::*;
        let s = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let (e, m, hh, sd) = (cfg.encoder_dim, cfg.mission_dim, cfg.head_hidden, cfg.state_dim());
        let enc_w = store.add_uniform("encoder.w", Encoder, &[VIEW_LEN, e], s(VIEW * VIEW), rng);
        let enc_b = store.add("encoder.b", Encoder, Tensor::zeros([1, e]));
        let vocab = mission_vocabulary().len();
        let mission = store.add_uniform("mission.embedding", MissionEmbedding, &[vocab, m], 1.0, rng);
        let core = match cfg.core {
            CoreKind::Rims => CoreParams::Rims(RimParams::init(store, &cfg.rim, rng)?),
            CoreKind::Lstm => {
                let h = cfg.lstm_hidden;
                CoreParams::Lstm(LstmParams {
                    wx: store.add_uniform("lstm.wx", LstmCore, &[cfg.input_dim(), 4 * h], s(h), rng),
                    wh: store.add_uniform("lstm.wh", LstmCore, &[h, 4 * h], s(h), rng),
                    b: store.add("lstm.b", LstmCore, Tensor::zeros([1, 4 * h])),
                })
            }
        };
        Ok(Self {
            enc_w,
            enc_b,
            mission,
            core,
            pol_w1: store.add_uniform("policy.w1", PolicyHead, &[sd, hh], s(sd), rng),
            pol_b1: store.add("policy.b1", PolicyHead, Tensor::zeros([1, hh])),
            pol_w2: store.add_uniform("policy.w2", PolicyHead, &[hh, NUM_ACTIONS], 0.01, rng),
            pol_b2: store.add("policy.b2", PolicyHead, Tensor::zeros([1, NUM_ACTIONS])),
            val_w1: store.add_uniform("value.w1", ValueHead, &[sd, hh], s(sd), rng),
            val_b1: store.add("value.b1", ValueHead, Tensor::zeros([1, hh])),
            val_w2: store.add_uniform("value.w2", ValueHead, &[hh, 1], s(hh), rng),
            val_b2: store.add("value.b2", ValueHead, Tensor::zeros([1, 1])),
        })
    }

    pub fn rims(&self) -> Option<&RimParams> {
        match &self.core {
            CoreParams::Rims(p) => Some(p),
            CoreParams::Lstm(_) => None,
        }
    }
}

/// Recurrent state of a batch of agents.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreState<T> {
    Rims(RimState<T>),
    /// `h`, `c`: `[B, hidden]`
    Lstm { h: Tensor<T>, c: Tensor<T> },
}

impl<T: Scalar> CoreState<T> {
    pub fn zeros(cfg: &AgentConfig, batch: usize) -> Self {
        match cfg.core {
            CoreKind::Rims => CoreState::Rims(RimState::zeros(&cfg.rim, batch)),
            CoreKind::Lstm => CoreState::Lstm {
                h: Tensor::zeros([batch, cfg.lstm_hidden]),
                c: Tensor::zeros([batch, cfg.lstm_hidden]),
            },
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            CoreState::Rims(s) => s.batch(),
            CoreState::Lstm { h, .. } => h.shape()[0],
        }
    }

    /// Zeroes the state of batch row `b`.
    pub fn reset_row(&mut self, b: usize) {
        match self {
            CoreState::Rims(s) => {
                let (n, bs, h) = (s.h.shape()[0], s.h.shape()[1], s.h.shape()[2]);
                let data = s.h.data_mut();
                for j in 0..n {
                    data[(j * bs + b) * h..(j * bs + b + 1) * h].fill(T::zero());
                }
                let k = s.active[b].len();
                s.active[b] = (0..k).collect();
                s.input_scores[b].fill(T::zero());
            }
            CoreState::Lstm { h, c } => {
                let w = h.shape()[1];
                h.data_mut()[b * w..(b + 1) * w].fill(T::zero());
                c.data_mut()[b * w..(b + 1) * w].fill(T::zero());
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            CoreState::Rims(s) => s.is_finite(),
            CoreState::Lstm { h, c } => h.is_finite() && c.is_finite(),
        }
    }

    /// The state of batch rows `range`.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Self {
        self.select_rows(&range.collect::<Vec<_>>())
    }

    /// The state of the given batch rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        // `axis` is the batch axis: 1 for `[N, B, H]`, 0 for `[B, H]`
        let gather = |t: &Tensor<T>, axis: usize| {
            let rows = t.shape()[axis];
            let n = if axis == 0 { 1 } else { t.shape()[0] };
            let w = t.shape().last().copied().unwrap_or(0);
            let mut data = Vec::with_capacity(n * idx.len() * w);
            for j in 0..n {
                for &b in idx {
                    data.extend_from_slice(&t.data()[(j * rows + b) * w..(j * rows + b + 1) * w]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = idx.len();
            Tensor::new(shape, data).expect("gathered rows keep their width")
        };
        match self {
            CoreState::Rims(s) => CoreState::Rims(RimState {
                h: gather(&s.h, 1),
                active: idx.iter().map(|&b| s.active[b].clone()).collect(),
                input_scores: idx.iter().map(|&b| s.input_scores[b].clone()).collect(),
            }),
            CoreState::Lstm { h, c } => CoreState::Lstm { h: gather(h, 0), c: gather(c, 0) },
        }
    }

    /// Stacks states along the batch axis.
    pub fn concat_rows(parts: &[Self]) -> Self {
        let cat = |ts: Vec<&Tensor<T>>, axis: usize| {
            let n = if axis == 0 { 1 } else { ts[0].shape()[0] };
            let w = ts[0].shape().last().copied().unwrap_or(0);
            let total: usize = ts.iter().map(|t| t.shape()[axis]).sum();
            let mut data = Vec::with_capacity(n * total * w);
            for j in 0..n {
                for t in &ts {
                    let r = t.shape()[axis];
                    data.extend_from_slice(&t.data()[j * r * w..(j + 1) * r * w]);
                }
            }
            let mut shape = ts[0].shape().to_vec();
            shape[axis] = total;
            Tensor::new(shape, data).expect("stacked rows keep their width")
        };
        match &parts[0] {
            CoreState::Rims(_) => {
                let rs: Vec<&RimState<T>> = parts
                    .iter()
                    .map(|p| match p {
                        CoreState::Rims(s) => s,
                        CoreState::Lstm { .. } => panic!("mixed core states"),
                    })
                    .collect();
                CoreState::Rims(RimState {
                    h: cat(rs.iter().map(|s| &s.h).collect(), 1),
                    active: rs.iter().flat_map(|s| s.active.iter().cloned()).collect(),
                    input_scores: rs.iter().flat_map(|s| s.input_scores.iter().cloned()).collect(),
                })
            }
            CoreState::Lstm { .. } => {
                let (hs, cs): (Vec<&Tensor<T>>, Vec<&Tensor<T>>) = parts
                    .iter()
                    .map(|p| match p {
                        CoreState::Lstm { h, c } => (h, c),
                        CoreState::Rims(_) => panic!("mixed core states"),
                    })
                    .unzip();
                CoreState::Lstm { h: cat(hs, 0), c: cat(cs, 0) }
            }
        }
    }

    /// Places the state on a tape as constants.
    pub fn to_vars(&self, tape: &mut Tape<'_, T>) -> CoreVars {
        match self {
            CoreState::Rims(s) => CoreVars::Rims { h: tape.constant(s.h.clone()) },
            CoreState::Lstm { h, c } => CoreVars::Lstm {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
            },
        }
    }
}

/// Recurrent state living on a tape.
#[derive(Clone, Copy, Debug)]
pub enum CoreVars {
    Rims { h: Var },
    Lstm { h: Var, c: Var },
}

impl CoreVars {
    /// Replaces the state of rows with `keep[b] == false` by exact zeros.
    pub fn mask_rows<T: Scalar>(self, tape: &mut Tape<'_, T>, keep: &[bool]) -> Result<Self> {
        if keep.iter().all(|&k| k) {
            return Ok(self);
        }
        let zero_rows = |tape: &mut Tape<'_, T>, v: Var, row_axis: usize| -> Result<Var> {
            let shape = tape.shape(v).to_vec();
            let inner: usize = shape[row_axis + 1..].iter().product();
            let outer: usize = shape[..row_axis].iter().product();
            let rows = shape[row_axis];
            if rows != keep.len() {
                return Err(Error::dim("mask_rows", &shape, &[keep.len()]));
            }
            let mut mask = Vec::with_capacity(outer * rows * inner);
            for _ in 0..outer {
                for &k in keep {
                    mask.extend(std::iter::repeat_n(k, inner));
                }
            }
            let zeros = tape.constant(Tensor::zeros(shape));
            tape.select(&mask, v, zeros)
        };
        Ok(match self {
            CoreVars::Rims { h } => CoreVars::Rims { h: zero_rows(tape, h, 1)? },
            CoreVars::Lstm { h, c } => CoreVars::Lstm {
                h: zero_rows(tape, h, 0)?,
                c: zero_rows(tape, c, 0)?,
            },
        })
    }

    /// Reads the values back into a detached state.
    pub fn to_state<T: Scalar>(self, tape: &Tape<'_, T>, active: Option<Vec<Vec<usize>>>, scores: Option<Vec<Vec<T>>>) -> CoreState<T> {
        match self {
            CoreVars::Rims { h } => {
                let h = tape.value(h).clone();
                let b = h.shape()[1];
                let n = h.shape()[0];
                CoreState::Rims(RimState {
                    h,
                    active: active.unwrap_or_else(|| vec![Vec::new(); b]),
                    input_scores: scores.unwrap_or_else(|| vec![vec![T::zero(); n]; b]),
                })
            }
            CoreVars::Lstm { h, c } => CoreState::Lstm {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            },
        }
    }
}

/// Output of one forward step on a tape.
pub struct StepVars<T> {
    /// `[B, 7]`
    pub logits: Var,
    /// `[B, 1]`
    pub value: Var,
    pub state: CoreVars,
    /// Per row, the selected modules (RIM core only).
    pub active: Option<Vec<Vec<usize>>>,
    pub scores: Option<Vec<Vec<T>>>,
}

/// The network graph bound to a configuration and its parameter handles.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub cfg: &'a AgentConfig,
    pub params: &'a AgentParams,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a AgentConfig, params: &'a AgentParams) -> Self {
        Self { cfg, params }
    }

    /// `tanh(W · onehot(view) + b)` for each observation, `[B, encoder_dim]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, obs: &[&Observation]) -> Result<Var> {
        let bags = obs.iter().map(|o| o.active_channels()).collect::<Result<Vec<_>>>()?;
        let w = tape.param(self.params.enc_w);
        let b = tape.param(self.params.enc_b);
        let z = tape.embedding_bag(w, &bags, false)?;
        let z = tape.add(z, b)?;
        Ok(tape.tanh(z))
    }

    /// Mean of the mission token embeddings, `[B, mission_dim]`.
    pub fn embed_mission<T: Scalar>(&self, tape: &mut Tape<'_, T>, obs: &[&Observation]) -> Result<Var> {
        let bags: Vec<Vec<usize>> = obs.iter().map(|o| o.mission.clone()).collect();
        if let Some(b) = bags.iter().find(|b| b.is_empty()) {
            return Err(Error::Contract(format!("empty mission {b:?}")));
        }
        let table = tape.param(self.params.mission);
        tape.embedding_bag(table, &bags, true)
    }

    fn head<T: Scalar>(&self, tape: &mut Tape<'_, T>, s: Var, ids: [ParamId; 4]) -> Result<Var> {
        let [w1, b1, w2, b2] = ids.map(|id| tape.param(id));
        let z = tape.matmul(s, w1)?;
        let z = tape.add(z, b1)?;
        let z = tape.tanh(z);
        let z = tape.matmul(z, w2)?;
        tape.add(z, b2)
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        state: CoreVars,
        obs: &[&Observation],
        overrides: Option<ActiveOverride<'_, T>>,
    ) -> Result<StepVars<T>> {
        let enc = self.encode(tape, obs)?;
        let mis = self.embed_mission(tape, obs)?;
        let x = tape.concat(&[enc, mis], 1)?;
        let batch = obs.len();
        let (state, flat, active, scores) = match (state, &self.params.core) {
            (CoreVars::Rims { h }, CoreParams::Rims(rp)) => {
                let out = RimCell::new(&self.cfg.rim, rp).step(tape, h, x, overrides)?;
                let hb = tape.permute(out.h, &[1, 0, 2])?;
                let flat = tape.reshape(hb, &[batch, self.cfg.rim.state_dim()])?;
                (CoreVars::Rims { h: out.h }, flat, Some(out.active), Some(out.scores))
            }
            (CoreVars::Lstm { h, c }, CoreParams::Lstm(lp)) => {
                let (h, c) = self.lstm(tape, lp, h, c, x)?;
                (CoreVars::Lstm { h, c }, h, None, None)
            }
            _ => return Err(Error::Contract("state does not match the core type".into())),
        };
        let p = self.params;
        let logits = self.head(tape, flat, [p.pol_w1, p.pol_b1, p.pol_w2, p.pol_b2])?;
        let value = self.head(tape, flat, [p.val_w1, p.val_b1, p.val_w2, p.val_b2])?;
        Ok(StepVars {
            logits,
            value,
            state,
            active,
            scores,
        })
    }

    fn lstm<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &LstmParams, h: Var, c: Var, x: Var) -> Result<(Var, Var)> {
        let hd = self.cfg.lstm_hidden;
        let (wx, wh, b) = (tape.param(p.wx), tape.param(p.wh), tape.param(p.b));
        let gx = tape.matmul(x, wx)?;
        let gh = tape.matmul(h, wh)?;
        let g = tape.add(gx, gh)?;
        let g = tape.add(g, b)?;
        let ifo = tape.slice(g, 1, 0, 3 * hd)?;
        let ifo = tape.sigmoid(ifo);
        let i = tape.slice(ifo, 1, 0, hd)?;
        let f = tape.slice(ifo, 1, hd, hd)?;
        let o = tape.slice(ifo, 1, 2 * hd, hd)?;
        let cand = tape.slice(g, 1, 3 * hd, hd)?;
        let cand = tape.tanh(cand);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, cand)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Detached result of [`Agent::forward`].
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `[B, 7]`
    pub logits: Tensor<T>,
    /// `[B]`
    pub values: Vec<T>,
    pub state: CoreState<T>,
    pub active: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Draws an action from `softmax(logits)` or takes the first argmax.
pub fn act<T: Scalar, R: Rng + ?Sized>(logits: &[T], rng: &mut R, mode: ActMode) -> Result<usize> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric {
            op: "act",
            detail: format!("logits must be finite, got {logits:?}"),
        });
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &l| m.max(l));
    match mode {
        ActMode::Greedy => Ok(logits.iter().position(|&l| l == max).unwrap()),
        ActMode::Sample => {
            let weights: Vec<f64> = logits.iter().map(|&l| (l - max).as_f64().exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return Ok(i);
                }
                u -= w;
            }
            Ok(weights.iter().rposition(|&w| w > 0.0).unwrap())
        }
    }
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub cfg: AgentConfig,
    pub store: ParamStore<T>,
    pub params: AgentParams,
}

const CHECKPOINT_MAGIC: &str = "metarims-checkpoint v1";

impl<T: Scalar> Agent<T> {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AgentParams::init(&mut store, &cfg, &mut rng)?;
        Ok(Self { cfg, store, params })
    }

    pub fn net(&self) -> Network<'_> {
        Network::new(&self.cfg, &self.params)
    }

    pub fn initial_state(&self, batch: usize) -> CoreState<T> {
        CoreState::zeros(&self.cfg, batch)
    }

    /// One step for a batch without recording gradients.
    pub fn forward(&self, state: &CoreState<T>, obs: &[&Observation]) -> Result<StepOutput<T>> {
        self.forward_with(state, obs, None)
    }

    pub fn forward_with(
        &self,
        state: &CoreState<T>,
        obs: &[&Observation],
        overrides: Option<ActiveOverride<'_, T>>,
    ) -> Result<StepOutput<T>> {
        if state.batch() != obs.len() {
            return Err(Error::Contract(format!(
                "state batch {} but {} observations",
                state.batch(),
                obs.len()
            )));
        }
        let mut tape = Tape::with_params(&self.store);
        let vars = state.to_vars(&mut tape);
        let out = self.net().step(&mut tape, vars, obs, overrides)?;
        let logits = tape.value(out.logits).clone();
        let values = tape.value(out.value).data().to_vec();
        let state = out.state.to_state(&tape, out.active.clone(), out.scores);
        Ok(StepOutput {
            logits,
            values,
            state,
            active: out.active,
        })
    }

    /// Encoded view features `[B, encoder_dim]`.
    pub fn encode_observation(&self, obs: &[&Observation]) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.store);
        let v = self.net().encode(&mut tape, obs)?;
        Ok(tape.value(v).clone())
    }

    /// Pooled mission embeddings `[B, mission_dim]`.
    pub fn embed_mission(&self, obs: &[&Observation]) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.store);
        let v = self.net().embed_mission(&mut tape, obs)?;
        Ok(tape.value(v).clone())
    }

    /// Plain-text checkpoint: header, config, then one shape line and one
    /// value line per parameter.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&format!("digest {}\n", self.cfg.digest()));
        out.push_str(&format!("config {}\n", serde_json::to_string(&self.cfg).expect("config serializes")));
        out.push_str(&format!("params {}\n", self.store.len()));
        for (_, p) in self.store.iter() {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {}\n", p.name, shape.join(",")));
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{:?}", v.as_f64())).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint, verifying its digest against its own config.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }
        let digest = lines
            .next()
            .and_then(|l| l.strip_prefix("digest "))
            .ok_or_else(|| bad("missing digest line".into()))?;
        let cfg: AgentConfig = serde_json::from_str(
            lines
                .next()
                .and_then(|l| l.strip_prefix("config "))
                .ok_or_else(|| bad("missing config line".into()))?,
        )?;
        if cfg.digest() != digest {
            return Err(bad(format!("config digest mismatch: file {digest}, config {}", cfg.digest())));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing parameter count".into()))?;
        let mut agent = Self::new(cfg, 0)?;
        if count != agent.store.len() {
            return Err(bad(format!("{count} parameters, config implies {}", agent.store.len())));
        }
        for _ in 0..count {
            let head = lines.next().ok_or_else(|| bad("truncated".into()))?;
            let (name, shape) = head.split_once(' ').ok_or_else(|| bad(format!("bad header `{head}`")))?;
            let id = agent.store.find(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let shape: Vec<usize> = shape
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
                .collect::<Result<_>>()?;
            if shape != agent.store.value(id).shape() {
                return Err(bad(format!("shape mismatch for {name}")));
            }
            let vals: Vec<T> = lines
                .next()
                .ok_or_else(|| bad("truncated".into()))?
                .split_ascii_whitespace()
                .map(|v| v.parse::<f64>().map(T::lit).map_err(|_| bad(format!("bad value in {name}"))))
                .collect::<Result<_>>()?;
            *agent.store.value_mut(id) = Tensor::new(shape, vals).map_err(|e| bad(e.to_string()))?;
        }
        Ok(agent)
    }

    /// Parses a checkpoint and rejects it unless it was written for `expected`.
    pub fn from_checkpoint_for(text: &str, expected: &AgentConfig) -> Result<Self> {
        let agent = Self::from_checkpoint(text)?;
        if agent.cfg.digest() != expected.digest() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config digest {} does not match expected {}",
                agent.cfg.digest(),
                expected.digest()
            )));
        }
        Ok(agent)
    }
}
