//! Recurrent Independent Mechanisms: N recurrent modules that compete for the
//! input through key-value attention, update independently when selected, and
//! exchange information through a second attention mechanism.
//!
//! Batched layout: hidden state is `[N, B, H]` (module-major) so that the
//! per-module weights apply as one batched product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RimConfig {
    pub n_modules: usize,
    pub n_active: usize,
    pub hidden_per_module: usize,
    /// Total key width of the input attention (split across heads).
    pub key_dim: usize,
    /// Total value width of the input attention; also the width each module reads.
    pub value_dim: usize,
    pub n_heads_input: usize,
    pub n_heads_comm: usize,
    pub comm_key_dim: usize,
    pub comm_value_dim: usize,
    pub input_dim: usize,
}

impl Default for RimConfig {
    fn default() -> Self {
        Self {
            n_modules: 5,
            n_active: 3,
            hidden_per_module: 16,
            key_dim: 32,
            value_dim: 32,
            n_heads_input: 4,
            n_heads_comm: 4,
            comm_key_dim: 16,
            comm_value_dim: 16,
            input_dim: 80,
        }
    }
}

impl RimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_modules == 0 || self.hidden_per_module == 0 || self.input_dim == 0 {
            return err("module count, hidden size and input size must be positive".into());
        }
        if self.n_active == 0 || self.n_active > self.n_modules {
            return err(format!(
                "need 1 <= k <= N, got k={} N={}",
                self.n_active, self.n_modules
            ));
        }
        for (name, dim, heads) in [
            ("key_dim", self.key_dim, self.n_heads_input),
            ("value_dim", self.value_dim, self.n_heads_input),
            ("comm_key_dim", self.comm_key_dim, self.n_heads_comm),
            ("comm_value_dim", self.comm_value_dim, self.n_heads_comm),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return err(format!("{name}={dim} not divisible by {heads} heads"));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n_modules * self.hidden_per_module
    }
}

/// Parameter handles of one RIM layer.
///
/// Module parameters (`query`, `gru_*`) hold one slice per module along
/// axis 0; nothing is shared between modules. The remaining handles form the
/// attention parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RimParams {
    pub query: ParamId,
    pub gru_wx: ParamId,
    pub gru_wh: ParamId,
    pub gru_bx: ParamId,
    pub gru_bh: ParamId,
    pub in_key: ParamId,
    pub in_value: ParamId,
    pub in_out: ParamId,
    pub null_row: ParamId,
    pub comm_query: ParamId,
    pub comm_key: ParamId,
    pub comm_value: ParamId,
    pub comm_out: ParamId,
}

impl RimParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &RimConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (n, h, dk, dv) = (cfg.n_modules, cfg.hidden_per_module, cfg.key_dim, cfg.value_dim);
        let (din, ck, cv) = (cfg.input_dim, cfg.comm_key_dim, cfg.comm_value_dim);
        let s = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        use ParamRole::*;
        Ok(Self {
            query: store.add_uniform("rim.query", ModuleQuery, &[n, h, dk], s(h), rng),
            gru_wx: store.add_uniform("rim.gru.wx", ModuleDynamics, &[n, dv, 3 * h], s(h), rng),
            gru_wh: store.add_uniform("rim.gru.wh", ModuleDynamics, &[n, h, 3 * h], s(h), rng),
            gru_bx: store.add_uniform("rim.gru.bx", ModuleDynamics, &[n, 1, 3 * h], s(h), rng),
            gru_bh: store.add_uniform("rim.gru.bh", ModuleDynamics, &[n, 1, 3 * h], s(h), rng),
            in_key: store.add_uniform("rim.input.key", InputAttention, &[din, dk], s(din), rng),
            in_value: store.add_uniform("rim.input.value", InputAttention, &[din, dv], s(din), rng),
            in_out: store.add_uniform("rim.input.out", InputAttention, &[dv, dv], s(dv), rng),
            null_row: store.add_uniform("rim.input.null", NullRow, &[1, din], s(din), rng),
            comm_query: store.add_uniform("rim.comm.query", CommAttention, &[h, ck], s(h), rng),
            comm_key: store.add_uniform("rim.comm.key", CommAttention, &[h, ck], s(h), rng),
            comm_value: store.add_uniform("rim.comm.value", CommAttention, &[h, cv], s(h), rng),
            comm_out: store.add_uniform("rim.comm.out", CommAttention, &[cv, h], s(cv), rng),
        })
    }

    pub fn module_ids(&self) -> [ParamId; 5] {
        [self.query, self.gru_wx, self.gru_wh, self.gru_bx, self.gru_bh]
    }

    pub fn dynamics_ids(&self) -> [ParamId; 4] {
        [self.gru_wx, self.gru_wh, self.gru_bx, self.gru_bh]
    }

    pub fn attention_ids(&self) -> [ParamId; 8] {
        [
            self.in_key,
            self.in_value,
            self.in_out,
            self.null_row,
            self.comm_query,
            self.comm_key,
            self.comm_value,
            self.comm_out,
        ]
    }
}

/// Hidden state of a batch of `B` independent RIM instances.
#[derive(Clone, Debug, PartialEq)]
pub struct RimState<T> {
    /// `[N, B, H]`
    pub h: Tensor<T>,
    /// Per batch row, the active modules in selection order.
    pub active: Vec<Vec<usize>>,
    /// Per batch row, the last input-attention score of each module.
    pub input_scores: Vec<Vec<T>>,
}

impl<T: Scalar> RimState<T> {
    pub fn zeros(cfg: &RimConfig, batch: usize) -> Self {
        Self {
            h: Tensor::zeros([cfg.n_modules, batch, cfg.hidden_per_module]),
            active: vec![(0..cfg.n_active).collect(); batch],
            input_scores: vec![vec![T::zero(); cfg.n_modules]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[1]
    }

    /// Hidden vector of module `j` for batch row `b`.
    pub fn module(&self, j: usize, b: usize) -> &[T] {
        let (bs, h) = (self.h.shape()[1], self.h.shape()[2]);
        let off = (j * bs + b) * h;
        &self.h.data()[off..off + h]
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite()
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn select_active<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "cannot select {k} of {} modules",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric {
            op: "select_active",
            detail: "non-finite score".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `softmax(Q Kᵀ / √d_K) V` for `[q, d]` or batched `[B, q, d]` operands.
///
/// Returns `(output, weights)`.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    let r = sq.len();
    if !(r == 2 || r == 3)
        || sk.len() != r
        || sv.len() != r
        || sq[r - 1] != sk[r - 1]
        || sk[r - 2] != sv[r - 2]
        || (r == 3 && (sq[0] != sk[0] || sk[0] != sv[0]))
    {
        return Err(Error::dim("scaled_dot_attention", &sq, &sk));
    }
    let dk = sq[r - 1];
    let kt = tape.transpose(k)?;
    let scores = if r == 2 {
        tape.matmul(q, kt)?
    } else {
        tape.bmm(q, kt)?
    };
    let scores = tape.scale(scores, T::one() / T::lit(dk as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let out = if r == 2 {
        tape.matmul(weights, v)?
    } else {
        tape.bmm(weights, v)?
    };
    Ok((out, weights))
}

/// `[B, L, heads·d]` → `[B·heads, L, d]`
fn split_heads<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d = s[2] / heads;
    let x = tape.reshape(x, &[s[0], s[1], heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[s[0] * heads, s[1], d])
}

/// `[B·heads, L, d]` → `[B, L, heads·d]`
fn merge_heads<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, batch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let heads = s[0] / batch;
    let x = tape.reshape(x, &[batch, heads, s[1], s[2]])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, s[1], heads * s[2]])
}

/// Result of the competition step.
pub struct InputAttention<T> {
    /// `[N, B, value_dim]`
    pub attended: Var,
    /// `[B][N]` attention mass each module puts on the real input, summed over heads.
    pub scores: Vec<Vec<T>>,
    /// `[B][k]`
    pub active: Vec<Vec<usize>>,
    /// `[B·heads, N, 2]`: each module's weights over `[x_t; null]`.
    pub weights: Var,
}

/// Output of a full cell step on a tape.
pub struct StepOutput<T> {
    /// `[N, B, H]`
    pub h: Var,
    pub active: Vec<Vec<usize>>,
    pub scores: Vec<Vec<T>>,
}

/// Adjusts the selected sets after the competition (ablations and tests).
pub type ActiveOverride<'a, T> = &'a mut dyn FnMut(&[Vec<T>], &mut Vec<Vec<usize>>);

/// Differentiable RIM cell bound to a configuration and its parameters.
#[derive(Clone, Copy)]
pub struct RimCell<'a> {
    pub cfg: &'a RimConfig,
    pub params: &'a RimParams,
}

impl<'a> RimCell<'a> {
    pub fn new(cfg: &'a RimConfig, params: &'a RimParams) -> Self {
        Self { cfg, params }
    }

    fn check_state<T: Scalar>(&self, tape: &Tape<'_, T>, h: Var) -> Result<usize> {
        let s = tape.shape(h);
        if s.len() != 3 || s[0] != self.cfg.n_modules || s[2] != self.cfg.hidden_per_module {
            return Err(Error::dim(
                "rim state",
                s,
                &[self.cfg.n_modules, 0, self.cfg.hidden_per_module],
            ));
        }
        Ok(s[1])
    }

    /// Each module queries the candidate rows `[x_t; null]`; modules that put
    /// the most weight on `x_t` win.
    pub fn input_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        x: Var,
    ) -> Result<InputAttention<T>> {
        let batch = self.check_state(tape, h)?;
        let cfg = self.cfg;
        if tape.shape(x) != [batch, cfg.input_dim] {
            return Err(Error::dim("input_attention", tape.shape(x), &[batch, cfg.input_dim]));
        }
        let p = self.params;
        let heads = cfg.n_heads_input;

        let x3 = tape.reshape(x, &[batch, 1, cfg.input_dim])?;
        let null = tape.param(p.null_row);
        let null = tape.broadcast_to(null, &[batch, 1, cfg.input_dim])?;
        let cand = tape.concat(&[x3, null], 1)?;
        let wk = tape.param(p.in_key);
        let wv = tape.param(p.in_value);
        let keys = tape.matmul(cand, wk)?;
        let values = tape.matmul(cand, wv)?;

        let wq = tape.param(p.query);
        let q = tape.bmm(h, wq)?;
        let q = tape.permute(q, &[1, 0, 2])?;

        let qh = split_heads(tape, q, heads)?;
        let kh = split_heads(tape, keys, heads)?;
        let vh = split_heads(tape, values, heads)?;
        let (out, weights) = scaled_dot_attention(tape, qh, kh, vh)?;
        let out = merge_heads(tape, out, batch)?;
        let wo = tape.param(p.in_out);
        let out = tape.matmul(out, wo)?;
        let attended = tape.permute(out, &[1, 0, 2])?;

        let n = cfg.n_modules;
        let w = tape.value(weights).data();
        let mut scores = vec![vec![T::zero(); n]; batch];
        for (b, row) in scores.iter_mut().enumerate() {
            for hd in 0..heads {
                for (j, s) in row.iter_mut().enumerate() {
                    *s += w[((b * heads + hd) * n + j) * 2];
                }
            }
        }
        let active = scores
            .iter()
            .map(|s| select_active(s, cfg.n_active))
            .collect::<Result<Vec<_>>>()?;
        Ok(InputAttention {
            attended,
            scores,
            active,
            weights,
        })
    }

    /// Per-module GRU update; modules outside the active set keep their state.
    pub fn dynamics_step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        attended: Var,
        active: &[Vec<usize>],
    ) -> Result<Var> {
        let batch = self.check_state(tape, h)?;
        let hd = self.cfg.hidden_per_module;
        let p = self.params;
        let (wx, wh) = (tape.param(p.gru_wx), tape.param(p.gru_wh));
        let (bx, bh) = (tape.param(p.gru_bx), tape.param(p.gru_bh));
        let gx = tape.bmm(attended, wx)?;
        let gx = tape.add(gx, bx)?;
        let gh = tape.bmm(h, wh)?;
        let gh = tape.add(gh, bh)?;

        let gx_rz = tape.slice(gx, 2, 0, 2 * hd)?;
        let gh_rz = tape.slice(gh, 2, 0, 2 * hd)?;
        let rz = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice(rz, 2, 0, hd)?;
        let z = tape.slice(rz, 2, hd, hd)?;
        let gx_n = tape.slice(gx, 2, 2 * hd, hd)?;
        let gh_n = tape.slice(gh, 2, 2 * hd, hd)?;
        let rn = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, rn)?;
        let n = tape.tanh(n);
        // (1 - z)·n + z·h  ==  n + z·(h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        let updated = tape.add(n, zd)?;

        let mask = self.mask(active, batch);
        tape.select(&mask, updated, h)
    }

    /// Active modules read from all modules; inactive ones are left untouched.
    ///
    /// Returns the new state and the attention weights `[B·heads, N, N]`.
    pub fn communication_attention<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        active: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let batch = self.check_state(tape, h)?;
        let p = self.params;
        let heads = self.cfg.n_heads_comm;
        let hb = tape.permute(h, &[1, 0, 2])?;
        let (wq, wk, wv) = (
            tape.param(p.comm_query),
            tape.param(p.comm_key),
            tape.param(p.comm_value),
        );
        let q = tape.matmul(hb, wq)?;
        let k = tape.matmul(hb, wk)?;
        let v = tape.matmul(hb, wv)?;
        let qh = split_heads(tape, q, heads)?;
        let kh = split_heads(tape, k, heads)?;
        let vh = split_heads(tape, v, heads)?;
        let (out, weights) = scaled_dot_attention(tape, qh, kh, vh)?;
        let out = merge_heads(tape, out, batch)?;
        let wo = tape.param(p.comm_out);
        let out = tape.matmul(out, wo)?;
        let out = tape.permute(out, &[1, 0, 2])?;
        let updated = tape.add(h, out)?;
        let mask = self.mask(active, batch);
        Ok((tape.select(&mask, updated, h)?, weights))
    }

    /// Competition, independent dynamics, then communication.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        x: Var,
        overrides: Option<ActiveOverride<'_, T>>,
    ) -> Result<StepOutput<T>> {
        let InputAttention {
            attended,
            scores,
            mut active,
            ..
        } = self.input_attention(tape, h, x)?;
        if let Some(f) = overrides {
            f(&scores, &mut active);
        }
        let h1 = self.dynamics_step(tape, h, attended, &active)?;
        let (h2, _) = self.communication_attention(tape, h1, &active)?;
        Ok(StepOutput {
            h: h2,
            active,
            scores,
        })
    }

    /// Elementwise mask over `[N, B, H]` marking active (module, row) pairs.
    fn mask(&self, active: &[Vec<usize>], batch: usize) -> Vec<bool> {
        let (n, hd) = (self.cfg.n_modules, self.cfg.hidden_per_module);
        let mut mask = vec![false; n * batch * hd];
        for (b, set) in active.iter().enumerate().take(batch) {
            for &j in set {
                let off = (j * batch + b) * hd;
                mask[off..off + hd].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// One cell step outside of any training graph.
pub fn rim_step<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &RimConfig,
    params: &RimParams,
    state: &RimState<T>,
    x: &Tensor<T>,
) -> Result<RimState<T>> {
    let mut tape = Tape::with_params(store);
    let h = tape.constant(state.h.clone());
    let xv = tape.constant(x.clone());
    let out = RimCell::new(cfg, params).step(&mut tape, h, xv, None)?;
    Ok(RimState {
        h: tape.value(out.h).clone(),
        active: out.active,
        input_scores: out.scores,
    })
}
