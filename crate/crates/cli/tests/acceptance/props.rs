//! Criteria 1-5: gradients, cell structure, partitions, oracles, environment.

use std::time::Instant;

use metarims::agent::{AgentConfig, CoreKind};
use metarims::autodiff::{check_gradients, check_param_gradients, Tape, Tensor, Var};
use metarims::gridworld::{Action, GridEnv, OraclePolicy, NUM_ACTIONS};
use metarims::metaloop::{make_variant, LoopConfig, Phase};
use metarims::params::{ParamId, ParamRole, ParamStore};
use metarims::rims::{rim_step, select_active, RimCell, RimConfig, RimParams, RimState};
use metarims::rl::*;
use metarims::{Agent64, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n)).unwrap()
}

fn fixed(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

fn tiny_rim(n: usize, k: usize, h: usize, din: usize) -> RimConfig {
    RimConfig {
        n_modules: n,
        n_active: k,
        hidden_per_module: h,
        key_dim: 4,
        value_dim: 6,
        n_heads_input: 2,
        n_heads_comm: 2,
        comm_key_dim: 4,
        comm_value_dim: 4,
        input_dim: din,
    }
}

fn tiny_agent(core: CoreKind) -> AgentConfig {
    AgentConfig {
        core,
        rim: RimConfig {
            n_modules: 3,
            n_active: 2,
            hidden_per_module: 3,
            key_dim: 4,
            value_dim: 4,
            n_heads_input: 2,
            n_heads_comm: 2,
            comm_key_dim: 2,
            comm_value_dim: 2,
            input_dim: 5,
        },
        lstm_hidden: 4,
        encoder_dim: 3,
        mission_dim: 2,
        head_hidden: 3,
    }
}

/// Moves every parameter to a generic point near initialization.
fn spread(agent: &mut Agent64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = agent.store.ids().collect();
    for id in ids {
        for v in agent.store.value_mut(id).data_mut() {
            *v = 2.0 * *v + 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
}

fn obs(task: &str) -> metarims::gridworld::Observation {
    GridEnv::new(&task.parse().unwrap()).unwrap().observe()
}

// ---- criterion 1 ---------------------------------------------------------

type Prim = (&'static str, Vec<usize>, fn(&mut Tape<'static, f64>, Var) -> Result<Var>);

fn primitives() -> Vec<Prim> {
    vec![
        ("matmul", vec![3, 4], |t, x| {
            let w = t.constant(fixed(&[4, 2], 11));
            t.matmul(x, w)
        }),
        ("matmul_rhs", vec![4, 2], |t, x| {
            let a = t.constant(fixed(&[3, 4], 12));
            t.matmul(a, x)
        }),
        ("bmm", vec![2, 3, 4], |t, x| {
            let w = t.constant(fixed(&[2, 4, 3], 13));
            t.bmm(x, w)
        }),
        ("bmm_rhs", vec![2, 4, 3], |t, x| {
            let a = t.constant(fixed(&[2, 3, 4], 14));
            t.bmm(a, x)
        }),
        ("transpose", vec![2, 3, 4], |t, x| t.transpose(x)),
        ("permute", vec![2, 3, 4, 2], |t, x| t.permute(x, &[2, 0, 3, 1])),
        ("reshape", vec![3, 4], |t, x| t.reshape(x, &[2, 6])),
        ("broadcast_to", vec![3, 1, 2], |t, x| t.broadcast_to(x, &[2, 3, 4, 2])),
        ("add", vec![2, 1, 3], |t, x| {
            let b = t.constant(fixed(&[4, 1], 15));
            t.add(x, b)
        }),
        ("sub", vec![3, 4], |t, x| {
            let b = t.constant(fixed(&[4], 16));
            let d = t.sub(b, x)?;
            t.sub(d, x)
        }),
        ("mul", vec![3, 4], |t, x| {
            let b = t.constant(fixed(&[3, 1], 17));
            t.mul(x, b)
        }),
        ("mul_self", vec![5], |t, x| t.mul(x, x)),
        ("neg", vec![5], |t, x| Ok(t.neg(x))),
        ("scale", vec![5], |t, x| Ok(t.scale(x, 1.7))),
        ("add_scalar", vec![5], |t, x| Ok(t.add_scalar(x, -0.3))),
        ("exp", vec![5], |t, x| Ok(t.exp(x))),
        ("log", vec![5], |t, x| {
            let e = t.exp(x);
            let p = t.add_scalar(e, 0.5);
            Ok(t.log(p))
        }),
        ("tanh", vec![5], |t, x| Ok(t.tanh(x))),
        ("sigmoid", vec![5], |t, x| Ok(t.sigmoid(x))),
        ("softmax", vec![2, 3, 5], |t, x| t.softmax(x)),
        ("softmax_rows", vec![3, 4], |t, x| t.softmax_rows(x)),
        ("log_softmax", vec![4, 7], |t, x| t.log_softmax(x)),
        ("concat", vec![2, 3], |t, x| {
            let b = t.constant(fixed(&[2, 2], 18));
            let s = t.scale(x, 2.0);
            t.concat(&[x, b, s], 1)
        }),
        ("slice", vec![3, 6], |t, x| t.slice(x, 1, 2, 3)),
        ("embedding", vec![5, 3], |t, x| t.embedding(x, &[4, 0, 4, 2])),
        ("embedding_bag", vec![5, 3], |t, x| {
            t.embedding_bag(x, &[vec![0, 1, 1], vec![4], vec![2, 3]], false)
        }),
        ("embedding_bag_mean", vec![5, 3], |t, x| {
            t.embedding_bag(x, &[vec![0, 3], vec![1, 2, 4]], true)
        }),
        ("sum", vec![2, 3], |t, x| Ok(t.sum(x))),
        ("sum_axis", vec![2, 3, 4], |t, x| t.sum_axis(x, 1)),
        ("mean", vec![2, 3], |t, x| Ok(t.mean(x))),
        ("select", vec![2, 3], |t, x| {
            let b = t.scale(x, -3.0);
            t.select(&[true, false, true, true, false, false], x, b)
        }),
        ("minimum", vec![6], |t, x| {
            let b = t.constant(fixed(&[6], 19));
            t.minimum(x, b)
        }),
        ("clamp", vec![6], |t, x| Ok(t.clamp(x, -0.5, 0.5))),
        ("pick", vec![3, 4], |t, x| t.pick(x, &[3, 0, 2])),
    ]
}

fn readout(t: &mut Tape<'static, f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(fixed(&shape, 99));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Keeps piecewise primitives away from their kinks.
fn off_kinks(name: &str, x: &mut Tensor<f64>) {
    if name == "clamp" {
        for v in x.data_mut() {
            if (v.abs() - 0.5).abs() < 0.05 {
                *v = 0.2;
            }
        }
    }
    if name == "minimum" {
        let b = fixed(&[6], 19);
        for (v, bv) in x.data_mut().iter_mut().zip(b.data()) {
            if (*v - bv).abs() < 1e-3 {
                *v += 0.1;
            }
        }
    }
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);

    for (name, shape, op) in primitives() {
        let mut w: f64 = 0.0;
        for _ in 0..20 {
            let mut x = rand_tensor(&mut rng, &shape);
            off_kinks(name, &mut x);
            let e = check_gradients(
                |t, x| {
                    let y = op(t, x)?;
                    readout(t, y)
                },
                &x,
                STEP,
            );
            w = w.max(e.unwrap_or(f64::INFINITY));
        }
        worst.push((name.to_string(), w));
    }

    let cfg = tiny_rim(3, 2, 3, 4);
    let mut w: f64 = 0.0;
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let params = RimParams::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            let n = store.value(id).len();
            let v = rand_vec(&mut r, n);
            for (d, x) in store.value_mut(id).data_mut().iter_mut().zip(v) {
                *d = 0.5 * x;
            }
        }
        let h0 = rand_tensor(&mut r, &[3, 2, 3]);
        let x = rand_tensor(&mut r, &[2, 4]);
        let read = rand_tensor(&mut r, &[3, 2, 3]);
        let fixed_sets = vec![vec![2, 0], vec![1, 2]];
        let e = check_param_gradients(
            &store,
            &ids,
            |t| {
                let h = t.constant(h0.clone());
                let xv = t.constant(x.clone());
                let mut f = |_: &[Vec<f64>], a: &mut Vec<Vec<usize>>| *a = fixed_sets.clone();
                let cell = RimCell::new(&cfg, &params);
                let o = cell.step(t, h, xv, Some(&mut f))?;
                let o = cell.step(t, o.h, xv, Some(&mut f))?;
                let rv = t.constant(read.clone());
                let p = t.mul(o.h, rv)?;
                let s = t.sum(p);
                Ok(t.tanh(s))
            },
            STEP,
        );
        w = w.max(e.unwrap_or(f64::INFINITY));
    }
    worst.push(("rim_cell".into(), w));

    let mut w_unroll: f64 = 0.0;
    let mut w_ppo: f64 = 0.0;
    for core in [CoreKind::Rims, CoreKind::Lstm] {
        for seed in 0..2 {
            let mut agent = Agent64::new(tiny_agent(core), seed).unwrap();
            spread(&mut agent, 60 + seed);
            let o0 = [obs("doorkey:5:seed=1"), obs("gotoobj:6:seed=2")];
            let o1 = [obs("doorkey:5:seed=7"), obs("gotoobj:6:seed=8")];
            let sets = vec![vec![0, 2], vec![1, 0]];
            let ids: Vec<ParamId> = agent.store.ids().collect();
            let net = agent.net();
            let init = agent.initial_state(2);
            let e = check_param_gradients(
                &agent.store,
                &ids,
                |t| {
                    let s = init.to_vars(t);
                    let mut f = |_: &[Vec<f64>], a: &mut Vec<Vec<usize>>| *a = sets.clone();
                    let a = net.step(t, s, &[&o0[0], &o0[1]], Some(&mut f))?;
                    let b = net.step(t, a.state, &[&o1[0], &o1[1]], Some(&mut f))?;
                    let lp = t.pick(b.logits, &[3, 5])?;
                    let v = t.mul(b.value, b.value)?;
                    let (x, y) = (t.sum(lp), t.sum(v));
                    t.add(x, y)
                },
                STEP,
            );
            w_unroll = w_unroll.max(e.unwrap_or(f64::INFINITY));
        }

        let mut agent = Agent64::new(tiny_agent(core), 11).unwrap();
        let tasks = TaskDistribution::single("gotoobj:5".parse().unwrap());
        let mut pool = EnvPool::new(&agent, tasks, 2, 3).unwrap();
        let ro = collect_rollout(&mut pool, &agent, 4, true, 1).unwrap();
        let (mut adv, ret) = rollout_advantages(&ro, &GaeConfig::default()).unwrap();
        for (t, row) in adv.iter_mut().enumerate() {
            for (b, a) in row.iter_mut().enumerate() {
                *a += 0.3 * (t as f64 - 1.5) + 0.2 * b as f64;
            }
        }
        spread(&mut agent, 40);
        let ids: Vec<ParamId> = agent.store.ids().collect();
        let net = agent.net();
        let cfg = PpoConfig {
            clip_eps: 0.5,
            ..Default::default()
        };
        let e = check_param_gradients(
            &agent.store,
            &ids,
            |t| Ok(ppo_loss(t, net, &ro, &[0, 1], &adv, &ret, &cfg, true)?.total),
            STEP,
        );
        w_ppo = w_ppo.max(e.unwrap_or(f64::INFINITY));
    }
    worst.push(("agent_unroll".into(), w_unroll));
    worst.push(("ppo_loss".into(), w_ppo));

    let elapsed = start.elapsed().as_secs_f64();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Outcome::new(
        bad.is_empty() && elapsed < 60.0,
        format!(
            "{} checks, max relative error {max:.2e}, {elapsed:.1}s{}",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(" ")) }
        ),
    )
}

// ---- criterion 2 ---------------------------------------------------------

fn rows_sum_to_one(w: &Tensor<f64>, width: usize) -> f64 {
    w.data()
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn structure() -> Outcome {
    let cfg = RimConfig::default();
    let (n, k, hd) = (cfg.n_modules, cfg.n_active, cfg.hidden_per_module);
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut calls = 0usize;
    let mut failures: Vec<String> = Vec::new();
    let mut worst_row: f64 = 0.0;

    for case in 0..100u64 {
        let mut store = ParamStore::new();
        let params = RimParams::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(case)).unwrap();
        let batch = 1 + (case as usize % 4);
        let mut state = RimState::zeros(&cfg, batch);
        state.h = rand_tensor(&mut rng, &[n, batch, hd]);
        for _ in 0..100 {
            let scale = rng.gen_range(0.1..3.0);
            let xs: Vec<f64> = rand_vec(&mut rng, batch * cfg.input_dim).into_iter().map(|v| v * scale).collect();
            let x = Tensor::new(vec![batch, cfg.input_dim], xs).unwrap();

            let mut tape = Tape::with_params(&store);
            let h = tape.constant(state.h.clone());
            let xv = tape.constant(x.clone());
            let cell = RimCell::new(&cfg, &params);
            let ia = cell.input_attention(&mut tape, h, xv).unwrap();
            let h1 = cell.dynamics_step(&mut tape, h, ia.attended, &ia.active).unwrap();
            let (h2, cw) = cell.communication_attention(&mut tape, h1, &ia.active).unwrap();
            worst_row = worst_row
                .max(rows_sum_to_one(tape.value(ia.weights), 2))
                .max(rows_sum_to_one(tape.value(cw), n));

            let next = rim_step(&store, &cfg, &params, &state, &x).unwrap();
            calls += 1;
            if &next.h != tape.value(h2) || next.active != ia.active {
                failures.push(format!("case {case}: rim_step differs from its stages"));
            }
            for b in 0..batch {
                let set = &next.active[b];
                let mut uniq = set.clone();
                uniq.sort_unstable();
                uniq.dedup();
                if set.len() != k || uniq.len() != k || set.iter().any(|&j| j >= n) {
                    failures.push(format!("case {case}: active set {set:?}"));
                }
                for j in (0..n).filter(|j| !set.contains(j)) {
                    let before: Vec<u64> = state.module(j, b).iter().map(|v| v.to_bits()).collect();
                    let after: Vec<u64> = next.module(j, b).iter().map(|v| v.to_bits()).collect();
                    if before != after {
                        failures.push(format!("case {case}: inactive module {j} changed"));
                    }
                }
            }
            state = next;
        }
    }
    if worst_row > 1e-9 {
        failures.push(format!("attention row sum off by {worst_row:.2e}"));
    }

    let mut perm_worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut store = ParamStore::new();
        let params = RimParams::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5000 + case)).unwrap();
        let mut state = RimState::zeros(&cfg, 1);
        state.h = rand_tensor(&mut rng, &[n, 1, hd]);
        let x = rand_tensor(&mut rng, &[1, cfg.input_dim]);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // new index j holds old module perm[j]
        let mut pstore = store.clone();
        for id in params.module_ids() {
            let src = store.value(id).data().to_vec();
            let per = src.len() / n;
            let dst = pstore.value_mut(id).data_mut();
            for (j, &o) in perm.iter().enumerate() {
                dst[j * per..(j + 1) * per].copy_from_slice(&src[o * per..(o + 1) * per]);
            }
        }
        let mut pstate = state.clone();
        for (j, &o) in perm.iter().enumerate() {
            let src = state.module(o, 0).to_vec();
            pstate.h.data_mut()[j * hd..(j + 1) * hd].copy_from_slice(&src);
        }
        let a = rim_step(&store, &cfg, &params, &state, &x).unwrap();
        let b = rim_step(&pstore, &cfg, &params, &pstate, &x).unwrap();
        for (j, &o) in perm.iter().enumerate() {
            perm_worst = perm_worst.max((b.input_scores[0][j] - a.input_scores[0][o]).abs());
            if b.active[0].contains(&j) != a.active[0].contains(&o) {
                failures.push(format!("perm case {case}: active sets disagree"));
            }
            for (p, q) in b.module(j, 0).iter().zip(a.module(o, 0)) {
                perm_worst = perm_worst.max((p - q).abs());
            }
        }
    }
    if perm_worst > 1e-10 {
        failures.push(format!("permutation mismatch {perm_worst:.2e}"));
    }
    failures.dedup();
    Outcome::new(
        failures.is_empty(),
        format!(
            "{calls} steps, row-sum error {worst_row:.1e}, 100 permutations within {perm_worst:.1e}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures[..failures.len().min(3)].join("; ")) }
        ),
    )
}

// ---- criterion 3 ---------------------------------------------------------

pub fn partitions() -> Outcome {
    let loop_cfg = LoopConfig {
        t_in: 8,
        envs: 4,
        workers: 1,
        ..Default::default()
    };
    let tasks = TaskDistribution::single("gotoobj:6".parse().unwrap());
    let mut failures = Vec::new();
    let mut counted = Vec::new();
    for (variant, updates) in [("metaRims", 100usize), ("metaFlip", 20), ("metaLstm", 20)] {
        let mut t = make_variant::<f64>(
            variant,
            AgentConfig::default(),
            loop_cfg.clone(),
            PpoConfig::default(),
            GaeConfig::default(),
            tasks.clone(),
            3,
        )
        .unwrap();
        let (fast, slow) = (t.partition.fast.clone(), t.partition.slow.clone());
        let mut moved = 0;
        for i in 0..updates {
            let hs = t.agent.store.content_hash(slow.clone());
            let hf = t.agent.store.content_hash(fast.clone());
            let m = if i % 2 == 0 { t.inner_update() } else { t.outer_update() }.unwrap();
            let (hs2, hf2) = (
                t.agent.store.content_hash(slow.clone()),
                t.agent.store.content_hash(fast.clone()),
            );
            match m.phase {
                Phase::Inner => {
                    if hs != hs2 {
                        failures.push(format!("{variant} update {i}: slow set moved in inner update"));
                    }
                    moved += (hf != hf2) as usize;
                }
                Phase::Outer => {
                    if hf != hf2 {
                        failures.push(format!("{variant} update {i}: fast set moved in outer update"));
                    }
                    moved += (hs != hs2) as usize;
                }
                Phase::Single => failures.push(format!("{variant}: single-loop update")),
            }
        }
        if moved < updates {
            failures.push(format!("{variant}: only {moved}/{updates} updates moved their own set"));
        }
        counted.push(format!("{variant} {updates}"));
    }

    // Modules never selected get exactly zero gradient on their dynamics.
    let cfg = RimConfig::default();
    let mut store = ParamStore::new();
    let params = RimParams::init(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trainable = vec![true; store.len()];
    let mut tape = Tape::with_trainable(&store, &trainable);
    let mut h = tape.constant(rand_tensor(&mut rng, &[cfg.n_modules, 3, cfg.hidden_per_module]));
    let mut excl = |_: &[Vec<f64>], a: &mut Vec<Vec<usize>>| {
        for set in a.iter_mut() {
            set.retain(|&j| j != 4);
            if set.len() < 3 {
                set.push((0..4).find(|j| !set.contains(j)).unwrap());
            }
        }
    };
    for _ in 0..6 {
        let x = tape.constant(rand_tensor(&mut rng, &[3, cfg.input_dim]));
        h = RimCell::new(&cfg, &params).step(&mut tape, h, x, Some(&mut excl)).unwrap().h;
    }
    let s = tape.sum(h);
    let g = tape.backward(s).unwrap();
    let mut zero_ok = true;
    for id in params.dynamics_ids().into_iter().chain([params.query]) {
        let grad = g.param(id).unwrap();
        let per = grad.len() / cfg.n_modules;
        zero_ok &= grad.data()[4 * per..].iter().all(|&v| v == 0.0);
        zero_ok &= grad.data()[..per].iter().any(|&v| v != 0.0);
    }
    if !zero_ok {
        failures.push("never-active module has dynamics gradient".into());
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "alternating updates ({}); never-active module gradient {}{}",
            counted.join(", "),
            if zero_ok { "exactly zero" } else { "nonzero" },
            if failures.is_empty() { String::new() } else { format!("; {}", failures[..failures.len().min(3)].join("; ")) }
        ),
    )
}

// ---- criterion 4 ---------------------------------------------------------

/// Â_t = Σ_l (γλ)^l δ_{t+l}, cut after the first terminal step.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n { v[t + 1] } else { boot };
            r[t] + g * next * if d[t] { 0.0 } else { 1.0 } - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                total += (g * l).powi((k - t) as i32) * delta[k];
                if d[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut notes = Vec::new();
    let mut ok = true;

    let mut gae_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let r = rand_vec(&mut rng, n);
        let v: Vec<f64> = rand_vec(&mut rng, n).into_iter().map(|x| 2.0 * x).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let boot = rng.gen_range(-2.0..2.0);
        let (g, l) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
        let (adv, _) = compute_gae(&r, &v, &d, boot, &GaeConfig { gamma: g, lambda: l }).unwrap();
        for (a, b) in adv.iter().zip(gae_oracle(&r, &v, &d, boot, g, l)) {
            gae_err = gae_err.max((a - b).abs());
        }
    }
    ok &= gae_err <= 1e-10;
    notes.push(format!("gae {gae_err:.1e}"));

    let mut ppo_err: f64 = 0.0;
    for _ in 0..200 {
        let cfg = PpoConfig {
            clip_eps: rng.gen_range(0.05..0.4),
            value_coef: rng.gen_range(0.0..1.0),
            entropy_coef: rng.gen_range(0.0..0.1),
            ..Default::default()
        };
        let logits: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, NUM_ACTIONS)).collect();
        let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
        let actions: Vec<usize> = (0..3).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
        let ratio: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.6)).collect();
        let old: Vec<f64> = (0..3).map(|i| lp[i][actions[i]] - ratio[i].ln()).collect();
        let adv = rand_vec(&mut rng, 3);
        let values = rand_vec(&mut rng, 3);
        let returns = rand_vec(&mut rng, 3);

        let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let mut clip = 0.0;
        let mut value = 0.0;
        let mut entropy = 0.0;
        for i in 0..3 {
            let r = (lp[i][actions[i]] - old[i]).exp();
            clip += (r * adv[i]).min(r.clamp(lo, hi) * adv[i]) / 3.0;
            value += (values[i] - returns[i]).powi(2) / 3.0;
            entropy -= lp[i].iter().map(|&l| l.exp() * l).sum::<f64>() / 3.0;
        }
        for use_value in [true, false] {
            let mut tape: Tape<'static, f64> = Tape::new();
            let flat: Vec<f64> = logits.iter().flatten().copied().collect();
            let lg = tape.leaf(Tensor::new(vec![3, NUM_ACTIONS], flat).unwrap(), true);
            let lpv = tape.log_softmax(lg).unwrap();
            let vv = tape.leaf(Tensor::new(vec![3, 1], values.clone()).unwrap(), true);
            let t = ppo_terms(&mut tape, lpv, &actions, &old, &adv, vv, &returns, &cfg, use_value).unwrap();
            let total = if use_value {
                -(clip - cfg.value_coef * value + cfg.entropy_coef * entropy)
            } else {
                -(clip + cfg.entropy_coef * entropy)
            };
            for (got, want) in [
                (tape.item(t.clip), clip),
                (tape.item(t.value), value),
                (tape.item(t.entropy), entropy),
                (tape.item(t.total), total),
            ] {
                ppo_err = ppo_err.max((got - want).abs());
            }
        }
    }
    ok &= ppo_err <= 1e-10;
    notes.push(format!("ppo {ppo_err:.1e}"));

    let mut adam_err: f64 = 0.0;
    for case in 0..20 {
        let size = 1 + case % 6;
        let init = rand_vec(&mut rng, size);
        let mut store = ParamStore::new();
        let id = store.add("p", ParamRole::PolicyHead, Tensor::row(init.clone()));
        let (b1, b2, eps, lr) = (
            rng.gen_range(0.5..0.95),
            rng.gen_range(0.9..0.9999),
            1e-8,
            rng.gen_range(1e-4..1e-2),
        );
        let cfg = PpoConfig {
            max_grad_norm: 0.0,
            adam_beta1: b1,
            adam_beta2: b2,
            adam_eps: eps,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&cfg);
        let groups = [UpdateGroup { ids: vec![id], lr }];
        let mut theta = init;
        let (mut m, mut v) = (vec![0.0; size], vec![0.0; size]);
        for t in 1..=25 {
            let g: Vec<f64> = rand_vec(&mut rng, size).into_iter().map(|x| 2.0 * x).collect();
            opt.apply_update(&mut store, &groups, &[Some(Tensor::row(g.clone()))]).unwrap();
            for i in 0..size {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
                adam_err = adam_err.max((store.value(id).data()[i] - theta[i]).abs());
            }
        }
    }
    ok &= adam_err <= 1e-12;
    notes.push(format!("adam {adam_err:.1e}"));

    let mut sel_bad = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=n);
        // coarse values so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        sel_bad += (select_active(&scores, k).unwrap() != idx) as usize;
    }
    ok &= sel_bad == 0;
    notes.push(format!("select_active {sel_bad}/1000 mismatches"));
    Outcome::new(ok, notes.join(", "))
}

// ---- criterion 5 ---------------------------------------------------------

const TASKS: [&str; 7] = [
    "gotoobj:6",
    "gotolocal:6",
    "fetch:6",
    "doorkey:5",
    "dynobs:6",
    "memory:5",
    "putnear:6",
];

fn episode_trace(task: &str, seed: u64, actions: &[usize]) -> String {
    let mut env = GridEnv::new(&format!("{task}:seed={seed}").parse().unwrap()).unwrap();
    let mut out = format!("{:?}\n", env.observe());
    for &a in actions {
        if env.is_done() {
            break;
        }
        out.push_str(&format!("{:?}\n", env.step(Action::from_index(a).unwrap()).unwrap()));
    }
    out
}

pub fn environment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut failures = Vec::new();
    let (mut successes, mut timeouts, mut failed) = (0usize, 0usize, 0usize);

    for task in TASKS {
        for ep in 0..1000u64 {
            let mut env = GridEnv::new(&format!("{task}:seed={ep}").parse().unwrap()).unwrap();
            let mut planner = OraclePolicy::new();
            // mostly planned, partly random, so lengths and outcomes vary
            let eps = [0.0, 0.2, 0.5, 1.0][ep as usize % 4];
            loop {
                let a = if rng.gen_bool(eps) {
                    Action::from_index(rng.gen_range(0..NUM_ACTIONS)).unwrap()
                } else {
                    planner.act(&env)
                };
                let r = env.step(a).unwrap();
                if !r.done {
                    if r.reward != 0.0 {
                        failures.push(format!("{task} {ep}: reward before the end"));
                    }
                    continue;
                }
                let (n, n_max) = (env.steps(), env.max_steps());
                if r.success {
                    successes += 1;
                    let want = 1.0 - 0.9 * (n as f64 / n_max as f64);
                    if r.reward != want {
                        failures.push(format!("{task} {ep}: reward {} for n={n}, want {want}", r.reward));
                    }
                } else {
                    if n == n_max {
                        timeouts += 1;
                    } else {
                        failed += 1;
                    }
                    if r.reward != 0.0 {
                        failures.push(format!("{task} {ep}: unsuccessful episode paid {}", r.reward));
                    }
                }
                break;
            }
        }
    }
    if successes == 0 || timeouts == 0 {
        failures.push(format!("outcomes not varied: {successes} successes, {timeouts} timeouts"));
    }

    let mut unsolvable = 0;
    for task in TASKS {
        for seed in 0..1000u64 {
            let env = GridEnv::new(&format!("{task}:seed={}", 100_000 + seed).parse().unwrap()).unwrap();
            unsolvable += (!env.is_solvable()) as usize;
        }
    }
    if unsolvable > 0 {
        failures.push(format!("{unsolvable} unsolvable instances"));
    }

    let mut nondeterministic = 0;
    for task in TASKS {
        for seed in 0..50u64 {
            let actions: Vec<usize> = (0..200).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
            nondeterministic += (episode_trace(task, seed, &actions) != episode_trace(task, seed, &actions)) as usize;
        }
    }
    let mut env = GridEnv::new(&"doorkey:6".parse().unwrap()).unwrap();
    let first = format!("{:?}", env.reset(42).unwrap());
    env.step(Action::Forward).unwrap();
    nondeterministic += (first != format!("{:?}", env.reset(42).unwrap())) as usize;
    if nondeterministic > 0 {
        failures.push(format!("{nondeterministic} nondeterministic replays"));
    }
    if !training_is_repeatable() {
        failures.push("deterministic training runs differ".into());
    }

    Outcome::new(
        failures.is_empty(),
        format!(
            "{} episodes ({successes} successes, {timeouts} timeouts, {failed} failures), {} instances solvable, replays identical{}",
            TASKS.len() * 1000,
            TASKS.len() * 1000 - unsolvable,
            if failures.is_empty() { String::new() } else { format!("; {}", failures[..failures.len().min(3)].join("; ")) }
        ),
    )
}

/// Two deterministic training runs give byte-identical metrics and checkpoints.
fn training_is_repeatable() -> bool {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = metarims_cli::RunConfig::load(
            None,
            &[
                format!("out_dir=\"{}\"", dir.path().display()),
                "frames=3000".into(),
                "loop.deterministic=true".into(),
                "loop.envs=4".into(),
                "loop.t_in=8".into(),
                "checkpoint_every=0".into(),
            ],
        )
        .unwrap();
        metarims_cli::commands::train(&cfg).unwrap();
        let d = dir.path().join("metaRims/seed-0");
        (
            std::fs::read(d.join("metrics.csv")).unwrap(),
            std::fs::read(d.join("checkpoint-final.txt")).unwrap(),
        )
    };
    run() == run()
}
