//! Criteria 6-10: desk-scale training comparisons.
//!
//! Runs are shared between criteria: the GoToObj metaRims runs feed 6, 7 and
//! 10, the DoorKey runs feed 7, 8 and 9.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use metarims::agent::AgentConfig;
use metarims::metaloop::{make_variant, Flow, LoopConfig, UpdateMetrics, VariantName};
use metarims::rl::{evaluate, EvalOptions, GaeConfig, PpoConfig, TaskDistribution};
use metarims::Agent64;
use metarims_cli::commands::{deactivation_medians, deactivation_rows, threshold_crossing};
use metarims_cli::report::median;

use crate::Outcome;

pub const BUDGET: u64 = 500_000;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const THRESHOLD: f64 = 0.9;
const GREEDY_TARGET: f64 = 0.95;
const GREEDY_EPISODES: usize = 100;
/// Updates between greedy evaluations while chasing the greedy target.
const GREEDY_EVERY: u64 = 10;

pub struct RunResult {
    pub seed: u64,
    /// First update with a full window at success ≥ 0.9.
    pub crossing: Option<u64>,
    /// First greedy evaluation at success ≥ 0.95, when tracked.
    pub greedy: Option<u64>,
    pub frames: u64,
    pub wall: Duration,
    pub agent: Agent64,
}

fn task(s: &str) -> TaskDistribution {
    TaskDistribution::single(s.parse().unwrap())
}

/// Trains with default settings until the window crosses 0.9 (and, when
/// `track_greedy`, a greedy evaluation reaches 0.95) or the budget runs out.
pub fn train(variant: VariantName, spec: &str, seed: u64, track_greedy: bool) -> RunResult {
    let start = Instant::now();
    let mut t = make_variant::<f64>(
        variant.as_str(),
        AgentConfig::default(),
        LoopConfig::default(),
        PpoConfig::default(),
        GaeConfig::default(),
        task(spec),
        seed,
    )
    .unwrap();
    let window = t.loop_cfg.window;
    let eval_tasks = task(spec);
    let mut all: Vec<UpdateMetrics> = Vec::new();
    let mut greedy = None;
    t.train(BUDGET, |m, agent| {
        all.push(m.clone());
        if track_greedy && greedy.is_none() && m.updates % GREEDY_EVERY == 0 && m.success_rate >= 0.5 {
            let rep = evaluate(agent, &eval_tasks, GREEDY_EPISODES, 9_000 + seed, EvalOptions::default())?;
            if rep.success_rate >= GREEDY_TARGET {
                greedy = Some(m.frames);
            }
        }
        let crossed = threshold_crossing(std::slice::from_ref(m), THRESHOLD, window).is_some();
        let done = crossed && (!track_greedy || greedy.is_some());
        Ok(if done { Flow::Stop } else { Flow::Continue })
    })
    .unwrap();
    let r = RunResult {
        seed,
        crossing: threshold_crossing(&all, THRESHOLD, window),
        greedy,
        frames: t.frames(),
        wall: start.elapsed(),
        agent: t.agent,
    };
    eprintln!(
        "  {variant} {spec} seed {seed}: crossing {}, greedy {}, {} frames, {:.0}s",
        fmt_frames(r.crossing),
        if track_greedy { fmt_frames(r.greedy) } else { "-".into() },
        r.frames,
        r.wall.as_secs_f64()
    );
    r
}

pub fn fmt_frames(f: Option<u64>) -> String {
    f.map_or_else(|| "never".into(), |v| v.to_string())
}

fn frames_median(f: impl Iterator<Item = Option<u64>>) -> f64 {
    let v: Vec<f64> = f.map(|x| x.map_or(f64::INFINITY, |v| v as f64)).collect();
    median(&v).unwrap_or(f64::INFINITY)
}

fn fmt_median(m: f64) -> String {
    if m.is_finite() {
        format!("{m:.0}")
    } else {
        "never".into()
    }
}

/// All training the quantitative criteria need, keyed by (variant, task).
#[derive(Default)]
pub struct Runs {
    pub by: BTreeMap<(VariantName, &'static str), Vec<RunResult>>,
}

impl Runs {
    pub fn ensure(&mut self, variant: VariantName, spec: &'static str, track_greedy: bool) -> &[RunResult] {
        self.by.entry((variant, spec)).or_insert_with(|| {
            eprintln!("training {variant} on {spec}, {} seeds", SEEDS.len());
            SEEDS.iter().map(|&s| train(variant, spec, s, track_greedy)).collect()
        })
    }

    fn crossings(&self, v: VariantName, spec: &'static str) -> f64 {
        frames_median(self.by[&(v, spec)].iter().map(|r| r.crossing))
    }
}

pub const GOTOOBJ: &str = "gotoobj:6";
pub const GOTOLOCAL: &str = "gotolocal:6";
pub const DOORKEY: &str = "doorkey:5";

pub fn trainability(runs: &mut Runs) -> Outcome {
    let first3: Vec<(u64, Option<u64>, Duration)> = runs
        .ensure(VariantName::MetaRims, GOTOOBJ, true)
        .iter()
        .take(3)
        .map(|r| (r.seed, r.greedy, r.wall))
        .collect();
    let med = frames_median(first3.iter().map(|r| r.1));
    let wall: f64 = first3.iter().map(|r| r.2.as_secs_f64()).sum();
    let per: Vec<String> = first3.iter().map(|r| format!("s{}={}", r.0, fmt_frames(r.1))).collect();
    Outcome::new(
        med <= BUDGET as f64 && wall <= 45.0 * 60.0,
        format!(
            "greedy S>=0.95 frames {} (median {}), wall {:.1} min",
            per.join(" "),
            fmt_median(med),
            wall / 60.0
        ),
    )
}

pub fn sample_efficiency(runs: &mut Runs) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for spec in [GOTOOBJ, GOTOLOCAL, DOORKEY] {
        runs.ensure(VariantName::MetaRims, spec, spec == GOTOOBJ);
        runs.ensure(VariantName::Vanilla, spec, false);
        let m = runs.crossings(VariantName::MetaRims, spec);
        let v = runs.crossings(VariantName::Vanilla, spec);
        let win = m.is_finite() && m <= v;
        wins += win as usize;
        parts.push(format!(
            "{spec} metaRims {} vs vanilla {} {}",
            fmt_median(m),
            fmt_median(v),
            if win { "ok" } else { "worse" }
        ));
    }
    Outcome::new(wins >= 2, format!("{wins}/3 tasks: {}", parts.join("; ")))
}

pub fn deactivation(runs: &mut Runs) -> Outcome {
    let trained = runs.ensure(VariantName::MetaRims, DOORKEY, false);
    // the best-trained seed by greedy success on the training task
    let eval = task(DOORKEY);
    let best = trained
        .iter()
        .filter(|r| r.crossing.is_some())
        .map(|r| {
            let s = evaluate(&r.agent, &eval, 100, 8_000, EvalOptions::default()).unwrap().success_rate;
            (s, r)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let Some((s, run)) = best else {
        return Outcome::new(false, "no DoorKey(5) metaRims run reached S>=0.9; nothing trained to ablate".into());
    };
    let rows = deactivation_rows(&run.agent, &eval, 20, &[0, 1, 2], &SEEDS).unwrap();
    let med = deactivation_medians(&rows);
    let frames_ok = med.windows(2).all(|w| w[1].1 >= w[0].1);
    let succ_ok = med.windows(2).all(|w| w[1].2 <= w[0].2);
    let table: Vec<String> = med
        .iter()
        .map(|(o, f, s)| format!("off {o}: {f:.0} frames S={s:.2}"))
        .collect();
    Outcome::new(
        frames_ok && succ_ok,
        format!("agent seed {} (greedy S={s:.2}); {}", run.seed, table.join(", ")),
    )
}

pub fn zero_shot(runs: &mut Runs) -> Outcome {
    let target = task("doorkey:6");
    let mut s_of = |v: VariantName| -> Vec<f64> {
        runs.ensure(v, DOORKEY, false)
            .iter()
            .map(|r| evaluate(&r.agent, &target, 100, 7_000 + r.seed, EvalOptions::default()).unwrap().success_rate)
            .collect()
    };
    let meta = s_of(VariantName::MetaRims);
    let modular = s_of(VariantName::Modular);
    let (m, b) = (median(&meta).unwrap(), median(&modular).unwrap());
    Outcome::new(
        m >= b && m > 0.0,
        format!("DoorKey(6) S median metaRims {m:.2} {meta:.2?} vs modular {b:.2} {modular:.2?}"),
    )
}

pub fn slow_lr(runs: &mut Runs) -> Outcome {
    runs.ensure(VariantName::MetaRims, GOTOOBJ, true);
    runs.ensure(VariantName::SlowLr, GOTOOBJ, false);
    let m = runs.crossings(VariantName::MetaRims, GOTOOBJ);
    let s = runs.crossings(VariantName::SlowLr, GOTOOBJ);
    Outcome::new(
        m.is_finite() && s >= m,
        format!("frames to S>=0.9 median slowLR {} vs metaRims {}", fmt_median(s), fmt_median(m)),
    )
}
