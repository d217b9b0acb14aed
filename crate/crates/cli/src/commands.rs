//! Subcommand bodies. Each writes its outputs and returns what it produced.

use std::io::Write;
use std::path::{Path, PathBuf};

use metarims::agent::{Agent, CoreKind};
use metarims::metaloop::{make_variant, Flow, Trainer, UpdateMetrics, VariantName};
use metarims::rl::{
    evaluate, evaluate_oracle, run_episodes, EvalOptions, EvalReport, TaskDistribution, TraceRecord,
};
use serde::Serialize;

use crate::config::{parse_task, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::report::median;
use crate::svg::{LineChart, Raster, Series};

/// Where a training run writes, if anywhere.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Updates between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub agent: Agent<f64>,
    /// First update whose full window reached the success threshold.
    pub frames_to_threshold: Option<u64>,
}

/// First row where the window is full and success reaches `threshold`.
pub fn threshold_crossing(metrics: &[UpdateMetrics], threshold: f64, window: usize) -> Option<u64> {
    metrics
        .iter()
        .find(|m| m.window_episodes >= window && m.success_rate >= threshold)
        .map(|m| m.frames)
}

fn write_checkpoint(dir: &Path, name: &str, agent: &Agent<f64>) -> Result<()> {
    std::fs::write(dir.join(format!("checkpoint-{name}.txt")), agent.to_checkpoint())?;
    Ok(())
}

/// Trains `trainer` for `frames`, streaming metrics and checkpoints to `out`.
/// With `stop_success` set, stops at the first crossing of that threshold.
pub fn run_trainer(
    mut trainer: Trainer<f64>,
    frames: u64,
    stop_success: Option<f64>,
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome> {
    let mut writer = match &out {
        Some(o) => {
            std::fs::create_dir_all(o.dir)?;
            write_checkpoint(o.dir, "init", &trainer.agent)?;
            Some(MetricsWriter::create(&o.dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let window = trainer.loop_cfg.window;
    let mut all: Vec<UpdateMetrics> = Vec::new();
    let mut sink_err: Option<CliError> = None;
    trainer.train(frames, |m, agent| {
        all.push(m.clone());
        let res = (|| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                w.write(&MetricsRow::from(m))?;
            }
            if let Some(o) = &out {
                if o.checkpoint_every > 0 && m.updates % o.checkpoint_every == 0 {
                    write_checkpoint(o.dir, &format!("{:06}", m.updates), agent)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = res {
            sink_err = Some(e);
            return Ok(Flow::Stop);
        }
        let done = stop_success.is_some_and(|s| m.window_episodes >= window && m.success_rate >= s);
        Ok(if done { Flow::Stop } else { Flow::Continue })
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    if let Some(o) = &out {
        write_checkpoint(o.dir, "final", &trainer.agent)?;
    }
    Ok(TrainOutcome {
        frames_to_threshold: threshold_crossing(&all, stop_success.unwrap_or(0.9), window),
        rows: all.iter().map(MetricsRow::from).collect(),
        agent: trainer.agent,
    })
}

/// Builds a fresh variant on `tasks` and trains it.
pub fn train_one(
    cfg: &RunConfig,
    variant: VariantName,
    tasks: TaskDistribution,
    seed: u64,
    frames: u64,
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome> {
    let trainer = make_variant(
        variant.as_str(),
        cfg.agent_config(variant),
        cfg.loop_cfg.clone(),
        cfg.ppo.clone(),
        cfg.gae.clone(),
        tasks,
        seed,
    )?;
    run_trainer(trainer, frames, cfg.stop_success, out)
}

pub fn run_dir(out: &Path, variant: VariantName, seed: u64) -> PathBuf {
    out.join(variant.as_str()).join(format!("seed-{seed}"))
}

fn reward_curve(title: &str, runs: &[(String, &[MetricsRow])]) -> String {
    LineChart {
        title: title.to_string(),
        x_label: "frames".into(),
        y_label: "mean reward".into(),
        series: runs
            .iter()
            .map(|(name, rows)| Series {
                name: name.clone(),
                points: rows.iter().map(|r| (r.frames as f64, r.mean_reward)).collect(),
                band: None,
            })
            .collect(),
        markers: vec![],
        y_range: Some((0.0, 1.0)),
    }
    .render()
}

/// `train`: every variant and seed; returns the run directories.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tasks = cfg.task_distribution()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut dirs = Vec::new();
    for variant in cfg.variant_names()? {
        let mut curves = Vec::new();
        for &seed in &cfg.seeds {
            let dir = run_dir(&cfg.out_dir, variant, seed);
            let outcome = train_one(
                cfg,
                variant,
                tasks.clone(),
                seed,
                cfg.frames,
                Some(RunOutput {
                    dir: &dir,
                    checkpoint_every: cfg.checkpoint_every,
                }),
            )?;
            eprintln!(
                "{variant} seed {seed}: {} updates, {} frames",
                outcome.rows.len(),
                outcome.rows.last().map_or(0, |r| r.frames)
            );
            curves.push((format!("seed {seed}"), outcome.rows));
            dirs.push(dir);
        }
        let refs: Vec<(String, &[MetricsRow])> = curves.iter().map(|(n, r)| (n.clone(), r.as_slice())).collect();
        std::fs::write(
            cfg.out_dir.join(variant.as_str()).join("learning_curve.svg"),
            reward_curve(&format!("{variant}"), &refs),
        )?;
    }
    Ok(dirs)
}

pub fn load_checkpoint(path: &Path, cfg: Option<&RunConfig>) -> Result<Agent<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let agent = match cfg {
        Some(c) => {
            let variant = c.variant_names()?[0];
            Agent::from_checkpoint_for(&text, &c.agent_config(variant))?
        }
        None => Agent::from_checkpoint(&text)?,
    };
    Ok(agent)
}

/// `eval`: greedy episodes, or the planner when `oracle` is set.
pub fn eval(
    checkpoint: Option<&Path>,
    cfg: Option<&RunConfig>,
    task: &str,
    episodes: usize,
    seed: u64,
    oracle: bool,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(CliError::Config("episodes must be positive".into()));
    }
    let tasks = TaskDistribution::single(parse_task(task)?);
    if oracle {
        return Ok(evaluate_oracle(&tasks, episodes, seed)?);
    }
    let path = checkpoint.ok_or_else(|| CliError::Config("--checkpoint is required unless --oracle".into()))?;
    let agent = load_checkpoint(path, cfg)?;
    Ok(evaluate(&agent, &tasks, episodes, seed, EvalOptions::default())?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroShotRow {
    pub variant: String,
    pub seed: u64,
    pub target: String,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub train_frames: u64,
    /// Window success rate at the end of training.
    pub train_success: f64,
}

/// `zeroshot`: train on the easy size, evaluate frozen on each target.
pub fn zeroshot(cfg: &RunConfig) -> Result<Vec<ZeroShotRow>> {
    let train_spec = parse_task(&cfg.zeroshot.train)?;
    let mut targets = vec![cfg.zeroshot.train.clone()];
    targets.extend(cfg.zeroshot.targets.iter().filter(|t| **t != cfg.zeroshot.train).cloned());
    let variants = cfg.variant_names()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;

    let mut rows = Vec::new();
    for &variant in &variants {
        for &seed in &cfg.seeds {
            let dir = run_dir(&cfg.out_dir, variant, seed);
            let out = train_one(
                cfg,
                variant,
                TaskDistribution::single(train_spec.clone()),
                seed,
                cfg.frames,
                Some(RunOutput {
                    dir: &dir,
                    checkpoint_every: 0,
                }),
            )?;
            let last = out.rows.last();
            for t in &targets {
                let rep = evaluate(
                    &out.agent,
                    &TaskDistribution::single(parse_task(t)?),
                    cfg.eval_episodes,
                    seed.wrapping_add(10_000),
                    EvalOptions::default(),
                )?;
                rows.push(ZeroShotRow {
                    variant: variant.to_string(),
                    seed,
                    target: t.clone(),
                    mean_reward: rep.mean_reward,
                    success_rate: rep.success_rate,
                    train_frames: last.map_or(0, |r| r.frames),
                    train_success: last.map_or(0.0, |r| r.success_rate),
                });
            }
        }
    }

    let mut w = csv::Writer::from_path(cfg.out_dir.join("zeroshot_seeds.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("zeroshot.csv"))?;
    let mut head = vec!["target".to_string()];
    for v in &variants {
        head.push(format!("{v}_R"));
        head.push(format!("{v}_S"));
    }
    w.write_record(&head)?;
    for t in &targets {
        let mut rec = vec![t.clone()];
        for v in &variants {
            let sel: Vec<&ZeroShotRow> = rows
                .iter()
                .filter(|r| r.target == *t && r.variant == v.as_str())
                .collect();
            let r: Vec<f64> = sel.iter().map(|r| r.mean_reward).collect();
            let s: Vec<f64> = sel.iter().map(|r| r.success_rate).collect();
            rec.push(median(&r).unwrap_or(f64::NAN).to_string());
            rec.push(median(&s).unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct CurriculumRow {
    pub variant: String,
    pub seed: u64,
    pub run: &'static str,
    pub frames: u64,
    pub updates: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
}

pub struct CurriculumOutcome {
    pub rows: Vec<CurriculumRow>,
    /// `(variant, seed, pretrained, scratch)` frames to the 0.5 success threshold.
    pub crossings: Vec<(VariantName, u64, Option<u64>, Option<u64>)>,
}

/// `curriculum`: pretrain on the source, then continue on the target next to
/// a fresh agent trained on the target alone.
pub fn curriculum(cfg: &RunConfig) -> Result<CurriculumOutcome> {
    const THRESHOLD: f64 = 0.5;
    let source = TaskDistribution::single(parse_task(&cfg.curriculum.source)?);
    let target = TaskDistribution::single(parse_task(&cfg.curriculum.target)?);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut rows = Vec::new();
    let mut crossings = Vec::new();
    let mut chart = Vec::new();
    let push = |rows: &mut Vec<CurriculumRow>, v: VariantName, seed, run, ms: &[UpdateMetrics]| {
        rows.extend(ms.iter().map(|m| CurriculumRow {
            variant: v.to_string(),
            seed,
            run,
            frames: m.frames,
            updates: m.updates,
            mean_reward: m.mean_reward,
            success_rate: m.success_rate,
        }));
    };
    for variant in cfg.variant_names()? {
        for &seed in &cfg.seeds {
            let pre = train_one(cfg, variant, source.clone(), seed, cfg.frames, None)?;
            let window = cfg.loop_cfg.window;
            let mut resumed = Vec::new();
            let mut t = Trainer::new(
                variant,
                pre.agent,
                cfg.loop_cfg.clone(),
                cfg.ppo.clone(),
                cfg.gae.clone(),
                target.clone(),
                seed.wrapping_add(500),
            )?;
            t.train(cfg.curriculum.target_frames, |m, _| {
                resumed.push(m.clone());
                Ok(Flow::Continue)
            })?;
            let mut scratch = Vec::new();
            let mut s = make_variant::<f64>(
                variant.as_str(),
                cfg.agent_config(variant),
                cfg.loop_cfg.clone(),
                cfg.ppo.clone(),
                cfg.gae.clone(),
                target.clone(),
                seed.wrapping_add(500),
            )?;
            s.train(cfg.curriculum.target_frames, |m, _| {
                scratch.push(m.clone());
                Ok(Flow::Continue)
            })?;
            crossings.push((
                variant,
                seed,
                threshold_crossing(&resumed, THRESHOLD, window),
                threshold_crossing(&scratch, THRESHOLD, window),
            ));
            push(&mut rows, variant, seed, "pretrained", &resumed);
            push(&mut rows, variant, seed, "scratch", &scratch);
            chart.push((format!("{variant} pretrained s{seed}"), resumed.iter().map(MetricsRow::from).collect::<Vec<_>>()));
            chart.push((format!("{variant} scratch s{seed}"), scratch.iter().map(MetricsRow::from).collect()));
        }
    }
    let mut w = csv::Writer::from_path(cfg.out_dir.join("curriculum.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("curriculum_summary.csv"))?;
    w.write_record(["variant", "seed", "pretrained_frames_to_half", "scratch_frames_to_half"])?;
    let opt = |x: Option<u64>| x.map_or_else(|| "none".to_string(), |v| v.to_string());
    for (v, s, p, c) in &crossings {
        w.write_record([v.to_string(), s.to_string(), opt(*p), opt(*c)])?;
    }
    w.flush()?;
    let refs: Vec<(String, &[MetricsRow])> = chart.iter().map(|(n, r)| (n.clone(), r.as_slice())).collect();
    std::fs::write(
        cfg.out_dir.join("curriculum.svg"),
        reward_curve(&format!("{} to {}", cfg.curriculum.source, cfg.curriculum.target), &refs),
    )?;
    Ok(CurriculumOutcome { rows, crossings })
}

/// `trace`: per-step records plus activation and value plots.
pub fn trace(
    checkpoint: &Path,
    cfg: Option<&RunConfig>,
    task: &str,
    episodes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<TraceRecord>> {
    let agent = load_checkpoint(checkpoint, cfg)?;
    let tasks = TaskDistribution::single(parse_task(task)?);
    let mut records = Vec::new();
    run_episodes(&agent, &tasks, episodes, seed, EvalOptions::default(), |r| records.push(r.clone()))?;
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("trace.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let ends: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.done)
        .map(|(i, _)| i)
        .collect();
    let raster = Raster {
        title: format!("active modules, {task}"),
        rows: agent.cfg.rim.n_modules,
        columns: records.iter().map(|r| r.active_modules.clone()).collect(),
        boundaries: ends.clone(),
    };
    std::fs::write(out_dir.join("activation.svg"), raster.render())?;
    let value = LineChart {
        title: format!("value estimate, {task}"),
        x_label: "step".into(),
        y_label: "value".into(),
        series: vec![Series {
            name: "value".into(),
            points: records.iter().enumerate().map(|(i, r)| (i as f64, r.value)).collect(),
            band: None,
        }],
        markers: ends.iter().map(|&i| i as f64 + 0.5).collect(),
        y_range: None,
    };
    std::fs::write(out_dir.join("value.svg"), value.render())?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeactivationRow {
    pub off_count: usize,
    pub seed: u64,
    pub frames: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
}

/// Evaluates `agent` with `off_count` winners switched off each step.
pub fn deactivation_rows(
    agent: &Agent<f64>,
    tasks: &TaskDistribution,
    episodes: usize,
    off_counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<DeactivationRow>> {
    let mut rows = Vec::new();
    for &off in off_counts {
        for &seed in seeds {
            let rep = evaluate(
                agent,
                tasks,
                episodes,
                seed,
                EvalOptions {
                    off_count: off,
                    ..EvalOptions::default()
                },
            )?;
            rows.push(DeactivationRow {
                off_count: off,
                seed,
                frames: rep.frames,
                success_rate: rep.success_rate,
                mean_reward: rep.mean_reward,
            });
        }
    }
    Ok(rows)
}

/// Per off_count: median frames and median success over seeds.
pub fn deactivation_medians(rows: &[DeactivationRow]) -> Vec<(usize, f64, f64)> {
    let mut offs: Vec<usize> = rows.iter().map(|r| r.off_count).collect();
    offs.dedup();
    offs.iter()
        .map(|&o| {
            let sel: Vec<&DeactivationRow> = rows.iter().filter(|r| r.off_count == o).collect();
            let f: Vec<f64> = sel.iter().map(|r| r.frames as f64).collect();
            let s: Vec<f64> = sel.iter().map(|r| r.success_rate).collect();
            (o, median(&f).unwrap_or(f64::NAN), median(&s).unwrap_or(f64::NAN))
        })
        .collect()
}

/// `deactivate`: writes one row per (off_count, seed) to `out`.
pub fn deactivate(
    checkpoint: &Path,
    cfg: Option<&RunConfig>,
    task: &str,
    episodes: usize,
    off_counts: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<DeactivationRow>> {
    if episodes == 0 || seeds.is_empty() || off_counts.is_empty() {
        return Err(CliError::Config("episodes, seeds and off counts must be non-empty".into()));
    }
    let agent = load_checkpoint(checkpoint, cfg)?;
    let k = match agent.cfg.core {
        CoreKind::Rims => agent.cfg.rim.n_active,
        CoreKind::Lstm => 1,
    };
    if let Some(&bad) = off_counts.iter().find(|&&o| o >= k) {
        return Err(CliError::Config(format!("off_count {bad} must be below k = {k}")));
    }
    let tasks = TaskDistribution::single(parse_task(task)?);
    let rows = deactivation_rows(&agent, &tasks, episodes, off_counts, seeds)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
