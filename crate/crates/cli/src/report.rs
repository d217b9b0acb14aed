//! Consolidated plots and summary over a training output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{read_metrics_file, MetricsRow};
use crate::svg::{LineChart, Series};

#[derive(Clone, Debug, PartialEq)]
pub struct BandPoint {
    pub frames: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Seeds contributing at this frame count.
    pub count: usize,
}

/// Mean, min and max across seeds at every frame count any seed reports.
pub fn aggregate(series: &[Vec<(u64, f64)>]) -> Vec<BandPoint> {
    let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in series {
        for &(f, v) in s {
            at.entry(f).or_default().push(v);
        }
    }
    at.into_iter()
        .map(|(frames, vs)| BandPoint {
            frames,
            mean: vs.iter().sum::<f64>() / vs.len() as f64,
            min: vs.iter().copied().fold(f64::INFINITY, f64::min),
            max: vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: vs.len(),
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Builds the chart for one group of variants. A band is drawn only where
/// more than one seed contributes.
pub fn chart(title: &str, variants: &BTreeMap<String, Vec<Vec<MetricsRow>>>) -> LineChart {
    let series = variants
        .iter()
        .map(|(name, runs)| {
            let pts: Vec<Vec<(u64, f64)>> = runs
                .iter()
                .map(|rows| rows.iter().map(|r| (r.frames, r.mean_reward)).collect())
                .collect();
            let agg = aggregate(&pts);
            let band = (runs.len() > 1).then(|| {
                agg.iter()
                    .map(|p| (p.frames as f64, p.min, p.max))
                    .collect::<Vec<_>>()
            });
            Series {
                name: name.clone(),
                points: agg.iter().map(|p| (p.frames as f64, p.mean)).collect(),
                band,
            }
        })
        .collect();
    LineChart {
        title: title.to_string(),
        x_label: "frames".into(),
        y_label: "mean reward".into(),
        series,
        markers: vec![],
        y_range: Some((0.0, 1.0)),
    }
}

#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub charts: Vec<PathBuf>,
    pub summary: PathBuf,
    pub warnings: Vec<String>,
}

fn seed_dirs(variant_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(variant_dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            if e.path().is_dir() {
                out.push((seed, e.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `dir/<variant>/seed-<s>/metrics.csv`, writes `report.svg`,
/// `summary.csv` and, when anything is missing, `warnings.txt`.
pub fn emit_report(dir: &Path) -> Result<ReportOutcome> {
    let mut warnings = Vec::new();
    let expected = match std::fs::read_to_string(dir.join("config.toml")) {
        Ok(text) => match RunConfig::load_str(&text) {
            Ok(cfg) => Some(cfg),
            Err(e) => {
                warnings.push(format!("config.toml unreadable: {e}"));
                None
            }
        },
        Err(_) => None,
    };

    let mut variants: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    let mut seeds_seen: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        if !e.path().is_dir() {
            continue;
        }
        let variant = e.file_name().to_string_lossy().into_owned();
        for (seed, sd) in seed_dirs(&e.path())? {
            let path = sd.join("metrics.csv");
            if !path.exists() {
                warnings.push(format!("{variant} seed {seed}: metrics.csv missing"));
                continue;
            }
            match read_metrics_file(&path) {
                Ok(rows) if rows.is_empty() => warnings.push(format!("{variant} seed {seed}: no rows")),
                Ok(rows) => {
                    variants.entry(variant.clone()).or_default().push(rows);
                    seeds_seen.entry(variant.clone()).or_default().push(seed);
                }
                Err(err) => warnings.push(format!("{variant} seed {seed}: {err}")),
            }
        }
    }
    if let Some(cfg) = &expected {
        for v in &cfg.variants {
            for s in &cfg.seeds {
                if !seeds_seen.get(v).is_some_and(|ss| ss.contains(s)) {
                    let w = format!("{v} seed {s}: series missing");
                    if !warnings.iter().any(|x| x.starts_with(&format!("{v} seed {s}:"))) {
                        warnings.push(w);
                    }
                }
            }
        }
    }

    let title = expected
        .as_ref()
        .map(|c| c.tasks.iter().map(|t| t.spec.as_str()).collect::<Vec<_>>().join(" + "))
        .unwrap_or_else(|| dir.display().to_string());
    let chart_path = dir.join("report.svg");
    std::fs::write(&chart_path, chart(&title, &variants).render())?;

    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["variant", "seeds", "final_frames", "final_mean_reward", "final_success_rate"])?;
    for (name, runs) in &variants {
        let last: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.last()).collect();
        let n = last.len() as f64;
        w.write_record([
            name.clone(),
            runs.len().to_string(),
            last.iter().map(|r| r.frames).max().unwrap_or(0).to_string(),
            (last.iter().map(|r| r.mean_reward).sum::<f64>() / n).to_string(),
            (last.iter().map(|r| r.success_rate).sum::<f64>() / n).to_string(),
        ])?;
    }
    w.flush()?;

    let warn_path = dir.join("warnings.txt");
    if warnings.is_empty() {
        if warn_path.exists() {
            std::fs::remove_file(&warn_path)?;
        }
    } else {
        let mut text = String::from("warnings\n");
        for w in &warnings {
            eprintln!("warning: {w}");
            text.push_str(&format!("- {w}\n"));
        }
        std::fs::write(&warn_path, text)?;
    }
    Ok(ReportOutcome {
        charts: vec![chart_path],
        summary,
        warnings,
    })
}
