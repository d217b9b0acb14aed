//! Run configuration: a TOML file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use metarims::agent::AgentConfig;
use metarims::gridworld::TaskSpec;
use metarims::metaloop::{LoopConfig, VariantName};
use metarims::rl::{GaeConfig, PpoConfig, TaskDistribution};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub spec: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub train: String,
    pub targets: Vec<String>,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            train: "doorkey:5".into(),
            targets: vec!["doorkey:6".into(), "doorkey:8".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub source: String,
    pub target: String,
    /// Frames spent on the target, for both the resumed and the fresh run.
    pub target_frames: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            source: "gotolocal:6".into(),
            target: "gotoobj:6:distractors=1".into(),
            target_frames: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variants: Vec<String>,
    pub tasks: Vec<TaskEntry>,
    pub seeds: Vec<u64>,
    /// Frame budget per training run.
    pub frames: u64,
    pub eval_episodes: usize,
    /// Updates between periodic checkpoints; 0 keeps only the first and last.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    /// Ends a run early once the full reporting window reaches this success rate.
    pub stop_success: Option<f64>,
    pub agent: AgentConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub ppo: PpoConfig,
    pub gae: GaeConfig,
    pub zeroshot: ZeroShotConfig,
    pub curriculum: CurriculumConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variants: vec!["metaRims".into()],
            tasks: vec![TaskEntry {
                spec: "gotoobj:6".into(),
                weight: 1.0,
            }],
            seeds: vec![0],
            frames: 500_000,
            eval_episodes: 100,
            checkpoint_every: 100,
            out_dir: PathBuf::from("runs"),
            stop_success: None,
            agent: AgentConfig::default(),
            loop_cfg: LoopConfig::default(),
            ppo: PpoConfig::default(),
            gae: GaeConfig::default(),
            zeroshot: ZeroShotConfig::default(),
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (when given), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, overrides)
    }

    pub fn load_str(text: &str) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_table(table, &[])
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.variants.is_empty() {
            return Err(CliError::Config("variant list is empty".into()));
        }
        for v in &self.variants {
            let v: VariantName = v.parse()?;
            self.agent_config(v).validate()?;
        }
        if let Some(s) = self.stop_success {
            if !(0.0..=1.0).contains(&s) {
                return Err(CliError::Config(format!("stop_success {s} outside [0, 1]")));
            }
        }
        self.task_distribution()?;
        for t in std::iter::once(&self.zeroshot.train)
            .chain(&self.zeroshot.targets)
            .chain([&self.curriculum.source, &self.curriculum.target])
        {
            parse_task(t)?;
        }
        self.loop_cfg.validate()?;
        self.ppo.validate()?;
        self.gae.validate()?;
        Ok(())
    }

    pub fn variant_names(&self) -> Result<Vec<VariantName>> {
        self.variants.iter().map(|v| Ok(v.parse()?)).collect()
    }

    /// The agent shape with the core the variant requires.
    pub fn agent_config(&self, variant: VariantName) -> AgentConfig {
        AgentConfig {
            core: variant.core(),
            ..self.agent.clone()
        }
    }

    pub fn task_distribution(&self) -> Result<TaskDistribution> {
        let entries = self
            .tasks
            .iter()
            .map(|t| Ok((parse_task(&t.spec)?, t.weight)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskDistribution::new(entries)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

pub fn parse_task(s: &str) -> Result<TaskSpec> {
    let spec: TaskSpec = s.parse()?;
    spec.validate()?;
    Ok(spec)
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad key path `{path}`")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
