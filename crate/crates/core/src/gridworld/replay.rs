use serde::{Deserialize, Serialize};

use super::{Action, GridEnv, Observation, StepResult, TaskSpec};
use crate::error::Result;

/// One line of a replay file: enough to re-simulate an episode exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Task spec string; its seed is overridden by `seed`.
    pub task: String,
    pub seed: u64,
    pub actions: Vec<Action>,
}

impl EpisodeRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Re-simulates a recorded episode: the initial observation and every step.
pub fn replay_episode(record: &EpisodeRecord) -> Result<(Observation, Vec<StepResult>)> {
    let spec: TaskSpec = record.task.parse()?;
    let mut env = GridEnv::new(&spec.with_seed(record.seed))?;
    let first = env.observe();
    let steps = record
        .actions
        .iter()
        .map(|&a| env.step(a))
        .collect::<Result<Vec<_>>>()?;
    Ok((first, steps))
}
