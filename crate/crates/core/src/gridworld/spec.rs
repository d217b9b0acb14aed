use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    GoToObj,
    GoToLocal,
    Fetch,
    DoorKey,
    DynamicObstacles,
    MemoryCorridor,
    PutNearLite,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::GoToObj => "gotoobj",
            TaskKind::GoToLocal => "gotolocal",
            TaskKind::Fetch => "fetch",
            TaskKind::DoorKey => "doorkey",
            TaskKind::DynamicObstacles => "dynobs",
            TaskKind::MemoryCorridor => "memory",
            TaskKind::PutNearLite => "putnear",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "gotoobj" => TaskKind::GoToObj,
            "gotolocal" => TaskKind::GoToLocal,
            "fetch" => TaskKind::Fetch,
            "doorkey" => TaskKind::DoorKey,
            "dynobs" | "dynamicobstacles" => TaskKind::DynamicObstacles,
            "memory" | "memorycorridor" => TaskKind::MemoryCorridor,
            "putnear" | "putnearlite" => TaskKind::PutNearLite,
            _ => return None,
        })
    }

    /// Legal values of the size field: room side, or corridor length.
    pub fn size_range(self) -> (usize, usize) {
        match self {
            TaskKind::MemoryCorridor => (3, 30),
            _ => (5, 16),
        }
    }
}

/// A task family with its size and generation options.
///
/// String form: `kind:size[:key=value]...`, e.g. `doorkey:6:seed=42` or
/// `gotoobj:6:distractors=1`. Recognised keys are `seed`, `distractors`
/// (GoToObj), `objs` (GoToLocal, Fetch) and `obstacles` (DynamicObstacles).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub size: usize,
    pub seed: u64,
    /// Extra objects besides the target (GoToObj) or total object count
    /// (GoToLocal, Fetch) or obstacle count (DynamicObstacles).
    pub count: Option<usize>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, size: usize) -> Self {
        Self {
            kind,
            size,
            seed: 0,
            count: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = Some(count);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.size_range();
        if self.size < lo || self.size > hi {
            return Err(Error::Config(format!(
                "{} size {} outside {lo}..={hi}",
                self.kind.name(),
                self.size
            )));
        }
        let interior = (self.size - 2) * (self.size - 2);
        if let Some(c) = self.count {
            let ok = match self.kind {
                TaskKind::GoToObj => c + 2 <= interior,
                TaskKind::GoToLocal | TaskKind::Fetch => c >= 1 && c + 1 <= interior && c <= 18,
                TaskKind::DynamicObstacles => c >= 1 && c + 3 <= interior,
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!("count {c} invalid for {self}")));
            }
        }
        Ok(())
    }

    fn count_key(&self) -> Option<&'static str> {
        match self.kind {
            TaskKind::GoToObj => Some("distractors"),
            TaskKind::GoToLocal | TaskKind::Fetch => Some("objs"),
            TaskKind::DynamicObstacles => Some("obstacles"),
            _ => None,
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.size)?;
        if let (Some(c), Some(k)) = (self.count, self.count_key()) {
            write!(f, ":{k}={c}")?;
        }
        write!(f, ":seed={}", self.seed)
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("task spec `{s}`: {m}"));
        let mut parts = s.trim().split(':');
        let kind = parts
            .next()
            .and_then(TaskKind::parse)
            .ok_or_else(|| bad("unknown task kind"))?;
        let size = parts
            .next()
            .ok_or_else(|| bad("missing size"))?
            .parse()
            .map_err(|_| bad("size is not an integer"))?;
        let mut spec = TaskSpec::new(kind, size);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v: u64 = v.parse().map_err(|_| bad("value is not an integer"))?;
            match k {
                "seed" => spec.seed = v,
                _ if Some(k) == spec.count_key() => spec.count = Some(v as usize),
                _ => return Err(bad(&format!("unknown option `{k}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
