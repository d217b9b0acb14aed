//! Partially observed gridworlds in the MiniGrid/BabyAI family.
//!
//! Each episode is generated from a [`TaskSpec`] and a seed. The agent sees a
//! 7×7 egocentric window encoded as one-hot channel planes and a tokenized
//! mission string.

mod planner;
mod render;
mod replay;
mod spec;
mod tasks;

pub use planner::{bfs_plan, OraclePolicy};
pub use render::{Observation, Channel, CHANNELS, VIEW, VIEW_LEN};
pub use replay::{replay_episode, EpisodeRecord};
pub use spec::{TaskKind, TaskSpec};
pub use tasks::{mission_vocabulary, tokenize_mission};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Pickup,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| {
            Error::Contract(format!("action index {i} out of range 0..{NUM_ACTIONS}"))
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Purple,
        Color::Yellow,
        Color::Grey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DoorState {
    Open,
    Closed,
    Locked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Object {
    Wall,
    Key(Color),
    Ball(Color),
    Box(Color),
    Door(Color, DoorState),
    Goal,
    Obstacle,
}

impl Object {
    pub fn can_pickup(self) -> bool {
        matches!(self, Object::Key(_) | Object::Ball(_) | Object::Box(_))
    }

    /// Whether the agent may stand on this cell.
    pub fn can_overlap(self) -> bool {
        matches!(self, Object::Goal | Object::Door(_, DoorState::Open))
    }

    pub fn see_behind(self) -> bool {
        !matches!(
            self,
            Object::Wall | Object::Door(_, DoorState::Closed | DoorState::Locked)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Object::Wall => "wall",
            Object::Key(_) => "key",
            Object::Ball(_) => "ball",
            Object::Box(_) => "box",
            Object::Door(..) => "door",
            Object::Goal => "goal",
            Object::Obstacle => "obstacle",
        }
    }

    pub fn color(self) -> Option<Color> {
        match self {
            Object::Key(c) | Object::Ball(c) | Object::Box(c) | Object::Door(c, _) => Some(c),
            Object::Goal => Some(Color::Green),
            Object::Obstacle => Some(Color::Blue),
            Object::Wall => None,
        }
    }
}

/// Facing direction; `0` is +x and turning right increases the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dir(pub u8);

impl Dir {
    pub fn delta(self) -> (i32, i32) {
        match self.0 % 4 {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        }
    }

    pub fn left(self) -> Dir {
        Dir((self.0 + 3) % 4)
    }

    pub fn right(self) -> Dir {
        Dir((self.0 + 1) % 4)
    }
}

/// What ends an episode successfully.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Objective {
    /// Facing an object of this kind and color.
    GoTo(Object),
    /// Picking up this object; picking up anything else fails.
    Pickup(Object),
    /// Standing on the goal cell.
    ReachGoal,
    /// Standing on `success`; standing on `failure` ends the episode.
    Memory {
        success: (usize, usize),
        failure: (usize, usize),
    },
    /// Dropping `mover` next to `anchor`; any other pickup or drop fails.
    PutNear { mover: Object, anchor: Object },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Reward for succeeding after `n` of `n_max` steps.
pub fn success_reward(n: usize, n_max: usize) -> f64 {
    1.0 - 0.9 * (n as f64 / n_max as f64)
}

#[derive(Clone, Debug)]
pub struct GridEnv {
    spec: TaskSpec,
    width: usize,
    height: usize,
    cells: Vec<Option<Object>>,
    agent: (usize, usize),
    dir: Dir,
    carrying: Option<Object>,
    n: usize,
    n_max: usize,
    mission: String,
    mission_tokens: Vec<usize>,
    objective: Objective,
    /// Obstacles drift each step.
    dynamic: bool,
    done: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

impl GridEnv {
    /// Generates the instance described by `spec` (including its seed).
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut env = Self::blank(spec.clone(), 1, 1);
        env.generate(spec.seed)?;
        Ok(env)
    }

    fn blank(spec: TaskSpec, width: usize, height: usize) -> Self {
        Self {
            spec,
            width,
            height,
            cells: vec![None; width * height],
            agent: (0, 0),
            dir: Dir(0),
            carrying: None,
            n: 0,
            n_max: 1,
            mission: String::new(),
            mission_tokens: Vec::new(),
            objective: Objective::ReachGoal,
            dynamic: false,
            done: false,
            seed: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    fn generate(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..tasks::MAX_ATTEMPTS {
            let layout = tasks::generate(&self.spec, &mut rng);
            let mut env = Self::blank(self.spec.clone(), layout.width, layout.height);
            env.cells = layout.cells;
            env.agent = layout.agent;
            env.dir = layout.dir;
            env.n_max = layout.n_max;
            env.objective = layout.objective;
            env.dynamic = layout.dynamic;
            env.mission_tokens = tokenize_mission(&layout.mission)?;
            env.mission = layout.mission;
            env.seed = seed;
            env.rng = ChaCha8Rng::seed_from_u64(rng.gen());
            if env.is_solvable() {
                *self = env;
                return Ok(());
            }
        }
        Err(Error::Generation {
            task: self.spec.to_string(),
            attempts: tasks::MAX_ATTEMPTS,
        })
    }

    /// Regenerates the instance for `seed` and returns the first observation.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.generate(seed)?;
        Ok(self.observe())
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent_pos(&self) -> (usize, usize) {
        self.agent
    }

    pub fn agent_dir(&self) -> Dir {
        self.dir
    }

    pub fn carrying(&self) -> Option<Object> {
        self.carrying
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn max_steps(&self) -> usize {
        self.n_max
    }

    pub fn mission(&self) -> &str {
        &self.mission
    }

    pub fn mission_tokens(&self) -> &[usize] {
        &self.mission_tokens
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Object> {
        self.cells[y * self.width + x]
    }

    /// Cell content, with everything outside the grid reading as wall.
    pub fn get_or_wall(&self, x: i32, y: i32) -> Option<Object> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            Some(Object::Wall)
        } else {
            self.get(x as usize, y as usize)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, obj: Option<Object>) {
        self.cells[y * self.width + x] = obj;
    }

    /// Places the agent directly (test fixtures and planners).
    pub fn set_agent(&mut self, pos: (usize, usize), dir: Dir) -> Result<()> {
        if let Some(o) = self.get(pos.0, pos.1) {
            if !o.can_overlap() {
                return Err(Error::Contract(format!("agent cannot stand on {}", o.name())));
            }
        }
        self.agent = pos;
        self.dir = dir;
        Ok(())
    }

    pub fn set_step_count(&mut self, n: usize) {
        self.n = n.min(self.n_max);
    }

    pub fn front_pos(&self) -> (i32, i32) {
        let (dx, dy) = self.dir.delta();
        (self.agent.0 as i32 + dx, self.agent.1 as i32 + dy)
    }

    fn front_cell(&self) -> Option<Object> {
        let (x, y) = self.front_pos();
        self.get_or_wall(x, y)
    }

    pub fn observe(&self) -> Observation {
        render::render(self)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let (reward, done, success) = self.transition(action)?;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done,
            success,
        })
    }

    /// Applies `action` without rendering. Returns `(reward, done, success)`.
    pub fn transition(&mut self, action: Action) -> Result<(f64, bool, bool)> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        self.n += 1;
        let front = self.front_pos();
        let front_cell = self.front_cell();
        let blocked_before = matches!(front_cell, Some(Object::Obstacle));
        if self.dynamic {
            self.move_obstacles();
        }
        let mut outcome: Option<bool> = None;
        match action {
            Action::Left => self.dir = self.dir.left(),
            Action::Right => self.dir = self.dir.right(),
            Action::Forward => {
                if self.dynamic && blocked_before {
                    outcome = Some(false);
                } else if self.front_cell().is_none_or(|o| o.can_overlap()) {
                    self.agent = (front.0 as usize, front.1 as usize);
                }
            }
            Action::Pickup => {
                if let Some(obj) = self.front_cell().filter(|o| o.can_pickup()) {
                    if self.carrying.is_none() {
                        self.carrying = Some(obj);
                        self.set(front.0 as usize, front.1 as usize, None);
                        match &self.objective {
                            Objective::Pickup(target) => outcome = Some(obj == *target),
                            Objective::PutNear { mover, .. } if obj != *mover => {
                                outcome = Some(false)
                            }
                            _ => {}
                        }
                    }
                }
            }
            Action::Drop => {
                if let Some(obj) = self.carrying {
                    if self.front_cell().is_none() {
                        let (fx, fy) = (front.0 as usize, front.1 as usize);
                        self.set(fx, fy, Some(obj));
                        self.carrying = None;
                        if let Objective::PutNear { anchor, .. } = self.objective {
                            outcome = Some(self.is_near(fx, fy, anchor));
                        }
                    }
                }
            }
            Action::Toggle => {
                if let Some(Object::Door(c, state)) = self.front_cell() {
                    let next = match state {
                        DoorState::Locked if self.carrying == Some(Object::Key(c)) => {
                            DoorState::Open
                        }
                        DoorState::Locked => DoorState::Locked,
                        DoorState::Closed => DoorState::Open,
                        DoorState::Open => DoorState::Closed,
                    };
                    self.set(front.0 as usize, front.1 as usize, Some(Object::Door(c, next)));
                }
            }
            Action::Done => {}
        }
        if outcome.is_none() {
            outcome = self.check_objective();
        }
        let (reward, done, success) = match outcome {
            Some(true) => (success_reward(self.n, self.n_max), true, true),
            Some(false) => (0.0, true, false),
            None => (0.0, self.n >= self.n_max, false),
        };
        self.done = done;
        Ok((reward, done, success))
    }

    fn check_objective(&self) -> Option<bool> {
        match &self.objective {
            Objective::GoTo(target) => (self.front_cell() == Some(*target)).then_some(true),
            Objective::ReachGoal => {
                (self.get(self.agent.0, self.agent.1) == Some(Object::Goal)).then_some(true)
            }
            Objective::Memory { success, failure } => {
                if self.agent == *success {
                    Some(true)
                } else if self.agent == *failure {
                    Some(false)
                } else {
                    None
                }
            }
            Objective::Pickup(_) | Objective::PutNear { .. } => None,
        }
    }

    fn is_near(&self, x: usize, y: usize, anchor: Object) -> bool {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if (dx, dy) != (0, 0) && self.get_or_wall(x as i32 + dx, y as i32 + dy) == Some(anchor) {
                    return true;
                }
            }
        }
        false
    }

    /// Each obstacle jumps to a random free cell of its 3×3 neighbourhood.
    fn move_obstacles(&mut self) {
        let obstacles: Vec<(usize, usize)> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.get(x, y) == Some(Object::Obstacle))
            .collect();
        for (x, y) in obstacles {
            let mut free = Vec::with_capacity(8);
            for ny in y.saturating_sub(1)..=(y + 1).min(self.height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(self.width - 1) {
                    if self.get(nx, ny).is_none() && (nx, ny) != self.agent {
                        free.push((nx, ny));
                    }
                }
            }
            if !free.is_empty() {
                let (nx, ny) = free[self.rng.gen_range(0..free.len())];
                self.set(x, y, None);
                self.set(nx, ny, Some(Object::Obstacle));
            }
        }
    }

    /// Whether the breadth-first planner finds a successful action sequence.
    pub fn is_solvable(&self) -> bool {
        bfs_plan(self).is_some()
    }

    pub(crate) fn objective(&self) -> &Objective {
        &self.objective
    }

    pub(crate) fn is_dynamic(&self) -> bool {
        self.dynamic
    }

    pub(crate) fn set_dynamic(&mut self, dynamic: bool) {
        self.dynamic = dynamic;
    }

    /// Compact encoding of everything that determines future transitions
    /// except the obstacle rng.
    pub(crate) fn state_key(&self) -> Vec<u8> {
        let mut key = Vec::with_capacity(self.cells.len() + 8);
        key.push(self.agent.0 as u8);
        key.push(self.agent.1 as u8);
        key.push(self.dir.0);
        key.push(self.carrying.map_or(0, encode_object));
        key.extend(self.cells.iter().map(|c| c.map_or(0, encode_object)));
        key
    }
}

fn encode_object(o: Object) -> u8 {
    let color = |c: Color| Color::ALL.iter().position(|&x| x == c).unwrap() as u8;
    match o {
        Object::Wall => 1,
        Object::Goal => 2,
        Object::Obstacle => 3,
        Object::Key(c) => 8 + color(c),
        Object::Ball(c) => 16 + color(c),
        Object::Box(c) => 24 + color(c),
        Object::Door(c, s) => 32 + 8 * s as u8 + color(c),
    }
}
