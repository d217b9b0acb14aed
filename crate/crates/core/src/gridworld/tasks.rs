use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Color, Dir, DoorState, Object, Objective, TaskKind, TaskSpec};
use crate::error::{Error, Result};

pub(crate) const MAX_ATTEMPTS: usize = 100;

const WORDS: &[&str] = &[
    "go", "to", "the", "pick", "up", "use", "key", "open", "door", "and", "then", "get",
    "green", "goal", "square", "put", "near", "ball", "box", "red", "blue", "purple",
    "yellow", "grey", "avoid", "obstacles", "matching", "object", "at", "end", "of",
    "corridor",
];

/// Every word a mission template can produce, in token-id order.
pub fn mission_vocabulary() -> &'static [&'static str] {
    WORDS
}

pub fn tokenize_mission(mission: &str) -> Result<Vec<usize>> {
    mission
        .split_whitespace()
        .map(|w| {
            WORDS.iter().position(|&v| v == w).ok_or_else(|| {
                Error::Config(format!("word `{w}` is not in the mission vocabulary"))
            })
        })
        .collect()
}

pub(crate) struct Layout {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Option<Object>>,
    pub agent: (usize, usize),
    pub dir: Dir,
    pub n_max: usize,
    pub mission: String,
    pub objective: Objective,
    pub dynamic: bool,
}

impl Layout {
    fn room(width: usize, height: usize) -> Self {
        let mut cells = vec![None; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                    cells[y * width + x] = Some(Object::Wall);
                }
            }
        }
        Self {
            width,
            height,
            cells,
            agent: (1, 1),
            dir: Dir(0),
            n_max: width * height,
            mission: String::new(),
            objective: Objective::ReachGoal,
            dynamic: false,
        }
    }

    fn get(&self, x: usize, y: usize) -> Option<Object> {
        self.cells[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, o: Option<Object>) {
        self.cells[y * self.width + x] = o;
    }

    /// A uniformly random empty cell inside `[x0, x1) × [y0, y1)` not under the agent.
    fn free_cell(&self, rng: &mut ChaCha8Rng, x0: usize, x1: usize, y0: usize, y1: usize) -> Option<(usize, usize)> {
        let free: Vec<(usize, usize)> = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .filter(|&(x, y)| self.get(x, y).is_none() && (x, y) != self.agent)
            .collect();
        free.choose(rng).copied()
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, obj: Object) -> (usize, usize) {
        let (w, h) = (self.width, self.height);
        let p = self.free_cell(rng, 1, w - 1, 1, h - 1).expect("room has a free cell");
        self.set(p.0, p.1, Some(obj));
        p
    }

    fn place_agent(&mut self, rng: &mut ChaCha8Rng, x0: usize, x1: usize) {
        let h = self.height;
        self.agent = (usize::MAX, usize::MAX);
        self.agent = self.free_cell(rng, x0, x1, 1, h - 1).expect("room has a free cell");
        self.dir = Dir(rng.gen_range(0..4));
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    *Color::ALL.choose(rng).unwrap()
}

fn random_object(rng: &mut ChaCha8Rng, kinds: &[&str]) -> Object {
    let c = random_color(rng);
    match *kinds.choose(rng).unwrap() {
        "key" => Object::Key(c),
        "ball" => Object::Ball(c),
        _ => Object::Box(c),
    }
}

/// `count` objects with pairwise distinct (kind, color).
fn distinct_objects(rng: &mut ChaCha8Rng, kinds: &[&str], count: usize) -> Vec<Object> {
    let mut out: Vec<Object> = Vec::with_capacity(count);
    while out.len() < count {
        let o = random_object(rng, kinds);
        if !out.contains(&o) {
            out.push(o);
        }
    }
    out
}

fn describe(o: Object) -> String {
    format!("{} {}", o.color().map_or("", |c| c.name()), o.name())
}

pub(crate) fn generate(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Layout {
    let s = spec.size;
    match spec.kind {
        TaskKind::GoToObj => {
            let mut l = Layout::room(s, s);
            let objs = distinct_objects(rng, &["key", "ball", "box"], 1 + spec.count.unwrap_or(0));
            l.place_agent(rng, 1, s - 1);
            for &o in &objs {
                l.place(rng, o);
            }
            l.mission = format!("go to the {}", describe(objs[0]));
            l.objective = Objective::GoTo(objs[0]);
            l.n_max = s * s;
            l
        }
        TaskKind::GoToLocal => {
            let mut l = Layout::room(s, s);
            let count = spec.count.unwrap_or(((s - 2) * (s - 2) / 4).clamp(2, 8));
            let objs = distinct_objects(rng, &["key", "ball", "box"], count);
            l.place_agent(rng, 1, s - 1);
            for &o in &objs {
                l.place(rng, o);
            }
            let target = *objs.choose(rng).unwrap();
            l.mission = format!("go to the {}", describe(target));
            l.objective = Objective::GoTo(target);
            l.n_max = s * s;
            l
        }
        TaskKind::Fetch => {
            let mut l = Layout::room(s, s);
            let objs = distinct_objects(rng, &["key", "ball"], spec.count.unwrap_or(3));
            l.place_agent(rng, 1, s - 1);
            for &o in &objs {
                l.place(rng, o);
            }
            let target = *objs.choose(rng).unwrap();
            l.mission = format!("pick up the {}", describe(target));
            l.objective = Objective::Pickup(target);
            l.n_max = s * s;
            l
        }
        TaskKind::DoorKey => {
            let mut l = Layout::room(s, s);
            let split = rng.gen_range(2..s - 2);
            for y in 0..s {
                l.set(split, y, Some(Object::Wall));
            }
            let door_y = rng.gen_range(1..s - 2);
            l.set(split, door_y, Some(Object::Door(Color::Yellow, DoorState::Locked)));
            l.set(s - 2, s - 2, Some(Object::Goal));
            l.place_agent(rng, 1, split);
            let p = l.free_cell(rng, 1, split, 1, s - 1).expect("left room has a free cell");
            l.set(p.0, p.1, Some(Object::Key(Color::Yellow)));
            l.mission = "use the key to open the door and then get to the goal".into();
            l.n_max = 8 * s * s;
            l
        }
        TaskKind::DynamicObstacles => {
            let mut l = Layout::room(s, s);
            l.agent = (1, 1);
            l.dir = Dir(0);
            l.set(s - 2, s - 2, Some(Object::Goal));
            for _ in 0..spec.count.unwrap_or(s / 2) {
                l.place(rng, Object::Obstacle);
            }
            l.mission = "get to the green goal square and avoid obstacles".into();
            l.dynamic = true;
            l.n_max = s * s;
            l
        }
        TaskKind::MemoryCorridor => memory_corridor(s, rng),
        TaskKind::PutNearLite => {
            let mut l = Layout::room(s, s);
            let objs = distinct_objects(rng, &["key", "ball", "box"], 3);
            l.place_agent(rng, 1, s - 1);
            let anchor_pos = l.place(rng, objs[1]);
            // the mover must not start next to the anchor
            loop {
                let p = l.free_cell(rng, 1, s - 1, 1, s - 1).expect("free cell");
                if p.0.abs_diff(anchor_pos.0) > 1 || p.1.abs_diff(anchor_pos.1) > 1 {
                    l.set(p.0, p.1, Some(objs[0]));
                    break;
                }
            }
            l.place(rng, objs[2]);
            l.mission = format!("put the {} near the {}", describe(objs[0]), describe(objs[1]));
            l.objective = Objective::PutNear {
                mover: objs[0],
                anchor: objs[1],
            };
            l.n_max = 2 * s * s;
            l
        }
    }
}

/// A cue object in the start area, a corridor of length `len`, and two
/// candidate objects at the far end; the agent must walk next to the one
/// matching the cue.
fn memory_corridor(len: usize, rng: &mut ChaCha8Rng) -> Layout {
    let width = len + 5;
    let mut l = Layout::room(width, 7);
    for y in 1..6 {
        for x in 1..width - 1 {
            let start_area = x <= 2 && (2..=4).contains(&y);
            let corridor = y == 3;
            let junction = x == width - 2 && (2..=4).contains(&y);
            if !(start_area || corridor || junction) {
                l.set(x, y, Some(Object::Wall));
            }
        }
    }
    let cue_ball = rng.gen_bool(0.5);
    let (cue, other) = if cue_ball {
        (Object::Ball(Color::Green), Object::Key(Color::Green))
    } else {
        (Object::Key(Color::Green), Object::Ball(Color::Green))
    };
    l.set(1, 2, Some(cue));
    let jx = width - 2;
    let cue_on_top = rng.gen_bool(0.5);
    let (top, bottom) = if cue_on_top { (cue, other) } else { (other, cue) };
    l.set(jx, 1, Some(top));
    l.set(jx, 5, Some(bottom));
    let (success, failure) = if cue_on_top { ((jx, 2), (jx, 4)) } else { ((jx, 4), (jx, 2)) };
    l.agent = (2, 3);
    l.dir = Dir(rng.gen_range(0..4));
    l.mission = "go to the matching object at the end of the corridor".into();
    l.objective = Objective::Memory { success, failure };
    l.n_max = 5 * len;
    l
}
