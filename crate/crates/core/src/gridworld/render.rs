use super::{DoorState, GridEnv, Object};
use crate::error::{Error, Result};

/// Side of the square egocentric window.
pub const VIEW: usize = 7;

/// Type planes, then color planes, then door-state planes.
pub const CHANNELS: usize = 18;

/// Flattened length of one view.
pub const VIEW_LEN: usize = VIEW * VIEW * CHANNELS;

const TYPE_PLANES: usize = 9;
const COLOR_PLANES: usize = 6;

/// Named channel offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Unseen = 0,
    Empty = 1,
    Wall = 2,
    Key = 3,
    Ball = 4,
    Box = 5,
    Door = 6,
    Goal = 7,
    Obstacle = 8,
    /// First color plane; colors follow [`super::Color::ALL`] order.
    Color = 9,
    /// First door-state plane: open, closed, locked.
    DoorState = 15,
}

/// One egocentric view plus the tokenized mission.
///
/// `view[(row * VIEW + col) * CHANNELS + c]` is 0 or 1. The agent sits at
/// column 3 of the bottom row, facing up.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub view: Vec<u8>,
    pub mission: Vec<usize>,
}

impl Observation {
    /// Indices of the set planes, checked for one-hot consistency.
    pub fn active_channels(&self) -> Result<Vec<usize>> {
        if self.view.len() != VIEW_LEN {
            return Err(Error::Contract(format!(
                "view has {} entries, expected {VIEW_LEN}",
                self.view.len()
            )));
        }
        let mut out = Vec::with_capacity(VIEW * VIEW * 3);
        for cell in 0..VIEW * VIEW {
            let planes = &self.view[cell * CHANNELS..(cell + 1) * CHANNELS];
            if planes.iter().any(|&v| v > 1) {
                return Err(Error::Contract(format!("cell {cell} has a non-binary plane")));
            }
            let count = |r: std::ops::Range<usize>| planes[r].iter().filter(|&&v| v == 1).count();
            let types = count(0..TYPE_PLANES);
            let colors = count(TYPE_PLANES..TYPE_PLANES + COLOR_PLANES);
            let states = count(TYPE_PLANES + COLOR_PLANES..CHANNELS);
            if types != 1 || colors > 1 || states > 1 {
                return Err(Error::Contract(format!(
                    "cell {cell} planes are not one-hot (type {types}, color {colors}, state {states})"
                )));
            }
            let is_door = planes[Channel::Door as usize] == 1;
            if is_door != (states == 1) {
                return Err(Error::Contract(format!("cell {cell} door state mismatch")));
            }
            out.extend(
                planes
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1)
                    .map(|(c, _)| cell * CHANNELS + c),
            );
        }
        Ok(out)
    }

    /// Type channel of the cell at `(col, row)`.
    pub fn cell_type(&self, col: usize, row: usize) -> Channel {
        let base = (row * VIEW + col) * CHANNELS;
        let t = (0..TYPE_PLANES).find(|&c| self.view[base + c] == 1).unwrap_or(0);
        [
            Channel::Unseen,
            Channel::Empty,
            Channel::Wall,
            Channel::Key,
            Channel::Ball,
            Channel::Box,
            Channel::Door,
            Channel::Goal,
            Channel::Obstacle,
        ][t]
    }
}

fn type_channel(o: Option<Object>) -> Channel {
    match o {
        None => Channel::Empty,
        Some(Object::Wall) => Channel::Wall,
        Some(Object::Key(_)) => Channel::Key,
        Some(Object::Ball(_)) => Channel::Ball,
        Some(Object::Box(_)) => Channel::Box,
        Some(Object::Door(..)) => Channel::Door,
        Some(Object::Goal) => Channel::Goal,
        Some(Object::Obstacle) => Channel::Obstacle,
    }
}

/// Window contents in agent frame: `cells[row][col]`, agent at `(3, 6)`.
fn window(env: &GridEnv) -> [[Option<Object>; VIEW]; VIEW] {
    let (fx, fy) = env.agent_dir().delta();
    let (rx, ry) = env.agent_dir().right().delta();
    let (ax, ay) = (env.agent_pos().0 as i32, env.agent_pos().1 as i32);
    let mut cells = [[None; VIEW]; VIEW];
    for (row, line) in cells.iter_mut().enumerate() {
        for (col, cell) in line.iter_mut().enumerate() {
            let f = (VIEW - 1 - row) as i32;
            let l = col as i32 - (VIEW / 2) as i32;
            *cell = env.get_or_wall(ax + f * fx + l * rx, ay + f * fy + l * ry);
        }
    }
    cells
}

/// Visibility propagates from the agent outward, row by row, and stops at
/// cells that cannot be seen through.
fn visibility(cells: &[[Option<Object>; VIEW]; VIEW]) -> [[bool; VIEW]; VIEW] {
    let mut mask = [[false; VIEW]; VIEW];
    mask[VIEW - 1][VIEW / 2] = true;
    let opaque = |row: usize, col: usize| cells[row][col].is_some_and(|o| !o.see_behind());
    for row in (0..VIEW).rev() {
        for col in 0..VIEW - 1 {
            if !mask[row][col] || opaque(row, col) {
                continue;
            }
            mask[row][col + 1] = true;
            if row > 0 {
                mask[row - 1][col + 1] = true;
                mask[row - 1][col] = true;
            }
        }
        for col in (1..VIEW).rev() {
            if !mask[row][col] || opaque(row, col) {
                continue;
            }
            mask[row][col - 1] = true;
            if row > 0 {
                mask[row - 1][col - 1] = true;
                mask[row - 1][col] = true;
            }
        }
    }
    mask
}

pub(super) fn render(env: &GridEnv) -> Observation {
    let mut cells = window(env);
    // the agent's own cell shows what it carries
    cells[VIEW - 1][VIEW / 2] = env.carrying();
    let mask = visibility(&cells);
    let mut view = vec![0u8; VIEW_LEN];
    for row in 0..VIEW {
        for col in 0..VIEW {
            let base = (row * VIEW + col) * CHANNELS;
            if !mask[row][col] {
                view[base + Channel::Unseen as usize] = 1;
                continue;
            }
            let o = cells[row][col];
            view[base + type_channel(o) as usize] = 1;
            if let Some(o) = o {
                if let Some(c) = o.color() {
                    let ci = super::Color::ALL.iter().position(|&x| x == c).unwrap();
                    view[base + Channel::Color as usize + ci] = 1;
                }
                if let Object::Door(_, s) = o {
                    let si = match s {
                        DoorState::Open => 0,
                        DoorState::Closed => 1,
                        DoorState::Locked => 2,
                    };
                    view[base + Channel::DoorState as usize + si] = 1;
                }
            }
        }
    }
    Observation {
        view,
        mission: env.mission_tokens().to_vec(),
    }
}
