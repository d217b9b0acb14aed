use std::collections::{HashSet, VecDeque};

use super::{Action, GridEnv, Object, Objective};

/// Upper bound on expanded states; generated layouts stay far below it.
const MAX_EXPANSIONS: usize = 500_000;

fn useful_actions(objective: &Objective) -> &'static [Action] {
    use Action::*;
    match objective {
        Objective::GoTo(_) | Objective::Memory { .. } => &[Left, Right, Forward],
        Objective::ReachGoal => &[Left, Right, Forward, Pickup, Toggle],
        Objective::Pickup(_) => &[Left, Right, Forward, Pickup],
        Objective::PutNear { .. } => &[Left, Right, Forward, Pickup, Drop],
    }
}

/// Shortest successful action sequence from the current state.
///
/// Moving obstacles are planned around as if they stood still; for
/// solvability they are removed, since they never stay put.
pub fn bfs_plan(env: &GridEnv) -> Option<Vec<Action>> {
    let mut root = env.clone();
    if root.is_dynamic() {
        root.set_dynamic(false);
        if root.steps() == 0 && !root.is_done() {
            for y in 0..root.height() {
                for x in 0..root.width() {
                    if root.get(x, y) == Some(Object::Obstacle) {
                        root.set(x, y, None);
                    }
                }
            }
        }
    }
    search(root)
}

fn search(root: GridEnv) -> Option<Vec<Action>> {
    if root.is_done() {
        return None;
    }
    let actions = useful_actions(root.objective());
    let mut seen = HashSet::new();
    seen.insert(root.state_key());
    // (parent, action) for every expanded node
    let mut links: Vec<(usize, Action)> = vec![(usize::MAX, Action::Done)];
    let mut queue = VecDeque::from([(root, 0usize)]);
    while let Some((env, node)) = queue.pop_front() {
        for &a in actions {
            let mut next = env.clone();
            let Ok((_, done, success)) = next.transition(a) else {
                continue;
            };
            if success {
                let mut path = vec![a];
                let mut cur = node;
                while cur != 0 {
                    path.push(links[cur].1);
                    cur = links[cur].0;
                }
                path.reverse();
                return Some(path);
            }
            if done || !seen.insert(next.state_key()) {
                continue;
            }
            links.push((node, a));
            if links.len() > MAX_EXPANSIONS {
                return None;
            }
            queue.push_back((next, links.len() - 1));
        }
    }
    None
}

/// Scripted policy that follows breadth-first plans with full state access.
#[derive(Default)]
pub struct OraclePolicy {
    plan: VecDeque<Action>,
}

impl OraclePolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn act(&mut self, env: &GridEnv) -> Action {
        if env.steps() == 0 || env.is_dynamic() || self.plan.is_empty() {
            let mut probe = env.clone();
            probe.set_dynamic(false);
            self.plan = search(probe).map(VecDeque::from).unwrap_or_default();
        }
        self.plan.pop_front().unwrap_or(Action::Left)
    }
}
