//! Discrete grid-world MDPs.
//!
//! An environment is a rectangular grid with border walls, optional interior
//! walls and lava, a fixed start cell and a deterministic four-direction
//! movement model. The goal is not part of the environment; it is passed to
//! [`step`] so one layout serves a whole family of goal-directed tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grid cell occupied by the acting agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub x: usize,
    pub y: usize,
}

impl State {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// L1 (Manhattan) distance to another cell.
    pub fn l1(&self, other: &State) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl std::fmt::Display for State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Cardinal movement actions, in fixed enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("action index {i} out of range 0..4")))
    }

    /// (dx, dy) with y growing downward.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// Why an episode step ended, if it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DoneReason {
    Running,
    GoalReached,
    Lava,
    Timeout,
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
}

impl StepResult {
    fn new(next_state: State, reward: f64, done_reason: DoneReason) -> Self {
        Self {
            next_state,
            reward,
            done: done_reason != DoneReason::Running,
            done_reason,
        }
    }
}

/// Immutable episodic grid MDP: layout, dynamics, rewards and termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEnv {
    pub id: String,
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    lava: Vec<bool>,
    pub start: State,
    pub max_steps: usize,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub lava_reward: f64,
    pub gamma: f64,
}

pub const DEFAULT_STEP_REWARD: f64 = -0.01;
pub const DEFAULT_GOAL_REWARD: f64 = 1.0;
pub const DEFAULT_LAVA_REWARD: f64 = -1.0;
pub const DEFAULT_GAMMA: f64 = 0.95;

impl GridEnv {
    /// Builds an environment from explicit wall and lava cells, with border
    /// walls added automatically. Validates all layout invariants.
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        wall_cells: &[(usize, usize)],
        lava_cells: &[(usize, usize)],
        start: State,
    ) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(Error::Contract(format!(
                "grid {width}x{height} too small for border walls"
            )));
        }
        let mut walls = vec![false; width * height];
        let mut lava = vec![false; width * height];
        for x in 0..width {
            walls[x] = true;
            walls[(height - 1) * width + x] = true;
        }
        for y in 0..height {
            walls[y * width] = true;
            walls[y * width + width - 1] = true;
        }
        for &(x, y) in wall_cells {
            if x >= width || y >= height {
                return Err(Error::Contract(format!("wall ({x},{y}) out of bounds")));
            }
            walls[y * width + x] = true;
        }
        for &(x, y) in lava_cells {
            if x >= width || y >= height {
                return Err(Error::Contract(format!("lava ({x},{y}) out of bounds")));
            }
            if walls[y * width + x] {
                return Err(Error::Contract(format!(
                    "cell ({x},{y}) cannot be both wall and lava"
                )));
            }
            lava[y * width + x] = true;
        }
        let env = Self {
            id: id.into(),
            width,
            height,
            walls,
            lava,
            start,
            max_steps: 4 * width * height,
            step_reward: DEFAULT_STEP_REWARD,
            goal_reward: DEFAULT_GOAL_REWARD,
            lava_reward: DEFAULT_LAVA_REWARD,
            gamma: DEFAULT_GAMMA,
        };
        if !env.in_bounds(start) || env.is_wall(start) || env.is_lava(start) {
            return Err(Error::Contract(format!(
                "start {start} must be a free, lava-free cell"
            )));
        }
        debug_assert!(env.gamma > 0.0 && env.gamma < 1.0);
        Ok(env)
    }

    pub fn index(&self, s: State) -> usize {
        s.y * self.width + s.x
    }

    pub fn state_count(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, s: State) -> bool {
        s.x < self.width && s.y < self.height
    }

    pub fn is_wall(&self, s: State) -> bool {
        self.walls[self.index(s)]
    }

    pub fn is_lava(&self, s: State) -> bool {
        self.lava[self.index(s)]
    }

    /// In bounds and not inside a wall.
    pub fn is_valid_state(&self, s: State) -> bool {
        self.in_bounds(s) && !self.is_wall(s)
    }

    /// A cell an agent may occupy without ending the episode.
    pub fn is_free(&self, s: State) -> bool {
        self.is_valid_state(s) && !self.is_lava(s)
    }

    /// Valid target for a goal-directed task: free, lava-free, not the start.
    pub fn is_valid_goal(&self, s: State) -> bool {
        self.is_free(s) && s != self.start
    }

    pub fn lava_cells(&self) -> Vec<State> {
        self.cells_where(&self.lava)
    }

    pub fn wall_cells(&self) -> Vec<State> {
        self.cells_where(&self.walls)
    }

    /// All cells a goal may be placed on, in row-major order.
    pub fn candidate_goals(&self) -> Vec<State> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| State::new(x, y)))
            .filter(|&s| self.is_valid_goal(s))
            .collect()
    }

    fn cells_where(&self, mask: &[bool]) -> Vec<State> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| State::new(x, y)))
            .filter(|&s| mask[self.index(s)])
            .collect()
    }

    /// Destination of a move, with wall blocking (border walls make
    /// out-of-bounds moves impossible).
    pub fn move_from(&self, s: State, a: Action) -> State {
        let (dx, dy) = a.delta();
        let nx = s.x as isize + dx;
        let ny = s.y as isize + dy;
        if nx < 0 || ny < 0 {
            return s;
        }
        let next = State::new(nx as usize, ny as usize);
        if !self.in_bounds(next) || self.is_wall(next) {
            s
        } else {
            next
        }
    }

    /// Renders the layout as a text grid (`#` wall, `L` lava, `.` free,
    /// `S` start), one row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let s = State::new(x, y);
                let c = if s == self.start {
                    'S'
                } else if self.is_wall(s) {
                    '#'
                } else if self.is_lava(s) {
                    'L'
                } else {
                    '.'
                };
                out.push(c);
            }
            out.push('\n');
        }
        out
    }

    /// Parses a layout produced by [`GridEnv::to_text`], applying default
    /// rewards. The grid must be rectangular and contain exactly one `S`.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::Contract("empty layout text".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut walls = Vec::new();
        let mut lava = Vec::new();
        let mut start = None;
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Contract(format!("row {y} is not {width} cells wide")));
            }
            for (x, c) in row.chars().enumerate() {
                match c {
                    '#' => walls.push((x, y)),
                    'L' => lava.push((x, y)),
                    'S' => {
                        if start.replace(State::new(x, y)).is_some() {
                            return Err(Error::Contract("layout has more than one start".into()));
                        }
                    }
                    '.' => {}
                    other => {
                        return Err(Error::Contract(format!("unknown layout char {other:?}")))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::Contract("layout has no start cell".into()))?;
        GridEnv::new(id, width, height, &walls, &lava, start)
    }
}

fn check_step_contract(env: &GridEnv, s: State, goal: State, t: usize) -> Result<()> {
    if !env.is_free(s) {
        return Err(Error::Contract(format!("state {s} is not a free cell")));
    }
    if !env.in_bounds(goal) || env.is_wall(goal) || env.is_lava(goal) {
        return Err(Error::Contract(format!("goal {goal} is not a free cell")));
    }
    if t >= env.max_steps {
        return Err(Error::Contract(format!(
            "step at t={t} past the episode cap {}",
            env.max_steps
        )));
    }
    Ok(())
}

/// One deterministic transition of the goal-directed episodic MDP.
///
/// Moves one cell in the direction of `a`; a wall leaves the state unchanged.
/// Entering lava or the goal ends the episode; otherwise the step costs
/// `step_reward` and the episode times out when `t + 1` reaches `max_steps`.
pub fn step(env: &GridEnv, s: State, a: Action, goal: State, t: usize) -> Result<StepResult> {
    check_step_contract(env, s, goal, t)?;
    let next = env.move_from(s, a);
    if env.is_lava(next) {
        return Ok(StepResult::new(next, env.lava_reward, DoneReason::Lava));
    }
    if next == goal {
        return Ok(StepResult::new(next, env.goal_reward, DoneReason::GoalReached));
    }
    let reason = if t + 1 >= env.max_steps {
        DoneReason::Timeout
    } else {
        DoneReason::Running
    };
    Ok(StepResult::new(next, env.step_reward, reason))
}

/// Draws a start state by taking `jitter_steps` uniformly random moves from
/// `env.start`, never entering walls or lava.
pub fn initial_state(env: &GridEnv, rng: &mut impl Rng, jitter_steps: usize) -> State {
    let mut s = env.start;
    for _ in 0..jitter_steps {
        let choices: Vec<State> = Action::ALL
            .iter()
            .map(|&a| env.move_from(s, a))
            .filter(|&n| n != s && !env.is_lava(n))
            .collect();
        if choices.is_empty() {
            break;
        }
        s = choices[rng.gen_range(0..choices.len())];
    }
    s
}

/// Shortest-path distances (in steps) from `from` to every cell, walking only
/// free, lava-free cells. Unreachable cells get `usize::MAX`.
pub fn bfs_distances(env: &GridEnv, from: State) -> Vec<usize> {
    let mut dist = vec![usize::MAX; env.state_count()];
    if !env.is_free(from) {
        return dist;
    }
    let mut queue = std::collections::VecDeque::new();
    dist[env.index(from)] = 0;
    queue.push_back(from);
    while let Some(s) = queue.pop_front() {
        let d = dist[env.index(s)];
        for a in Action::ALL {
            let n = env.move_from(s, a);
            if n != s && !env.is_lava(n) && dist[env.index(n)] == usize::MAX {
                dist[env.index(n)] = d + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

fn pick_distinct_rows(rng: &mut impl Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (lo..=hi).collect();
    for i in 0..n {
        let j = rng.gen_range(i..rows.len());
        rows.swap(i, j);
    }
    rows.truncate(n);
    rows
}

/// A 13x13 crossing grid: border walls plus two full-height interior wall
/// columns, each pierced by two seed-chosen gaps so goals behind a wall can
/// be reached along more than one shortest route. Start is (1,1).
pub fn make_simple_crossing(seed: u64) -> GridEnv {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (13, 13);
    let mut walls = Vec::new();
    for &wx in &[4usize, 8] {
        let gaps = pick_distinct_rows(&mut rng, 1, h - 2, 2);
        for y in 1..h - 1 {
            if !gaps.contains(&y) {
                walls.push((wx, y));
            }
        }
    }
    GridEnv::new(
        format!("simple-crossing-13x13-s{seed}"),
        w,
        h,
        &walls,
        &[],
        State::new(1, 1),
    )
    .expect("fixed template is always a valid layout")
}

/// A 9x9 grid with two parallel lava crossings, each with a single safe gap
/// at a seed-chosen position. The seed also picks the crossing orientation.
/// Start is (1,1).
pub fn make_lava_crossing(seed: u64) -> GridEnv {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (9, 9);
    let vertical = rng.gen_bool(0.5);
    let mut lava = Vec::new();
    for &line in &[3usize, 6] {
        let gap = rng.gen_range(1..=h - 2);
        for other in 1..=h - 2 {
            if other == gap {
                continue;
            }
            if vertical {
                lava.push((line, other));
            } else {
                lava.push((other, line));
            }
        }
    }
    GridEnv::new(
        format!("lava-crossing-9x9-s{seed}"),
        w,
        h,
        &[],
        &lava,
        State::new(1, 1),
    )
    .expect("fixed template is always a valid layout")
}
