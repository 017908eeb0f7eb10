//! Partially observable gridworld navigation.
//!
//! A [`GridPOMDP`] is immutable once built; episodes live in a separate
//! [`EpisodeState`] so any number of them can run against one grid.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{TaskSpaceConfig, TaskSpec};

pub const VIEW: usize = 5;
pub const CHANNELS: usize = 3;
pub const OBS_LEN: usize = VIEW * VIEW * CHANNELS;
pub const NUM_ACTIONS: usize = 3;
pub const DEFAULT_DISCOUNT: f64 = 0.995;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Wall,
    Obstacle,
    Goal,
}

impl Cell {
    pub fn blocks(self) -> bool {
        matches!(self, Cell::Wall | Cell::Obstacle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::TurnLeft, Action::TurnRight, Action::Forward];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Row/column offset of facing direction `d` (0 up, 1 right, 2 down, 3 left).
fn delta(d: u8) -> (isize, isize) {
    match d % 4 {
        0 => (-1, 0),
        1 => (0, 1),
        2 => (1, 0),
        _ => (0, -1),
    }
}

/// Egocentric 5×5×3 view plus facing direction.
///
/// View row 0 is farthest ahead, row 4 holds the agent at column 2.
/// Channels: 0 walls and obstacles, 1 goal, 2 outside the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub view: [u8; OBS_LEN],
    pub direction: u8,
}

impl Observation {
    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.view[(row * VIEW + col) * CHANNELS + channel]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeState {
    pub row: usize,
    pub col: usize,
    pub direction: u8,
    pub steps: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPOMDP {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    goal: (usize, usize),
    start: (usize, usize),
    start_direction: u8,
    max_steps: usize,
    discount: f64,
}

/// Default horizon `2 · interior²`.
pub fn default_max_steps(interior_size: usize) -> usize {
    2 * interior_size * interior_size
}

/// Grid coordinates of interior cell `k` (1-based, row-major).
pub fn cell_position(k: usize, interior_size: usize) -> (usize, usize) {
    ((k - 1) / interior_size + 1, (k - 1) % interior_size + 1)
}

/// Instantiates the grid described by `task`.
///
/// Duplicated obstacles collapse; goal and agent overwrite obstacles on
/// their cells. If goal and agent coincide, the agent moves to the first
/// empty interior cell in row-major order.
pub fn build_pomdp(task: &TaskSpec, cfg: &TaskSpaceConfig) -> Result<GridPOMDP> {
    task.validate(cfg)?;
    let n = cfg.interior_size;
    let w = n + 2;
    let mut cells = vec![Cell::Empty; w * w];
    for r in 0..w {
        for c in 0..w {
            if r == 0 || c == 0 || r == w - 1 || c == w - 1 {
                cells[r * w + c] = Cell::Wall;
            }
        }
    }
    for &o in &task.obstacles {
        let (r, c) = cell_position(o, n);
        cells[r * w + c] = Cell::Obstacle;
    }
    let goal = cell_position(task.goal, n);
    cells[goal.0 * w + goal.1] = Cell::Goal;
    let mut start = cell_position(task.agent_start, n);
    if start == goal {
        start = (1..=cfg.cell_count())
            .map(|k| cell_position(k, n))
            .find(|&(r, c)| cells[r * w + c] == Cell::Empty)
            .ok_or_else(|| Error::Input("no free cell for the agent".into()))?;
    }
    cells[start.0 * w + start.1] = Cell::Empty;
    Ok(GridPOMDP {
        width: w,
        height: w,
        cells,
        goal,
        start,
        start_direction: 0,
        max_steps: default_max_steps(n),
        discount: DEFAULT_DISCOUNT,
    })
}

impl GridPOMDP {
    /// Parses a text layout (`#` wall, `O` obstacle, `G` goal, `A` agent,
    /// `.` empty). The outer ring must be walls.
    pub fn from_layout(text: &str, max_steps: usize) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.len() < 3 {
            return Err(Error::Input("layout needs at least 3 rows".into()));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut cells = Vec::with_capacity(width * height);
        let mut goal = None;
        let mut start = None;
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Input(format!("layout row {r} has a different width")));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    'O' => Cell::Obstacle,
                    '.' => Cell::Empty,
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(Error::Input("layout has more than one goal".into()));
                        }
                        Cell::Goal
                    }
                    'A' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Input("layout has more than one agent".into()));
                        }
                        Cell::Empty
                    }
                    other => return Err(Error::Input(format!("unknown layout character `{other}`"))),
                };
                let border = r == 0 || c == 0 || r == height - 1 || c == width - 1;
                if border && cell != Cell::Wall {
                    return Err(Error::Input(format!("layout border at ({r}, {c}) is not a wall")));
                }
                cells.push(cell);
            }
        }
        Ok(Self {
            width,
            height,
            cells,
            goal: goal.ok_or_else(|| Error::Input("layout has no goal".into()))?,
            start: start.ok_or_else(|| Error::Input("layout has no agent".into()))?,
            start_direction: 0,
            max_steps,
            discount: DEFAULT_DISCOUNT,
        })
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn start_direction(&self) -> u8 {
        self.start_direction
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    fn cell_at(&self, row: isize, col: isize) -> Option<Cell> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            None
        } else {
            Some(self.cells[row as usize * self.width + col as usize])
        }
    }

    pub fn count(&self, kind: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == kind).count()
    }

    pub fn reset(&self) -> (EpisodeState, Observation) {
        let state = EpisodeState {
            row: self.start.0,
            col: self.start.1,
            direction: self.start_direction,
            steps: 0,
            done: false,
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    pub fn observe(&self, state: &EpisodeState) -> Observation {
        let mut view = [0u8; OBS_LEN];
        let (fr, fc) = delta(state.direction);
        let (rr, rc) = delta(state.direction + 1);
        for i in 0..VIEW {
            let ahead = (VIEW - 1 - i) as isize;
            for j in 0..VIEW {
                let side = j as isize - (VIEW / 2) as isize;
                let r = state.row as isize + ahead * fr + side * rr;
                let c = state.col as isize + ahead * fc + side * rc;
                let base = (i * VIEW + j) * CHANNELS;
                match self.cell_at(r, c) {
                    None => view[base + 2] = 1,
                    Some(cell) => {
                        if cell.blocks() {
                            view[base] = 1;
                        }
                        if cell == Cell::Goal {
                            view[base + 1] = 1;
                        }
                    }
                }
            }
        }
        Observation {
            view,
            direction: state.direction,
        }
    }

    /// Reward for reaching the goal after `steps` actions.
    pub fn success_reward(&self, steps: usize) -> f64 {
        1.0 - 0.9 * steps as f64 / self.max_steps as f64
    }

    /// Advances the episode by one action. Returns the next observation,
    /// the reward and whether the episode ended.
    pub fn step(&self, state: &mut EpisodeState, action: Action) -> Result<(Observation, f64, bool)> {
        if state.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        state.steps += 1;
        let mut reward = 0.0;
        match action {
            Action::TurnLeft => state.direction = (state.direction + 3) % 4,
            Action::TurnRight => state.direction = (state.direction + 1) % 4,
            Action::Forward => {
                let (dr, dc) = delta(state.direction);
                let r = state.row as isize + dr;
                let c = state.col as isize + dc;
                if let Some(cell) = self.cell_at(r, c) {
                    if !cell.blocks() {
                        state.row = r as usize;
                        state.col = c as usize;
                        if cell == Cell::Goal {
                            reward = self.success_reward(state.steps);
                            state.done = true;
                        }
                    }
                }
            }
        }
        if state.steps >= self.max_steps {
            state.done = true;
        }
        Ok((self.observe(state), reward, state.done))
    }

    /// Fewest actions from the start state to the goal, by BFS over
    /// (cell, direction).
    pub fn shortest_path(&self) -> Option<usize> {
        self.shortest_path_from(self.start.0, self.start.1, self.start_direction)
    }

    pub fn shortest_path_from(&self, row: usize, col: usize, dir: u8) -> Option<usize> {
        self.bfs_distances_to_goal_from(row, col, dir)
    }

    fn bfs_distances_to_goal_from(&self, row: usize, col: usize, dir: u8) -> Option<usize> {
        if (row, col) == self.goal {
            return Some(0);
        }
        let idx = |r: usize, c: usize, d: u8| (r * self.width + c) * 4 + d as usize;
        let mut seen = vec![false; self.cells.len() * 4];
        let mut queue = VecDeque::new();
        seen[idx(row, col, dir)] = true;
        queue.push_back((row, col, dir, 0usize));
        while let Some((r, c, d, dist)) = queue.pop_front() {
            for a in Action::ALL {
                let mut s = EpisodeState {
                    row: r,
                    col: c,
                    direction: d,
                    steps: 0,
                    done: false,
                };
                self.transition(&mut s, a);
                if (s.row, s.col) == self.goal {
                    return Some(dist + 1);
                }
                let k = idx(s.row, s.col, s.direction);
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back((s.row, s.col, s.direction, dist + 1));
                }
            }
        }
        None
    }

    /// Movement rule without horizon or reward bookkeeping.
    pub(crate) fn transition(&self, s: &mut EpisodeState, a: Action) {
        match a {
            Action::TurnLeft => s.direction = (s.direction + 3) % 4,
            Action::TurnRight => s.direction = (s.direction + 1) % 4,
            Action::Forward => {
                let (dr, dc) = delta(s.direction);
                let r = (s.row as isize + dr) as usize;
                let c = (s.col as isize + dc) as usize;
                if let Some(cell) = self.cell_at(r as isize, c as isize) {
                    if !cell.blocks() {
                        s.row = r;
                        s.col = c;
                    }
                }
            }
        }
    }

    /// First action of some shortest path from `state`, if the goal is
    /// reachable.
    pub fn optimal_action(&self, state: &EpisodeState) -> Option<Action> {
        let here = self.shortest_path_from(state.row, state.col, state.direction)?;
        Action::ALL.into_iter().find(|&a| {
            let mut s = *state;
            self.transition(&mut s, a);
            (s.row, s.col) == self.goal
                || self
                    .shortest_path_from(s.row, s.col, s.direction)
                    .is_some_and(|d| d + 1 == here)
        })
    }

    /// One character per cell, agent drawn at `agent` if given.
    pub fn render_with(&self, agent: Option<(usize, usize)>) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = if agent == Some((r, c)) {
                    'A'
                } else {
                    match self.cell(r, c) {
                        Cell::Wall => '#',
                        Cell::Obstacle => 'O',
                        Cell::Goal => 'G',
                        Cell::Empty => '.',
                    }
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for GridPOMDP {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_with(Some(self.start)))
    }
}

/// `Σ_t r_t γ^t` with `t` starting at zero.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut w = 1.0;
    for &r in rewards {
        acc += r * w;
        w *= gamma;
    }
    acc
}
