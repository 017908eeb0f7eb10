//! Held-out navigation grids and zero-shot solved-rate evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{default_max_steps, Action, EpisodeState, GridPOMDP, Observation, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{argmax, ParamTree};
use crate::ppo::{sample_categorical, RawState, StudentPolicy};
use crate::task::TaskSpaceConfig;

const MAZE_SEED: u64 = 0x6d61_7a65;

#[derive(Clone, Debug)]
pub struct TestTask {
    pub name: String,
    pub layout: String,
    pub pomdp: GridPOMDP,
}

impl TestTask {
    pub fn parse(name: &str, layout: &str, space: &TaskSpaceConfig) -> Result<Self> {
        let side = space.interior_size + 2;
        let pomdp = GridPOMDP::from_layout(layout, default_max_steps(space.interior_size))
            .map_err(|e| Error::Input(format!("test task `{name}`: {e}")))?;
        if pomdp.width() != side || pomdp.height() != side {
            return Err(Error::Config(format!(
                "test task `{name}` is {}x{}, expected {side}x{side}",
                pomdp.width(),
                pomdp.height()
            )));
        }
        if pomdp.shortest_path().is_none() {
            return Err(Error::Input(format!("test task `{name}` is not solvable")));
        }
        Ok(Self {
            name: name.to_string(),
            layout: pomdp.to_string(),
            pomdp,
        })
    }
}

/// Interior grid being carved; `true` is open.
struct Canvas {
    n: usize,
    open: Vec<bool>,
}

impl Canvas {
    fn new(n: usize, open: bool) -> Self {
        Self {
            n,
            open: vec![open; n * n],
        }
    }

    // 1-based interior coordinates
    fn set(&mut self, r: usize, c: usize, open: bool) {
        self.open[(r - 1) * self.n + (c - 1)] = open;
    }

    fn render(&self, agent: (usize, usize), goal: (usize, usize)) -> String {
        let side = self.n + 2;
        let mut s = String::new();
        for r in 0..side {
            for c in 0..side {
                let ch = if (r, c) == agent {
                    'A'
                } else if (r, c) == goal {
                    'G'
                } else if r == 0 || c == 0 || r == side - 1 || c == side - 1 || !self.open[(r - 1) * self.n + (c - 1)] {
                    '#'
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

fn empty(n: usize) -> String {
    Canvas::new(n, true).render((1, 1), (n, n))
}

fn four_rooms(n: usize) -> String {
    let mid = n.div_ceil(2);
    let mut cv = Canvas::new(n, true);
    for k in 1..=n {
        cv.set(mid, k, false);
        cv.set(k, mid, false);
    }
    let (upper, lower) = ((1 + mid - 1) / 2, (mid + 1 + n) / 2);
    cv.set(upper, mid, true);
    cv.set(lower, mid, true);
    cv.set(mid, upper, true);
    cv.set(mid, lower, true);
    cv.render((1, 1), (n, n))
}

/// Inward spiral from the top-left corner; the goal sits at its end.
fn labyrinth(n: usize) -> String {
    let mut cv = Canvas::new(n, false);
    let (mut top, mut bottom, mut left, mut right) = (1usize, n, 1usize, n);
    let (mut r, mut c) = (1usize, 1usize);
    cv.set(r, c, true);
    'outer: loop {
        for leg in 0..4 {
            let moved = match leg {
                0 => walk(&mut cv, &mut r, &mut c, 0, 1, right),
                1 => walk(&mut cv, &mut r, &mut c, 1, 0, bottom),
                2 => walk(&mut cv, &mut r, &mut c, 0, -1, left),
                _ => walk(&mut cv, &mut r, &mut c, -1, 0, top + 2),
            };
            if !moved {
                break 'outer;
            }
        }
        top += 2;
        bottom -= 2;
        left += 2;
        right -= 2;
    }
    cv.render((1, 1), (r, c))
}

fn walk(cv: &mut Canvas, r: &mut usize, c: &mut usize, dr: isize, dc: isize, target: usize) -> bool {
    let mut moved = false;
    loop {
        let at = if dr != 0 { *r } else { *c };
        let done = if dr + dc > 0 { at >= target } else { at <= target };
        if done {
            return moved;
        }
        *r = (*r as isize + dr) as usize;
        *c = (*c as isize + dc) as usize;
        cv.set(*r, *c, true);
        moved = true;
    }
}

/// Depth-first maze over the odd interior cells with a fixed seed.
fn maze(n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(MAZE_SEED);
    let mut cv = Canvas::new(n, false);
    let k = n.div_ceil(2);
    let mut seen = vec![false; k * k];
    let mut stack = vec![(0usize, 0usize)];
    seen[0] = true;
    cv.set(1, 1, true);
    while let Some(&(i, j)) = stack.last() {
        let mut next = Vec::new();
        if i > 0 && !seen[(i - 1) * k + j] {
            next.push((i - 1, j));
        }
        if i + 1 < k && !seen[(i + 1) * k + j] {
            next.push((i + 1, j));
        }
        if j > 0 && !seen[i * k + j - 1] {
            next.push((i, j - 1));
        }
        if j + 1 < k && !seen[i * k + j + 1] {
            next.push((i, j + 1));
        }
        match next.choose(&mut rng) {
            None => {
                stack.pop();
            }
            Some(&(a, b)) => {
                seen[a * k + b] = true;
                cv.set(2 * a + 1, 2 * b + 1, true);
                cv.set(i + a + 1, j + b + 1, true);
                stack.push((a, b));
            }
        }
    }
    cv.render((1, 1), (n, n))
}

/// Horizontal corridor with vertical dead-end branches; the goal is at
/// the top of the last branch.
fn corridor(n: usize) -> String {
    let mid = n.div_ceil(2);
    let mut cv = Canvas::new(n, false);
    for c in 1..=n {
        cv.set(mid, c, true);
        if c % 2 == 1 {
            for r in 1..=n {
                cv.set(r, c, true);
            }
        }
    }
    cv.render((mid, 1), (1, n))
}

/// 4×4 rooms separated by walls, one door per shared wall segment.
fn sixteen_rooms(n: usize) -> String {
    let walls: Vec<usize> = (1..4).map(|i| ((i * (n + 1)) as f64 / 4.0).round() as usize).collect();
    let mut bounds = vec![0];
    bounds.extend(&walls);
    bounds.push(n + 1);
    let mut cv = Canvas::new(n, true);
    for &w in &walls {
        for k in 1..=n {
            cv.set(w, k, false);
            cv.set(k, w, false);
        }
    }
    for &w in &walls {
        for seg in bounds.windows(2) {
            let door = (seg[0] + seg[1]) / 2;
            cv.set(w, door, true);
            cv.set(door, w, true);
        }
    }
    cv.render((1, 1), (n, n))
}

/// The built-in suite for a 7 or 13 interior.
pub fn builtin_suite(space: &TaskSpaceConfig) -> Result<Vec<TestTask>> {
    let n = space.interior_size;
    if n != 7 && n != 13 {
        return Err(Error::Config(format!(
            "built-in suite exists for interior sizes 7 and 13, not {n}"
        )));
    }
    let mut layouts = vec![
        ("Empty", empty(n)),
        ("FourRooms", four_rooms(n)),
        ("Labyrinth", labyrinth(n)),
        ("Maze", maze(n)),
        ("Corridor", corridor(n)),
    ];
    if n == 13 {
        layouts.push(("SixteenRooms", sixteen_rooms(n)));
    }
    layouts
        .into_iter()
        .map(|(name, text)| TestTask::parse(name, &text, space))
        .collect()
}

/// Every `*.txt` file in `dir`, in name order; the file stem names the task.
pub fn load_suite_dir(dir: &Path, space: &TaskSpaceConfig) -> Result<Vec<TestTask>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no .txt layouts in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("task");
            TestTask::parse(name, &std::fs::read_to_string(p)?, space)
        })
        .collect()
}

/// A policy acting in a batch of parallel episodes on one grid.
pub trait BatchPolicy {
    /// Called before a batch of `n` fresh episodes.
    fn begin(&mut self, n: usize);
    fn act(
        &mut self,
        env: &GridPOMDP,
        states: &[EpisodeState],
        obs: &[Observation],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Action>>;
}

/// Follows a shortest path.
pub struct OraclePolicy;

impl BatchPolicy for OraclePolicy {
    fn begin(&mut self, _: usize) {}

    fn act(
        &mut self,
        env: &GridPOMDP,
        states: &[EpisodeState],
        _: &[Observation],
        _: &mut dyn RngCore,
    ) -> Result<Vec<Action>> {
        Ok(states
            .iter()
            .map(|s| env.optimal_action(s).unwrap_or(Action::TurnLeft))
            .collect())
    }
}

/// Uniform over the three actions.
pub struct RandomPolicy;

impl BatchPolicy for RandomPolicy {
    fn begin(&mut self, _: usize) {}

    fn act(
        &mut self,
        _: &GridPOMDP,
        states: &[EpisodeState],
        _: &[Observation],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Action>> {
        Ok(states
            .iter()
            .map(|_| Action::from_index(rng.gen_range(0..NUM_ACTIONS)))
            .collect())
    }
}

/// Only ever turns.
pub struct NeverForwardPolicy;

impl BatchPolicy for NeverForwardPolicy {
    fn begin(&mut self, _: usize) {}

    fn act(
        &mut self,
        _: &GridPOMDP,
        states: &[EpisodeState],
        _: &[Observation],
        _: &mut dyn RngCore,
    ) -> Result<Vec<Action>> {
        Ok(vec![Action::TurnLeft; states.len()])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Argmax,
    Sampled,
}

/// A trained student; parameters are only read.
pub struct StudentActor<'a> {
    pub policy: &'a StudentPolicy,
    pub params: &'a ParamTree,
    pub mode: EvalMode,
    state: Option<RawState>,
}

impl<'a> StudentActor<'a> {
    pub fn new(policy: &'a StudentPolicy, params: &'a ParamTree, mode: EvalMode) -> Self {
        Self {
            policy,
            params,
            mode,
            state: None,
        }
    }
}

impl BatchPolicy for StudentActor<'_> {
    fn begin(&mut self, n: usize) {
        self.state = Some(self.policy.initial_state(n));
    }

    fn act(
        &mut self,
        _: &GridPOMDP,
        _: &[EpisodeState],
        obs: &[Observation],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Action>> {
        let n = obs.len();
        let state = self.state.get_or_insert_with(|| self.policy.initial_state(n));
        let (probs, _) = self.policy.act(self.params, obs, state)?;
        Ok(probs
            .chunks(NUM_ACTIONS)
            .map(|p| {
                Action::from_index(match self.mode {
                    EvalMode::Argmax => argmax(p),
                    EvalMode::Sampled => sample_categorical(p, rng),
                })
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub episodes: usize,
    pub solved: usize,
}

impl TaskResult {
    pub fn rate(&self) -> f64 {
        self.solved as f64 / self.episodes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub tasks: Vec<TaskResult>,
}

impl SuiteResult {
    /// Unweighted mean of per-task solved rates.
    pub fn mean(&self) -> f64 {
        self.tasks.iter().map(TaskResult::rate).sum::<f64>() / self.tasks.len() as f64
    }

    pub const CSV_HEADER: &'static str = "task,episodes,solved,solved_rate";

    /// One row per task followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for t in &self.tasks {
            let _ = writeln!(s, "{},{},{},{:.6}", t.name, t.episodes, t.solved, t.rate());
        }
        let total: usize = self.tasks.iter().map(|t| t.episodes).sum();
        let solved: usize = self.tasks.iter().map(|t| t.solved).sum();
        let _ = writeln!(s, "mean,{total},{solved},{:.6}", self.mean());
        s
    }
}

/// Runs `episodes` independent episodes per task; an episode is solved when
/// it reaches the goal within the horizon.
pub fn evaluate<P: BatchPolicy + ?Sized>(
    policy: &mut P,
    suite: &[TestTask],
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<SuiteResult> {
    if episodes == 0 {
        return Err(Error::Input("episodes per task must be at least 1".into()));
    }
    if suite.is_empty() {
        return Err(Error::Input("empty evaluation suite".into()));
    }
    let mut tasks = Vec::with_capacity(suite.len());
    for task in suite {
        let env = &task.pomdp;
        let (s0, o0) = env.reset();
        let mut states = vec![s0; episodes];
        let mut obs = vec![o0; episodes];
        let mut solved = 0;
        policy.begin(episodes);
        while states.iter().any(|s| !s.done) {
            let actions = policy.act(env, &states, &obs, rng)?;
            for i in 0..episodes {
                if states[i].done {
                    continue;
                }
                let (o, r, _) = env.step(&mut states[i], actions[i])?;
                obs[i] = o;
                if r > 0.0 {
                    solved += 1;
                }
            }
        }
        tasks.push(TaskResult {
            name: task.name.clone(),
            episodes,
            solved,
        });
    }
    Ok(SuiteResult { tasks })
}

/// Mean solved rate of the uniform-random policy.
pub fn random_baseline(suite: &[TestTask], episodes: usize, rng: &mut dyn RngCore) -> Result<SuiteResult> {
    evaluate(&mut RandomPolicy, suite, episodes, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_spiral_layout() {
        let expected = "\
#########
#A......#
#######.#
#.....#.#
#.###.#.#
#.#G..#.#
#.#####.#
#.......#
#########
";
        assert_eq!(labyrinth(7), expected);
    }

    #[test]
    fn desk_four_rooms_layout() {
        let expected = "\
#########
#A..#...#
#.......#
#...#...#
##.###.##
#...#...#
#.......#
#...#..G#
#########
";
        assert_eq!(four_rooms(7), expected);
    }

    #[test]
    fn suites_are_solvable_and_stable() {
        for space in [TaskSpaceConfig::desk(), TaskSpaceConfig::full()] {
            let a = builtin_suite(&space).unwrap();
            let b = builtin_suite(&space).unwrap();
            assert!(a.len() >= 5);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.layout, y.layout);
                assert!(x.pomdp.shortest_path().is_some());
            }
        }
        assert_eq!(builtin_suite(&TaskSpaceConfig::full()).unwrap().len(), 6);
    }

    #[test]
    fn unsupported_size_is_config_error() {
        let space = TaskSpaceConfig {
            interior_size: 9,
            max_obstacles: 3,
        };
        assert!(matches!(builtin_suite(&space), Err(Error::Config(_))));
    }

    #[test]
    fn empty_room_path_bound() {
        let suite = builtin_suite(&TaskSpaceConfig::desk()).unwrap();
        assert!(suite[0].pomdp.shortest_path().unwrap() <= 14);
    }

    #[test]
    fn oracle_and_never_forward_bounds() {
        let suite = builtin_suite(&TaskSpaceConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let best = evaluate(&mut OraclePolicy, &suite, 3, &mut rng).unwrap();
        assert!(best.tasks.iter().all(|t| t.solved == 3));
        let worst = evaluate(&mut NeverForwardPolicy, &suite, 3, &mut rng).unwrap();
        assert_eq!(worst.mean(), 0.0);
    }
}
