//! Task parameter vectors: obstacles, goal and agent start on the interior of
//! a walled square grid, plus the text corpus used for VAE pretraining.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpaceConfig {
    /// Cells per side of the playable area.
    pub interior_size: usize,
    /// Largest number of obstacle tokens in a task.
    pub max_obstacles: usize,
}

impl Default for TaskSpaceConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TaskSpaceConfig {
    pub fn desk() -> Self {
        Self {
            interior_size: 7,
            max_obstacles: 6,
        }
    }

    pub fn full() -> Self {
        Self {
            interior_size: 13,
            max_obstacles: 50,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.interior_size * self.interior_size
    }

    /// Padded token length, `max_obstacles + 2`.
    pub fn max_len(&self) -> usize {
        self.max_obstacles + 2
    }

    /// Vocabulary size including the PAD token.
    pub fn vocab(&self) -> usize {
        self.cell_count() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.interior_size < 3 {
            return Err(Error::Config(format!(
                "interior_size must be ≥ 3, got {}",
                self.interior_size
            )));
        }
        if self.max_obstacles + 2 > self.cell_count() {
            return Err(Error::Config(format!(
                "max_obstacles {} exceeds cell_count − 2 = {}",
                self.max_obstacles,
                self.cell_count() - 2
            )));
        }
        Ok(())
    }
}

/// One point of the task space: obstacle cells, goal cell and agent start,
/// all numbered `1..=cell_count` in row-major order over the interior.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub obstacles: Vec<usize>,
    pub goal: usize,
    pub agent_start: usize,
}

impl TaskSpec {
    pub fn new(obstacles: Vec<usize>, goal: usize, agent_start: usize) -> Self {
        Self {
            obstacles,
            goal,
            agent_start,
        }
    }

    pub fn token_len(&self) -> usize {
        self.obstacles.len() + 2
    }

    /// Unpadded tokens: obstacles, goal, agent.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.obstacles.clone();
        t.push(self.goal);
        t.push(self.agent_start);
        t
    }

    pub fn validate(&self, cfg: &TaskSpaceConfig) -> Result<()> {
        let n = cfg.cell_count();
        if self.obstacles.len() > cfg.max_obstacles {
            return Err(Error::Input(format!(
                "{} obstacles exceed the maximum of {}",
                self.obstacles.len(),
                cfg.max_obstacles
            )));
        }
        if let Some(bad) = self.tokens().into_iter().find(|&c| c == 0 || c > n) {
            return Err(Error::Input(format!("cell index {bad} outside [1, {n}]")));
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.obstacles.windows(2).all(|w| w[0] <= w[1])
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let toks: Vec<String> = self.tokens().iter().map(|t| t.to_string()).collect();
        f.write_str(&toks.join(" "))
    }
}

/// Uniform draw: obstacle count uniform on `0..=K`, each cell uniform.
pub fn random_task<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskSpaceConfig) -> TaskSpec {
    let n = cfg.cell_count();
    let k = rng.gen_range(0..=cfg.max_obstacles);
    let obstacles = (0..k).map(|_| rng.gen_range(1..=n)).collect();
    let goal = rng.gen_range(1..=n);
    let agent_start = rng.gen_range(1..=n);
    TaskSpec::new(obstacles, goal, agent_start)
}

/// Sorts the obstacle segment; goal and agent stay put.
pub fn canonicalize(task: &TaskSpec) -> TaskSpec {
    let mut t = task.clone();
    t.obstacles.sort();
    t
}

/// `obstacles ++ [goal, agent]`, right-padded with PAD to `max_len`.
pub fn tokenize(task: &TaskSpec, max_len: usize) -> Result<Vec<usize>> {
    let mut t = task.tokens();
    if t.len() > max_len {
        return Err(Error::Input(format!(
            "task has {} tokens, max_len is {max_len}",
            t.len()
        )));
    }
    t.resize(max_len, PAD);
    Ok(t)
}

/// Inverse of [`tokenize`]: everything from the first PAD on is dropped.
pub fn detokenize(tokens: &[usize]) -> Result<TaskSpec> {
    let end = tokens.iter().position(|&t| t == PAD).unwrap_or(tokens.len());
    let body = &tokens[..end];
    if body.len() < 2 {
        return Err(Error::Input(format!(
            "need at least goal and agent tokens, got {}",
            body.len()
        )));
    }
    let k = body.len() - 2;
    Ok(TaskSpec::new(body[..k].to_vec(), body[k], body[k + 1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Sorted,
    Shuffled,
}

impl std::str::FromStr for CorpusMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sorted" => Ok(Self::Sorted),
            "shuffled" => Ok(Self::Shuffled),
            _ => Err(Error::Usage(format!("unknown corpus mode `{s}`"))),
        }
    }
}

/// Builds the task list for a corpus without touching the filesystem.
///
/// Sorted mode yields `n` canonical tasks. Shuffled mode yields
/// `n · shuffle_copies` tasks: for each base task, `shuffle_copies`
/// independent uniform permutations of its obstacle segment.
pub fn corpus_tasks<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
    cfg: &TaskSpaceConfig,
    mode: CorpusMode,
    shuffle_copies: usize,
) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be ≥ 1".into()));
    }
    match mode {
        CorpusMode::Sorted => Ok((0..n).map(|_| canonicalize(&random_task(rng, cfg))).collect()),
        CorpusMode::Shuffled => {
            if shuffle_copies == 0 {
                return Err(Error::Config("shuffle_copies must be ≥ 1".into()));
            }
            let mut out = Vec::with_capacity(n * shuffle_copies);
            for _ in 0..n {
                let base = random_task(rng, cfg);
                for _ in 0..shuffle_copies {
                    let mut t = base.clone();
                    t.obstacles.shuffle(rng);
                    out.push(t);
                }
            }
            Ok(out)
        }
    }
}

pub fn corpus_header(cfg: &TaskSpaceConfig) -> String {
    format!(
        "#taskspace interior={} max_obstacles={}",
        cfg.interior_size, cfg.max_obstacles
    )
}

/// Generates a corpus and writes it to `path`; returns the number of tasks.
pub fn gen_corpus<R: Rng + ?Sized>(
    path: &Path,
    n: usize,
    rng: &mut R,
    cfg: &TaskSpaceConfig,
    mode: CorpusMode,
    shuffle_copies: usize,
) -> Result<usize> {
    let tasks = corpus_tasks(n, rng, cfg, mode, shuffle_copies)?;
    write_corpus(path, cfg, &tasks)?;
    Ok(tasks.len())
}

pub fn write_corpus(path: &Path, cfg: &TaskSpaceConfig, tasks: &[TaskSpec]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", corpus_header(cfg))?;
    for t in tasks {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a corpus file, returning its task-space header and tasks.
pub fn read_corpus(path: &Path) -> Result<(TaskSpaceConfig, Vec<TaskSpec>)> {
    let f = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Input("empty corpus file".into()))?;
    let cfg = parse_header(&header)?;
    let mut tasks = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks = line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 2)))?;
        if toks.contains(&PAD) {
            return Err(Error::Input(format!("corpus line {}: PAD token in body", i + 2)));
        }
        let task = detokenize(&toks).map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 2)))?;
        task.validate(&cfg)
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 2)))?;
        tasks.push(task);
    }
    Ok((cfg, tasks))
}

fn parse_header(line: &str) -> Result<TaskSpaceConfig> {
    let rest = line
        .strip_prefix("#taskspace ")
        .ok_or_else(|| Error::Input(format!("bad corpus header `{line}`")))?;
    let mut interior = None;
    let mut k = None;
    for kv in rest.split_whitespace() {
        let (key, val) = kv
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("bad header field `{kv}`")))?;
        let val: usize = val
            .parse()
            .map_err(|_| Error::Input(format!("bad header value `{kv}`")))?;
        match key {
            "interior" => interior = Some(val),
            "max_obstacles" => k = Some(val),
            _ => return Err(Error::Input(format!("unknown header field `{key}`"))),
        }
    }
    let cfg = TaskSpaceConfig {
        interior_size: interior.ok_or_else(|| Error::Input("header lacks interior".into()))?,
        max_obstacles: k.ok_or_else(|| Error::Input("header lacks max_obstacles".into()))?,
    };
    cfg.validate()?;
    Ok(cfg)
}
