//! The three-policy curriculum loop: teacher proposes, agent and
//! antagonist play the proposals, regret trains the teacher.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::env::build_pomdp;
use crate::error::{Error, Result};
use crate::eval::{builtin_suite, evaluate, EvalMode, StudentActor, SuiteResult, TestTask};
use crate::nn::{checkpoint, AdamConfig, ParamTree};
use crate::ppo::{collect_rollout, update_student, PpoConfig, StudentConfig, StudentPolicy};
use crate::task::TaskSpaceConfig;
use crate::teachers::{
    estimate_regret, teacher_update, ClutrTeacherConfig, ClutrTeacherPolicy, LatentDecoder, PairedTeacherConfig,
    PairedTeacherPolicy, RegretFlavor, Teacher,
};
use crate::vae::{TaskVae, VaeConfig};

pub const STATE_VERSION: u32 = 1;
pub const SNAPSHOT_TASKS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Clutr,
    Paired,
    Dr,
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clutr" => Ok(Algo::Clutr),
            "paired" => Ok(Algo::Paired),
            "dr" => Ok(Algo::Dr),
            other => Err(Error::Usage(format!("unknown algorithm `{other}` (clutr, paired, dr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algo: Algo,
    pub regret: RegretFlavor,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub seed: u64,
    pub finetune_vae: bool,
    pub shuffled_corpus: bool,
    pub vae_checkpoint: Option<PathBuf>,
    /// Teacher updates between curriculum snapshots; 0 disables them.
    pub snapshot_every: usize,
    /// When false, the wall_seconds column is written as 0 so that
    /// metrics files of equal-seed runs compare byte for byte.
    pub record_wall_time: bool,
    pub taskspace: TaskSpaceConfig,
    pub vae: VaeConfig,
    pub ppo: PpoConfig,
    pub student: StudentConfig,
    pub clutr_teacher: ClutrTeacherConfig,
    pub paired_teacher: PairedTeacherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Clutr,
            regret: RegretFlavor::Standard,
            total_env_steps: 1_000_000,
            eval_every: 50_000,
            eval_episodes: 10,
            eval_mode: EvalMode::Argmax,
            seed: 0,
            finetune_vae: false,
            shuffled_corpus: false,
            vae_checkpoint: None,
            snapshot_every: 50,
            record_wall_time: true,
            taskspace: TaskSpaceConfig::desk(),
            vae: VaeConfig::desk(),
            ppo: PpoConfig::desk(),
            student: StudentConfig::desk(),
            clutr_teacher: ClutrTeacherConfig::default(),
            paired_teacher: PairedTeacherConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.taskspace.validate()?;
        self.vae.validate()?;
        self.ppo.validate()?;
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("eval_every and eval_episodes must be positive".into()));
        }
        if self.algo == Algo::Clutr && self.vae_checkpoint.is_none() {
            return Err(Error::Config("clutr requires a VAE checkpoint".into()));
        }
        if self.finetune_vae && self.algo != Algo::Clutr {
            return Err(Error::Config("finetune_vae is only valid with algo clutr".into()));
        }
        Ok(())
    }

    /// Number of metrics rows a run produces.
    pub fn metrics_rows(&self) -> u64 {
        self.total_env_steps.div_ceil(self.eval_every).max(1)
    }

    /// Env-step threshold of row `k` (zero-based).
    fn threshold(&self, k: u64) -> u64 {
        ((k + 1) * self.eval_every).min(self.total_env_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub regret_mean: f64,
    pub agent_return: f64,
    pub antagonist_return: f64,
    pub teacher_loss: f64,
    pub solved: Vec<(String, f64)>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn header(task_names: &[String]) -> String {
        let mut s = String::from("env_steps,regret_mean,agent_return,antagonist_return,teacher_loss");
        for n in task_names {
            let _ = write!(s, ",solved_{n}");
        }
        s.push_str(",wall_seconds");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.env_steps, self.regret_mean, self.agent_return, self.antagonist_return, self.teacher_loss
        );
        for (_, r) in &self.solved {
            let _ = write!(s, ",{r:.6}");
        }
        let _ = write!(s, ",{:.3}", self.wall_seconds);
        s
    }

    pub fn mean_solved(&self) -> f64 {
        self.solved.iter().map(|(_, r)| r).sum::<f64>() / self.solved.len().max(1) as f64
    }
}

/// Running sums between two metrics rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Accumulator {
    regret: f64,
    agent: f64,
    antagonist: f64,
    teacher_loss: f64,
    iterations: u64,
}

/// Everything besides parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LoopState {
    version: u32,
    env_steps: u64,
    iteration: u64,
    teacher_updates: u64,
    rows_written: u64,
    wall_offset: f64,
    rng: ChaCha8Rng,
    acc: Accumulator,
    trailing_agent: VecDeque<f64>,
    trailing_antagonist: VecDeque<f64>,
}

/// Summary returned by a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub env_steps: u64,
    pub iterations: u64,
    pub teacher_updates: u64,
    pub rows: Vec<MetricsRow>,
}

impl RunSummary {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Live learners of a run.
pub struct RunState {
    pub cfg: RunConfig,
    pub student: StudentPolicy,
    pub agent: ParamTree,
    pub antagonist: ParamTree,
    pub teacher: Teacher,
    suite: Vec<TestTask>,
    state: LoopState,
}

const TRAILING: usize = 10;

fn load_decoder(cfg: &RunConfig) -> Result<(LatentDecoder, VaeConfig)> {
    let path = cfg
        .vae_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("clutr requires a VAE checkpoint".into()))?;
    let vae = TaskVae::load(path)?;
    if vae.space != cfg.taskspace {
        return Err(Error::Config(format!(
            "VAE was trained for interior {} / K {}, run uses interior {} / K {}",
            vae.space.interior_size, vae.space.max_obstacles, cfg.taskspace.interior_size, cfg.taskspace.max_obstacles
        )));
    }
    let finetune = cfg.finetune_vae.then(|| AdamConfig::new(vae.cfg.lr, vae.cfg.adam_eps));
    Ok((
        LatentDecoder::new(vae.decoder_params(), vae.max_len(), finetune)?,
        vae.cfg.clone(),
    ))
}

impl RunState {
    /// Fresh learners for `cfg`.
    pub fn new(mut cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (student, agent) = StudentPolicy::init(&cfg.student, &mut rng)?;
        let mut antagonist = ParamTree::new();
        StudentPolicy::new(&mut antagonist, &cfg.student, &mut rng)?;
        let teacher = match cfg.algo {
            Algo::Clutr => {
                let (decoder, vae_cfg) = load_decoder(&cfg)?;
                cfg.vae = vae_cfg;
                let mut params = ParamTree::new();
                let policy = ClutrTeacherPolicy::new(
                    &mut params,
                    &cfg.clutr_teacher,
                    cfg.vae.latent_dim,
                    cfg.vae.mean_scale,
                    &mut rng,
                )?;
                Teacher::Clutr {
                    policy,
                    params,
                    decoder,
                }
            }
            Algo::Paired => {
                let mut params = ParamTree::new();
                let policy = PairedTeacherPolicy::new(
                    &mut params,
                    &cfg.paired_teacher,
                    &cfg.taskspace,
                    cfg.student.cell,
                    &mut rng,
                )?;
                Teacher::Paired { policy, params }
            }
            Algo::Dr => Teacher::Dr { space: cfg.taskspace },
        };
        Ok(Self {
            suite: builtin_suite(&cfg.taskspace)?,
            student,
            agent,
            antagonist,
            teacher,
            state: LoopState {
                version: STATE_VERSION,
                env_steps: 0,
                iteration: 0,
                teacher_updates: 0,
                rows_written: 0,
                wall_offset: 0.0,
                rng,
                acc: Accumulator::default(),
                trailing_agent: VecDeque::new(),
                trailing_antagonist: VecDeque::new(),
            },
            cfg,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.state.env_steps
    }

    pub fn teacher_updates(&self) -> u64 {
        self.state.teacher_updates
    }

    pub fn suite(&self) -> &[TestTask] {
        &self.suite
    }

    /// The decoder parameters, for latent teachers.
    pub fn decoder_params(&self) -> Option<&ParamTree> {
        match &self.teacher {
            Teacher::Clutr { decoder, .. } => Some(&decoder.params),
            _ => None,
        }
    }

    /// Whether the antagonist is currently reported as the agent.
    fn swapped(&self) -> bool {
        let mean = |q: &VecDeque<f64>| q.iter().sum::<f64>() / q.len().max(1) as f64;
        self.cfg.regret == RegretFlavor::Flexible
            && mean(&self.state.trailing_antagonist) > mean(&self.state.trailing_agent)
    }

    /// One teacher decision round: propose, play, update all learners.
    pub fn iterate(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let rng = &mut self.state.rng;
        let proposals = self.teacher.propose(cfg.ppo.workers, rng)?;
        let envs = proposals
            .iter()
            .map(|p| build_pomdp(&p.task, &cfg.taskspace))
            .collect::<Result<Vec<_>>>()?;
        let agent_trajs = collect_rollout(&self.student, &self.agent, &envs, cfg.ppo.rollout_len, rng)?;
        let antagonist_trajs = collect_rollout(&self.student, &self.antagonist, &envs, cfg.ppo.rollout_len, rng)?;
        let mut regrets = Vec::with_capacity(envs.len());
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for (a, b) in agent_trajs.iter().zip(&antagonist_trajs) {
            let est = estimate_regret(cfg.regret, &a.returns_or_zero(), &b.returns_or_zero())?;
            sum_a += est.agent_return;
            sum_b += est.antagonist_return;
            regrets.push(est.value);
        }
        update_student(&self.student, &mut self.agent, &agent_trajs, &cfg.ppo, rng)?;
        update_student(&self.student, &mut self.antagonist, &antagonist_trajs, &cfg.ppo, rng)?;
        let stats = teacher_update(&mut self.teacher, &proposals, &regrets, &cfg.ppo, rng)?;

        let n = envs.len() as f64;
        let acc = &mut self.state.acc;
        acc.regret += regrets.iter().sum::<f64>() / n;
        acc.agent += sum_a / n;
        acc.antagonist += sum_b / n;
        if let Some(s) = stats {
            acc.teacher_loss += s.total;
            self.state.teacher_updates += 1;
        }
        acc.iterations += 1;
        push_trailing(&mut self.state.trailing_agent, sum_a / n);
        push_trailing(&mut self.state.trailing_antagonist, sum_b / n);
        self.state.iteration += 1;
        self.state.env_steps += (cfg.ppo.workers * cfg.ppo.rollout_len) as u64;
        Ok(())
    }

    /// Solved rates of the reported agent on the test suite.
    pub fn evaluate(&self, eval_index: u64) -> Result<SuiteResult> {
        let params = if self.swapped() { &self.antagonist } else { &self.agent };
        let mut actor = StudentActor::new(&self.student, params, self.cfg.eval_mode);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (eval_index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        evaluate(&mut actor, &self.suite, self.cfg.eval_episodes, &mut rng)
    }

    fn make_row(&mut self, wall_seconds: f64) -> Result<MetricsRow> {
        let result = self.evaluate(self.state.rows_written)?;
        let acc = std::mem::take(&mut self.state.acc);
        let k = acc.iterations.max(1) as f64;
        let (agent, antagonist) = if self.swapped() {
            (acc.antagonist / k, acc.agent / k)
        } else {
            (acc.agent / k, acc.antagonist / k)
        };
        let regret = if self.swapped() && self.cfg.regret == RegretFlavor::Standard {
            -acc.regret / k
        } else {
            acc.regret / k
        };
        Ok(MetricsRow {
            env_steps: self.state.env_steps,
            regret_mean: regret,
            agent_return: agent,
            antagonist_return: antagonist,
            teacher_loss: acc.teacher_loss / k,
            solved: result.tasks.iter().map(|t| (t.name.clone(), t.rate())).collect(),
            wall_seconds,
        })
    }

    /// Proposals of the current teacher, rendered, from a side stream.
    pub fn snapshot(&self) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(self.state.iteration));
        let proposals = self.teacher.propose(SNAPSHOT_TASKS, &mut rng)?;
        let mut s = String::new();
        for (i, p) in proposals.iter().enumerate() {
            let env = build_pomdp(&p.task, &self.cfg.taskspace)?;
            let _ = writeln!(s, "task {i}: {}", p.task);
            s.push_str(&env.to_string());
            s.push('\n');
        }
        Ok(s)
    }

    /// Writes all parameters and loop state under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = |role: &str| json!({"kind": "run", "role": role, "version": STATE_VERSION});
        checkpoint::save(&dir.join("agent.ckpt"), &self.agent, &header("agent"))?;
        checkpoint::save(&dir.join("antagonist.ckpt"), &self.antagonist, &header("antagonist"))?;
        match &self.teacher {
            Teacher::Clutr { params, decoder, .. } => {
                checkpoint::save(&dir.join("teacher.ckpt"), params, &header("teacher"))?;
                checkpoint::save(&dir.join("decoder.ckpt"), &decoder.params, &header("decoder"))?;
            }
            Teacher::Paired { params, .. } => {
                checkpoint::save(&dir.join("teacher.ckpt"), params, &header("teacher"))?;
            }
            Teacher::Dr { .. } => {}
        }
        let state = serde_json::to_string_pretty(&self.state)?;
        fs::write(dir.join("state.json"), state)?;
        Ok(())
    }

    /// Rebuilds a run from `config.json` and a checkpoint directory.
    pub fn restore(cfg: RunConfig, dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("state.json"))
            .map_err(|e| Error::Load(format!("{}: {e}", dir.join("state.json").display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Load(format!("state.json: {e}")))?;
        if raw["version"] != json!(STATE_VERSION) {
            return Err(Error::Load(format!(
                "run state version {} is not supported (expected {STATE_VERSION})",
                raw["version"]
            )));
        }
        let state: LoopState = serde_json::from_value(raw).map_err(|e| Error::Load(format!("state.json: {e}")))?;
        let load = |name: &str| -> Result<ParamTree> {
            let (tree, header) = checkpoint::load(&dir.join(name))?;
            if header["version"] != json!(STATE_VERSION) {
                return Err(Error::Load(format!("{name}: unsupported version")));
            }
            Ok(tree)
        };
        let agent = load("agent.ckpt")?;
        let antagonist = load("antagonist.ckpt")?;
        let student = StudentPolicy::bind(&agent)?;
        let teacher = match cfg.algo {
            Algo::Clutr => {
                let params = load("teacher.ckpt")?;
                let decoder_params = load("decoder.ckpt")?;
                let policy = ClutrTeacherPolicy::bind(&params, cfg.vae.latent_dim, cfg.vae.mean_scale)?;
                let finetune = cfg.finetune_vae.then(|| AdamConfig::new(cfg.vae.lr, cfg.vae.adam_eps));
                let decoder = LatentDecoder::new(decoder_params, cfg.taskspace.max_len(), finetune)?;
                Teacher::Clutr {
                    policy,
                    params,
                    decoder,
                }
            }
            Algo::Paired => {
                let params = load("teacher.ckpt")?;
                Teacher::Paired {
                    policy: PairedTeacherPolicy::bind(&params, &cfg.taskspace)?,
                    params,
                }
            }
            Algo::Dr => Teacher::Dr { space: cfg.taskspace },
        };
        Ok(Self {
            suite: builtin_suite(&cfg.taskspace)?,
            cfg,
            student,
            agent,
            antagonist,
            teacher,
            state,
        })
    }
}

fn push_trailing(q: &mut VecDeque<f64>, x: f64) {
    q.push_back(x);
    while q.len() > TRAILING {
        q.pop_front();
    }
}

/// Paths inside a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }
}

/// Starts a fresh run in `out` and trains to the configured budget.
pub fn run_curriculum(cfg: RunConfig, out: &Path) -> Result<RunSummary> {
    let run = RunState::new(cfg)?;
    let dir = RunDir::new(out);
    fs::create_dir_all(dir.snapshots())?;
    fs::write(dir.config(), serde_json::to_string_pretty(&run.cfg)?)?;
    let names: Vec<String> = run.suite.iter().map(|t| t.name.clone()).collect();
    fs::write(dir.metrics(), format!("{}\n", MetricsRow::header(&names)))?;
    drive(run, &dir)
}

/// Curriculum run in which the decoder is tuned on the regret signal.
pub fn run_finetune_ablation(cfg: RunConfig, out: &Path) -> Result<RunSummary> {
    if cfg.algo != Algo::Clutr || !cfg.finetune_vae {
        return Err(Error::Config(
            "the finetune ablation needs algo clutr with finetune_vae".into(),
        ));
    }
    run_curriculum(cfg, out)
}

/// Continues an interrupted run from its last checkpoint.
pub fn resume(out: &Path) -> Result<RunSummary> {
    let dir = RunDir::new(out);
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.config())?)
        .map_err(|e| Error::Load(format!("config.json: {e}")))?;
    let run = RunState::restore(cfg, &dir.checkpoints())?;
    truncate_metrics(&dir.metrics(), run.state.rows_written)?;
    drive(run, &dir)
}

/// Keeps the header plus the first `rows` data lines.
fn truncate_metrics(path: &Path, rows: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text.lines().take(rows as usize + 1).collect();
    fs::write(path, format!("{}\n", kept.join("\n")))?;
    Ok(())
}

fn drive(mut run: RunState, dir: &RunDir) -> Result<RunSummary> {
    let start = Instant::now();
    let offset = run.state.wall_offset;
    let total_rows = run.cfg.metrics_rows();
    let mut rows = Vec::new();
    let mut metrics = fs::OpenOptions::new().append(true).open(dir.metrics())?;
    while run.state.rows_written < total_rows {
        let k = run.state.rows_written;
        if run.state.env_steps >= run.cfg.threshold(k) {
            let wall = if run.cfg.record_wall_time {
                offset + start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let row = run.make_row(wall)?;
            writeln!(metrics, "{}", row.to_csv())?;
            metrics.flush()?;
            run.state.rows_written += 1;
            run.state.wall_offset = wall;
            run.save(&dir.checkpoints())?;
            rows.push(row);
            continue;
        }
        run.iterate()?;
        let every = run.cfg.snapshot_every as u64;
        if every > 0 && run.state.iteration.is_multiple_of(every) && !matches!(run.teacher, Teacher::Dr { .. }) {
            let path = dir.snapshots().join(format!("iter_{:06}.txt", run.state.iteration));
            fs::write(path, run.snapshot()?)?;
        }
    }
    Ok(RunSummary {
        env_steps: run.state.env_steps,
        iterations: run.state.iteration,
        teacher_updates: run.state.teacher_updates,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_bookkeeping() {
        let mut cfg = RunConfig {
            total_env_steps: 10_000,
            eval_every: 3_000,
            ..Default::default()
        };
        assert_eq!(cfg.metrics_rows(), 4);
        assert_eq!(cfg.threshold(3), 10_000);
        cfg.total_env_steps = 0;
        assert_eq!(cfg.metrics_rows(), 1);
        assert_eq!(cfg.threshold(0), 0);
    }

    #[test]
    fn config_rules() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig {
            algo: Algo::Dr,
            finetune_vae: true,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!("ppo".parse::<Algo>().is_err());
    }

    #[test]
    fn header_layout() {
        let h = MetricsRow::header(&["Empty".into(), "Maze".into()]);
        assert_eq!(
            h,
            "env_steps,regret_mean,agent_return,antagonist_return,teacher_loss,solved_Empty,solved_Maze,wall_seconds"
        );
    }
}
