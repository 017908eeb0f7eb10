use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ued_core::eval::{builtin_suite, evaluate, load_suite_dir, EvalMode, OraclePolicy, StudentActor};
use ued_core::nn::checkpoint;
use ued_core::orchestrator::{resume, run_curriculum, run_finetune_ablation, Algo, RunConfig};
use ued_core::ppo::{PpoConfig, StudentConfig, StudentPolicy};
use ued_core::task::{gen_corpus, read_corpus, CorpusMode, TaskSpaceConfig};
use ued_core::teachers::{ClutrTeacherConfig, PairedTeacherConfig, RegretFlavor};
use ued_core::vae::{split_heldout, train_vae, VaeConfig, VaeMetrics};
use ued_core::{Error, Result};

const SEED_ENV: &str = "UED_LAB_SEED";

#[derive(Parser)]
#[command(name = "ued-lab", version, about = "Latent-manifold curriculum learning lab")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Caps the number of parallel environment slots.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus of random tasks for VAE pretraining.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the task VAE on a corpus.
    TrainVae(TrainVaeArgs),
    /// Run a curriculum (clutr, paired or dr).
    Train(TrainArgs),
    /// Zero-shot evaluation on a test suite.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mode: Option<CorpusMode>,
    #[arg(long)]
    shuffle_copies: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainVaeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory (vae.ckpt, metrics.csv, config.json).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    flexible_regret: bool,
    #[arg(long)]
    finetune_vae: bool,
    /// Write 0 in the wall_seconds column.
    #[arg(long)]
    no_wall_clock: bool,
    /// Continue the run in `--out` from its last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory or agent checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `builtin` or a directory of layout files.
    #[arg(long, default_value = "builtin")]
    suite: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the shortest-path oracle instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// Sample actions instead of taking the most likely one.
    #[arg(long)]
    sampled: bool,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CorpusConfig {
    n: usize,
    mode: CorpusMode,
    shuffle_copies: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 50_000,
            mode: CorpusMode::Sorted,
            shuffle_copies: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainConfig {
    algo: Algo,
    regret: RegretFlavor,
    total_env_steps: u64,
    eval_every: u64,
    eval_episodes: usize,
    eval_mode: EvalMode,
    finetune_vae: bool,
    shuffled_corpus: bool,
    vae_checkpoint: Option<PathBuf>,
    snapshot_every: usize,
    record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            algo: r.algo,
            regret: r.regret,
            total_env_steps: r.total_env_steps,
            eval_every: r.eval_every,
            eval_episodes: r.eval_episodes,
            eval_mode: r.eval_mode,
            finetune_vae: r.finetune_vae,
            shuffled_corpus: r.shuffled_corpus,
            vae_checkpoint: r.vae_checkpoint,
            snapshot_every: r.snapshot_every,
            record_wall_time: r.record_wall_time,
        }
    }
}

/// The config file document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    seed: Option<u64>,
    taskspace: TaskSpaceConfig,
    corpus: CorpusConfig,
    vae: VaeConfig,
    ppo: PpoConfig,
    student: StudentConfig,
    clutr_teacher: ClutrTeacherConfig,
    paired_teacher: PairedTeacherConfig,
    train: TrainConfig,
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        self.taskspace.validate()?;
        self.vae.validate()?;
        self.ppo.validate()?;
        if self.corpus.n == 0 || self.corpus.shuffle_copies == 0 {
            return Err(Error::Config("corpus n and shuffle_copies must be positive".into()));
        }
        Ok(())
    }

    /// Flag, then config file, then environment, then 0.
    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
            Err(_) => Ok(0),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ued-lab: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Usage("--workers must be at least 1".into()));
        }
        cfg.ppo.workers = w;
    }
    cfg.validate()?;
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(cfg, a),
        Command::TrainVae(a) => cmd_train_vae(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
    }
}

fn cmd_gen_corpus(cfg: CliConfig, a: GenCorpusArgs) -> Result<()> {
    let seed = cfg.seed(a.seed)?;
    let n = a.n.unwrap_or(cfg.corpus.n);
    let mode = a.mode.unwrap_or(cfg.corpus.mode);
    let copies = a.shuffle_copies.unwrap_or(cfg.corpus.shuffle_copies);
    if n == 0 || copies == 0 {
        return Err(Error::Usage("--n and --shuffle-copies must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = gen_corpus(&a.out, n, &mut rng, &cfg.taskspace, mode, copies)?;
    println!("{count}");
    Ok(())
}

fn cmd_train_vae(cfg: CliConfig, a: TrainVaeArgs) -> Result<()> {
    if !a.corpus.is_file() {
        return Err(Error::Usage(format!("corpus {} not found", a.corpus.display())));
    }
    let seed = cfg.seed(a.seed)?;
    let (space, tasks) = read_corpus(&a.corpus)?;
    if space != cfg.taskspace {
        return Err(Error::Config(format!(
            "corpus is for interior {} / K {}, config says interior {} / K {}",
            space.interior_size, space.max_obstacles, cfg.taskspace.interior_size, cfg.taskspace.max_obstacles
        )));
    }
    if tasks.len() < 2 {
        return Err(Error::Input("corpus needs at least two tasks".into()));
    }
    let mut vae_cfg = cfg.vae.clone();
    if let Some(s) = a.steps {
        vae_cfg.steps = s;
    }
    let (train, heldout) = split_heldout(&tasks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vae, metrics) = train_vae(train, heldout, &vae_cfg, &space, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    vae.save(&a.out.join("vae.ckpt"))?;
    let mut csv = format!("{}\n", VaeMetrics::CSV_HEADER);
    for m in &metrics {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    let echo = serde_json::json!({"seed": seed, "corpus": a.corpus, "taskspace": space, "vae": vae_cfg});
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    if let Some(last) = metrics.last() {
        println!(
            "step {} held-out token accuracy {:.4} exact {:.4}",
            last.step, last.heldout_token_acc, last.heldout_exact
        );
    }
    Ok(())
}

fn cmd_train(cfg: CliConfig, a: TrainArgs) -> Result<()> {
    if a.resume {
        let summary = resume(&a.out)?;
        println!("resumed to {} env steps", summary.env_steps);
        return Ok(());
    }
    let t = &cfg.train;
    let algo = a.algo.unwrap_or(t.algo);
    let finetune = a.finetune_vae || t.finetune_vae;
    if finetune && algo != Algo::Clutr {
        return Err(Error::Usage("--finetune-vae requires --algo clutr".into()));
    }
    let mut vae = a.vae.clone().or(t.vae_checkpoint.clone());
    if algo != Algo::Clutr && vae.is_some() {
        eprintln!("ued-lab: warning: --vae is ignored for --algo {}", algo_name(algo));
        vae = None;
    }
    if let Some(p) = &vae {
        if !p.is_file() {
            return Err(Error::Usage(format!("VAE checkpoint {} not found", p.display())));
        }
    }
    let run = RunConfig {
        algo,
        regret: if a.flexible_regret {
            RegretFlavor::Flexible
        } else {
            t.regret
        },
        total_env_steps: a.steps.unwrap_or(t.total_env_steps),
        eval_every: a.eval_every.unwrap_or(t.eval_every),
        eval_episodes: t.eval_episodes,
        eval_mode: t.eval_mode,
        seed: cfg.seed(a.seed)?,
        finetune_vae: finetune,
        shuffled_corpus: t.shuffled_corpus,
        vae_checkpoint: vae,
        snapshot_every: t.snapshot_every,
        record_wall_time: t.record_wall_time && !a.no_wall_clock,
        taskspace: cfg.taskspace,
        vae: cfg.vae.clone(),
        ppo: cfg.ppo.clone(),
        student: cfg.student.clone(),
        clutr_teacher: cfg.clutr_teacher.clone(),
        paired_teacher: cfg.paired_teacher.clone(),
    };
    let summary = if run.finetune_vae {
        run_finetune_ablation(run, &a.out)?
    } else {
        run_curriculum(run, &a.out)?
    };
    if let Some(row) = summary.final_row() {
        println!(
            "{} env steps, {} teacher updates, mean solved rate {:.4}",
            summary.env_steps,
            summary.teacher_updates,
            row.mean_solved()
        );
    }
    Ok(())
}

fn algo_name(a: Algo) -> &'static str {
    match a {
        Algo::Clutr => "clutr",
        Algo::Paired => "paired",
        Algo::Dr => "dr",
    }
}

/// Finds the agent checkpoint and the run's task space, if recorded.
fn locate_agent(path: &Path) -> Result<(PathBuf, Option<TaskSpaceConfig>)> {
    let (ckpt, run_dir) = if path.is_dir() {
        (path.join("checkpoints").join("agent.ckpt"), Some(path.to_path_buf()))
    } else {
        let dir = path.parent().and_then(Path::parent).map(Path::to_path_buf);
        (path.to_path_buf(), dir)
    };
    if !ckpt.is_file() {
        return Err(Error::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let space = run_dir
        .map(|d| d.join("config.json"))
        .filter(|p| p.is_file())
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .map(|c| c.taskspace);
    Ok((ckpt, space))
}

fn cmd_eval(cfg: CliConfig, a: EvalArgs) -> Result<()> {
    if a.episodes == 0 {
        return Err(Error::Usage("--episodes must be at least 1".into()));
    }
    let seed = cfg.seed(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = if a.sampled {
        EvalMode::Sampled
    } else {
        cfg.train.eval_mode
    };
    let mut space = cfg.taskspace;
    let agent = if a.oracle {
        None
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Usage("--checkpoint is required unless --oracle is given".into()))?;
        let (ckpt, run_space) = locate_agent(path)?;
        if let Some(s) = run_space {
            space = s;
        }
        let (tree, _) = checkpoint::load(&ckpt)?;
        Some(tree)
    };
    let suite = if a.suite == "builtin" {
        builtin_suite(&space)?
    } else {
        let dir = PathBuf::from(&a.suite);
        if !dir.is_dir() {
            return Err(Error::Usage(format!("suite directory {} not found", dir.display())));
        }
        load_suite_dir(&dir, &space)?
    };
    let result = match &agent {
        None => evaluate(&mut OraclePolicy, &suite, a.episodes, &mut rng)?,
        Some(tree) => {
            let policy = StudentPolicy::bind(tree)?;
            let mut actor = StudentActor::new(&policy, tree, mode);
            evaluate(&mut actor, &suite, a.episodes, &mut rng)?
        }
    };
    for t in &result.tasks {
        println!("{:<16} {:>4}/{:<4} {:.3}", t.name, t.solved, t.episodes, t.rate());
    }
    println!("{:<16} {:>10} {:.3}", "mean", "", result.mean());
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, result.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<CliConfig>(r#"{"taskspace": {"interior_size": 7, "bogus": 1}}"#);
        assert!(err.is_err());
        let ok: CliConfig = serde_json::from_str(r#"{"ppo": {"workers": 2}}"#).unwrap();
        assert_eq!(ok.ppo.workers, 2);
        assert_eq!(ok.taskspace, TaskSpaceConfig::desk());
    }

    #[test]
    fn seed_precedence() {
        let cfg = CliConfig {
            seed: Some(7),
            ..Default::default()
        };
        assert_eq!(cfg.seed(Some(3)).unwrap(), 3);
        assert_eq!(cfg.seed(None).unwrap(), 7);
    }
}
