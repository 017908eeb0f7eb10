//! Acceptance criteria A1–A10.
//!
//! Each test prints one `A<n> PASS|FAIL ...` line and then asserts. The
//! long training experiments (A5, A6, A7) are ignored by default; run them
//! with `cargo test --release -p ued-cli --test acceptance -- --ignored --nocapture`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use ued_core::eval::{builtin_suite, evaluate, random_baseline, EvalMode, StudentActor};
use ued_core::nn::{
    checkpoint, grad_check, CellKind, Coverage, Dense, Embedding, Graph, Highway, ParamTree, Recurrent, Var,
};
use ued_core::orchestrator::{run_curriculum, Algo, RunConfig, RunDir};
use ued_core::ppo::{compute_gae, PpoConfig, StudentPolicy};
use ued_core::task::{corpus_tasks, CorpusMode, TaskSpaceConfig};
use ued_core::teachers::{
    clutr_update, flexible_regret, standard_regret, ClutrTeacherConfig, ClutrTeacherPolicy, LatentDecoder,
};
use ued_core::vae::{kl_to_prior, reconstruction_stats, split_heldout, train_vae, ReconStats, TaskVae, VaeConfig};

// Tolerances and budgets.
const A1_LAYER_TOL: f64 = 1e-4;
const A1_ELBO_TOL: f64 = 1e-3;
const A1_BUDGET: Duration = Duration::from_secs(120);
const A1_SEEDS: u64 = 20;
const A2_TOL: f64 = 1e-2;
const A2_SAMPLES: usize = 100_000;
const A2_PAIRS: usize = 50;
const A3_TOL: f64 = 1e-10;
const A4_PAIRS: usize = 1000;
const A5_MIN_TOKEN_ACC: f64 = 0.90;
const A5_BUDGET: Duration = Duration::from_secs(30 * 60);
const CORPUS_N: usize = 50_000;
const A6_SEEDS: u64 = 3;
const A7_SEEDS: u64 = 3;
const A7_STEPS: u64 = 1_000_000;
const A7_BUDGET: Duration = Duration::from_secs(3 * 3600);
const A7_EVAL_EPISODES: usize = 100;
const A7_BASELINE_EPISODES: usize = 10_000;
const A10_UPDATES: usize = 500;
const A10_TARGET: f64 = 0.9;
const A10_SEEDS: u64 = 5;
const A10_PROBE: usize = 2000;

fn report(id: &str, pass: bool, detail: &str) {
    // Direct write, so the line shows without --nocapture.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn input(g: &mut Graph, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
    let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.constant(rows, cols, v)
}

fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let w = input(g, &mut rng, r, c);
    let m = g.mul(out, w);
    g.mean(m)
}

#[test]
fn a1_gradient_correctness() {
    let start = Instant::now();
    let vcfg = VaeConfig::desk();
    let space = TaskSpaceConfig::desk();
    let (e, h, len, batch) = (vcfg.embedding_dim, vcfg.encoder_hidden, space.max_len(), 3);
    let step = 1e-5;
    // The ELBO is O(300); a wider step keeps round-off below the tolerance.
    let elbo_step = 1e-4;
    let mut skipped = 0;
    let cover = Coverage::PerTensor(12);
    let mut worst_layer: f64 = 0.0;
    let mut worst_elbo: f64 = 0.0;
    for seed in 0..A1_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        let dense = Dense::new(&mut tree, "dense", h, h, &mut rng).unwrap();
        let r = grad_check(&mut tree, step, cover, |g, p| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = input(g, &mut r, batch, h);
            let y = dense.forward(g, p, x)?;
            Ok(probe(g, y, seed))
        })
        .unwrap();
        worst_layer = worst_layer.max(r.max_rel_error);
        skipped += r.kinks_skipped;

        let mut tree = ParamTree::new();
        let emb = Embedding::new(&mut tree, "emb", space.vocab(), e, &mut rng).unwrap();
        let hw = Highway::new(&mut tree, "hw", e, &mut rng).unwrap();
        let r = grad_check(&mut tree, step, cover, |g, p| {
            let x = emb.forward(g, p, &[1, 7, 0, 49])?;
            let y = hw.forward(g, p, x)?;
            Ok(probe(g, y, seed))
        })
        .unwrap();
        worst_layer = worst_layer.max(r.max_rel_error);
        skipped += r.kinks_skipped;

        for kind in [CellKind::Lstm, CellKind::Gru] {
            let mut tree = ParamTree::new();
            let rnn = Recurrent::new(&mut tree, "rnn", kind, e, h, true, &mut rng).unwrap();
            let r = grad_check(&mut tree, step, cover, |g, p| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let xs: Vec<Var> = (0..len).map(|_| input(g, &mut r, batch, e)).collect();
                let out = rnn.forward(g, p, &xs)?;
                let cat = g.concat(&[out.last, out.steps[len / 2]]);
                Ok(probe(g, cat, seed))
            })
            .unwrap();
            worst_layer = worst_layer.max(r.max_rel_error);
            skipped += r.kinks_skipped;
        }

        let vae = TaskVae::new(vcfg.clone(), space, &mut rng).unwrap();
        let mut params = vae.params.clone();
        let tasks = corpus_tasks(batch, &mut rng, &space, CorpusMode::Sorted, 1).unwrap();
        let tokens = vae.tokenize_batch(&tasks).unwrap();
        let r = grad_check(&mut params, elbo_step, cover, |g, p| {
            let mut noise = ChaCha8Rng::seed_from_u64(seed);
            let (total, _, _) = vae.elbo_graph(g, p, &tokens, Some(&mut noise), true)?;
            Ok(total)
        })
        .unwrap();
        worst_elbo = worst_elbo.max(r.max_rel_error);
        skipped += r.kinks_skipped;
    }
    let elapsed = start.elapsed();
    let pass = worst_layer < A1_LAYER_TOL && worst_elbo < A1_ELBO_TOL && elapsed < A1_BUDGET;
    report(
        "A1",
        pass,
        &format!(
            "layers max rel err {worst_layer:.2e} (< {A1_LAYER_TOL:e}), ELBO {worst_elbo:.2e} (< {A1_ELBO_TOL:e}), {skipped} kink-crossing coordinates skipped, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a2_kl_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..A2_PAIRS {
        // Antithetic pairs cancel the mu-dependent noise; the remaining
        // per-sample variance is (σ² − 1)² / 2, which this logvar range
        // keeps below 0.25 so the tolerance sits above 6 standard errors.
        let mu: f64 = rng.gen_range(-4.0..4.0);
        let logvar: f64 = rng.gen_range(-1.0..0.5);
        let closed = kl_to_prior(&[mu], &[logvar]).unwrap();
        let sigma = (0.5 * logvar).exp();
        // log q(z) − log p(z), averaged over antithetic pairs ε, −ε.
        let log_ratio = |eps: f64| {
            let z = mu + sigma * eps;
            -0.5 * logvar - 0.5 * eps * eps + 0.5 * z * z
        };
        let mut sum = 0.0;
        for _ in 0..A2_SAMPLES / 2 {
            let eps: f64 = rng.sample(StandardNormal);
            sum += log_ratio(eps) + log_ratio(-eps);
        }
        let mc = sum / A2_SAMPLES as f64;
        worst = worst.max((mc - closed).abs());
    }
    let pass = worst < A2_TOL;
    report(
        "A2",
        pass,
        &format!("max |MC − closed form| {worst:.2e} (< {A2_TOL:e})"),
    );
    assert!(pass);
}

/// Direct sum `Σ_k (γλ)^k δ_{t+k}`, stopping after the first done.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { gamma * next_v(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..n {
                acc += w * delta[k];
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

#[test]
fn a3_gae_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=50);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let boot = rng.gen_range(-1.0..1.0);
        let gamma = rng.gen_range(0.9..1.0);
        let lambda = rng.gen_range(0.8..1.0);
        let (adv, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda).unwrap();
        let oracle = gae_oracle(&r, &v, &d, boot, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs());
            worst = worst.max((ret[t] - (oracle[t] + v[t])).abs());
        }
    }
    let pass = worst < A3_TOL;
    report("A3", pass, &format!("max |GAE − oracle| {worst:.2e} (< {A3_TOL:e})"));
    assert!(pass);
}

#[test]
fn a4_regret_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for i in 0..A4_PAIRS {
        let u: f64 = rng.gen_range(0.0..1.0);
        let w: f64 = rng.gen_range(0.0..1.0);
        if standard_regret(u, u) != 0.0 {
            failures.push(format!("pair {i}: regret(U, U) != 0"));
        }
        if standard_regret(u, w) != -standard_regret(w, u) {
            failures.push(format!("pair {i}: not antisymmetric"));
        }
        let a: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = if i % 10 == 0 {
            a.clone()
        } else {
            (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let f = flexible_regret(&a, &b).unwrap();
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        if f < 0.0 || ((f == 0.0) != (ma == mb)) {
            failures.push(format!("pair {i}: flexible regret {f} for means {ma}, {mb}"));
        }
        if f != flexible_regret(&b, &a).unwrap() {
            failures.push(format!("pair {i}: flexible regret not symmetric"));
        }
    }
    let pass = failures.is_empty();
    report(
        "A4",
        pass,
        &format!("{} violations over {A4_PAIRS} pairs", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

fn train_sorted_vae(seed: u64) -> (TaskVae, Vec<ued_core::task::TaskSpec>, Duration) {
    let space = TaskSpaceConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = corpus_tasks(CORPUS_N, &mut rng, &space, CorpusMode::Sorted, 1).unwrap();
    let (train, held) = split_heldout(&tasks);
    let start = Instant::now();
    let (vae, _) = train_vae(train, held, &VaeConfig::desk(), &space, &mut rng).unwrap();
    (vae, held.to_vec(), start.elapsed())
}

#[test]
#[ignore = "trains a desk VAE for 20k steps"]
fn a5_vae_desk_training() {
    let (vae, held, elapsed) = train_sorted_vae(0);
    let s: ReconStats = reconstruction_stats(&vae, &held).unwrap();
    let pass = s.token_acc >= A5_MIN_TOKEN_ACC && s.valid == 1.0 && elapsed < A5_BUDGET;
    report(
        "A5",
        pass,
        &format!(
            "held-out token accuracy {:.4} (>= {A5_MIN_TOKEN_ACC}), exact {:.4}, validity {:.4} (= 1), {:.0}s (< {}s)",
            s.token_acc,
            s.exact,
            s.valid,
            elapsed.as_secs_f64(),
            A5_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains three sorted and three shuffled VAEs"]
fn a6_sorted_beats_shuffled() {
    let space = TaskSpaceConfig::desk();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..A6_SEEDS {
        let (sorted, held, _) = train_sorted_vae(100 + seed);
        let sorted_acc = reconstruction_stats(&sorted, &held).unwrap().token_acc;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let corpus = corpus_tasks(CORPUS_N, &mut rng, &space, CorpusMode::Shuffled, 10).unwrap();
        let mut cfg = VaeConfig::desk();
        cfg.steps *= 5;
        let (shuffled, _) = train_vae(&corpus, &held, &cfg, &space, &mut rng).unwrap();
        let shuffled_acc = reconstruction_stats(&shuffled, &held).unwrap().token_acc;
        if shuffled_acc < sorted_acc {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: sorted {sorted_acc:.4} shuffled {shuffled_acc:.4}"
        ));
    }
    let pass = wins == A6_SEEDS;
    report(
        "A6",
        pass,
        &format!("sorted ahead on {wins}/{A6_SEEDS} seeds; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
#[ignore = "runs three 1M-step CLUTR curricula"]
fn a7_end_to_end_trainability() {
    let tmp = TempDir::new().unwrap();
    let space = TaskSpaceConfig::desk();
    let (vae, _, _) = train_sorted_vae(0);
    let vae_path = tmp.path().join("vae.ckpt");
    vae.save(&vae_path).unwrap();
    let suite = builtin_suite(&space).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random = random_baseline(&suite, A7_BASELINE_EPISODES, &mut rng).unwrap().mean();
    let threshold = (1.5 * random).max(random + 0.05);

    let mut rates = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..A7_SEEDS {
        let cfg = RunConfig {
            algo: Algo::Clutr,
            total_env_steps: A7_STEPS,
            seed,
            vae_checkpoint: Some(vae_path.clone()),
            ..Default::default()
        };
        let out = tmp.path().join(format!("run{seed}"));
        let start = Instant::now();
        run_curriculum(cfg, &out).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let (tree, _) = checkpoint::load(&RunDir::new(&out).checkpoints().join("agent.ckpt")).unwrap();
        let policy = StudentPolicy::bind(&tree).unwrap();
        let mut actor = StudentActor::new(&policy, &tree, EvalMode::Argmax);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        rates.push(evaluate(&mut actor, &suite, A7_EVAL_EPISODES, &mut rng).unwrap().mean());
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let pass = mean >= threshold && slowest < A7_BUDGET.as_secs_f64();
    report(
        "A7",
        pass,
        &format!(
            "mean solved rate {mean:.4} over seeds {rates:?} (>= {threshold:.4}; random {random:.4}), slowest seed {slowest:.0}s"
        ),
    );
    assert!(pass);
}

fn untrained_vae(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vae = TaskVae::new(VaeConfig::desk(), TaskSpaceConfig::desk(), &mut rng).unwrap();
    let path = dir.join("vae.ckpt");
    vae.save(&path).unwrap();
    path
}

fn same_values(a: &ParamTree, b: &ParamTree) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(x, y)| {
            x.name == y.name
                && x.value
                    .data()
                    .iter()
                    .zip(y.value.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn a8_frozen_manifold() {
    let tmp = TempDir::new().unwrap();
    let vae_path = untrained_vae(tmp.path());
    let before = fs::read(&vae_path).unwrap();
    let decoder = TaskVae::load(&vae_path).unwrap().decoder_params();
    let mut changed = Vec::new();
    let mut frozen_ok = true;
    for finetune in [false, true] {
        let mut cfg = RunConfig {
            algo: Algo::Clutr,
            total_env_steps: 4096,
            eval_every: 4096,
            eval_episodes: 2,
            seed: 3,
            finetune_vae: finetune,
            vae_checkpoint: Some(vae_path.clone()),
            record_wall_time: false,
            ..Default::default()
        };
        cfg.ppo.workers = 4;
        cfg.ppo.rollout_len = 64;
        let out = tmp.path().join(if finetune { "ft" } else { "frozen" });
        let s = run_curriculum(cfg, &out).unwrap();
        assert!(s.teacher_updates > 0);
        let (after, _) = checkpoint::load(&RunDir::new(&out).checkpoints().join("decoder.ckpt")).unwrap();
        if finetune {
            changed.push(!same_values(&decoder, &after));
        } else {
            frozen_ok = same_values(&decoder, &after);
        }
    }
    let file_ok = fs::read(&vae_path).unwrap() == before;
    let pass = frozen_ok && file_ok && changed == [true];
    report(
        "A8",
        pass,
        &format!("frozen run decoder identical: {frozen_ok}, VAE file untouched: {file_ok}, finetune run changed decoder: {}", changed[0]),
    );
    assert!(pass);
}

fn ued_lab(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ued-lab"))
        .args(args)
        .env_remove("UED_LAB_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ued-lab {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn a9_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"vae": {"steps": 200, "eval_every": 100}}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut outputs: Vec<[Vec<u8>; 3]> = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("r{run}"));
        fs::create_dir_all(&dir).unwrap();
        let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
        ued_lab(&["gen-corpus", "--n", "2000", "--out", &p("corpus.txt"), "--seed", "9"]);
        ued_lab(&[
            "--config",
            cfg,
            "train-vae",
            "--corpus",
            &p("corpus.txt"),
            "--out",
            &p("vae"),
            "--seed",
            "9",
        ]);
        ued_lab(&[
            "--workers",
            "1",
            "train",
            "--algo",
            "clutr",
            "--vae",
            &p("vae/vae.ckpt"),
            "--steps",
            "10000",
            "--out",
            &p("run"),
            "--seed",
            "9",
            "--no-wall-clock",
        ]);
        outputs.push([
            fs::read(p("corpus.txt")).unwrap(),
            fs::read(p("vae/metrics.csv")).unwrap(),
            fs::read(p("run/metrics.csv")).unwrap(),
        ]);
    }
    let same: Vec<bool> = (0..3).map(|i| outputs[0][i] == outputs[1][i]).collect();
    let pass = same.iter().all(|&s| s);
    report(
        "A9",
        pass,
        &format!(
            "byte-identical gen-corpus {}, train-vae {}, train {}",
            same[0], same[1], same[2]
        ),
    );
    assert!(pass);
}

#[test]
fn a10_teacher_bandit() {
    let space = TaskSpaceConfig::desk();
    let vcfg = VaeConfig::desk();
    // Full-profile PPO settings: 32 proposals per teacher update.
    let ppo = PpoConfig::full();
    let mut reached = Vec::new();
    for seed in 0..A10_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vae = TaskVae::new(vcfg.clone(), space, &mut rng).unwrap();
        let mut decoder = LatentDecoder::new(vae.decoder_params(), space.max_len(), None).unwrap();
        let mut params = ParamTree::new();
        let policy = ClutrTeacherPolicy::new(
            &mut params,
            &ClutrTeacherConfig::default(),
            vcfg.latent_dim,
            vcfg.mean_scale,
            &mut rng,
        )
        .unwrap();
        let p_positive = |params: &ParamTree| {
            let mut probe_rng = ChaCha8Rng::seed_from_u64(0xa10);
            let ds = policy.propose(params, A10_PROBE, &mut probe_rng).unwrap();
            ds.iter().filter(|d| d.z[0] > 0.0).count() as f64 / A10_PROBE as f64
        };
        let mut hit = None;
        for update in 1..=A10_UPDATES {
            let ds = policy.propose(&params, ppo.workers, &mut rng).unwrap();
            let regrets: Vec<f64> = ds.iter().map(|d| if d.z[0] > 0.0 { 1.0 } else { 0.0 }).collect();
            let refs: Vec<_> = ds.iter().collect();
            clutr_update(
                &policy,
                &mut params,
                &refs,
                None,
                &mut decoder,
                &regrets,
                &ppo,
                &mut rng,
            )
            .unwrap();
            if update % 10 == 0 && p_positive(&params) > A10_TARGET {
                hit = Some(update);
                break;
            }
        }
        reached.push(hit);
    }
    let ok = reached.iter().filter(|h| h.is_some()).count();
    let pass = ok as u64 == A10_SEEDS;
    report(
        "A10",
        pass,
        &format!(
            "P(z0 > 0) > {A10_TARGET} within {A10_UPDATES} updates on {ok}/{A10_SEEDS} seeds; first update {reached:?}"
        ),
    );
    assert!(pass);
}
