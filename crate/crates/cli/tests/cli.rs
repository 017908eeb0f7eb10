use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lab(args: &[&str]) -> Output {
    lab_env(args, None)
}

fn lab_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ued-lab"));
    cmd.args(args).env_remove("UED_LAB_SEED");
    if let Some(s) = seed {
        cmd.env("UED_LAB_SEED", s);
    }
    cmd.output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = lab(&["gen-corpus", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = lab(&["train", "--out", "x", "--algo", "ppo"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_corpus_counts_and_copies() {
    let tmp = TempDir::new().unwrap();
    let sorted = tmp.path().join("s.txt");
    let o = lab(&[
        "gen-corpus",
        "--n",
        "10",
        "--mode",
        "sorted",
        "--out",
        p(&sorted),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "10");

    let shuffled = tmp.path().join("sh.txt");
    let o = lab(&[
        "gen-corpus",
        "--n",
        "100",
        "--mode",
        "shuffled",
        "--shuffle-copies",
        "10",
        "--out",
        p(&shuffled),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "1000");
}

#[test]
fn env_seed_is_a_fallback() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a.txt");
    let b = tmp.path().join("b.txt");
    let c = tmp.path().join("c.txt");
    assert!(lab_env(&["gen-corpus", "--n", "20", "--out", p(&a)], Some("42"))
        .status
        .success());
    assert!(
        lab_env(&["gen-corpus", "--n", "20", "--out", p(&b), "--seed", "42"], None)
            .status
            .success()
    );
    assert!(
        lab_env(&["gen-corpus", "--n", "20", "--out", p(&c), "--seed", "43"], Some("42"))
            .status
            .success()
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let o = lab_env(&["gen-corpus", "--n", "20", "--out", p(&a)], Some("nope"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"ppo": {"wokers": 2}}"#).unwrap();
    let out = tmp.path().join("c.txt");
    let o = lab(&["--config", p(&cfg), "gen-corpus", "--n", "5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_corpus_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&[
        "train-vae",
        "--corpus",
        p(&tmp.path().join("none.txt")),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn finetune_requires_clutr() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&[
        "train",
        "--algo",
        "dr",
        "--finetune-vae",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dr_ignores_vae_with_a_warning() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("r");
    let o = lab(&[
        "--workers",
        "1",
        "train",
        "--algo",
        "dr",
        "--vae",
        "missing.ckpt",
        "--steps",
        "0",
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,"));
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert!(echo["vae_checkpoint"].is_null());
    assert_eq!(echo["total_env_steps"], 0);
}

#[test]
fn eval_oracle_solves_everything() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eval.csv");
    let o = lab(&["eval", "--oracle", "--episodes", "3", "--seed", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "task,episodes,solved,solved_rate");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows[..5] {
        assert_eq!(r[1], "3");
        assert_eq!(r[2], "3");
        assert_eq!(r[3].parse::<f64>().unwrap(), 1.0);
    }
    assert_eq!(rows[5][0], "mean");
}

#[test]
fn eval_on_a_dr_run_uses_the_denominator() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("r");
    let o = lab(&[
        "--workers",
        "1",
        "train",
        "--algo",
        "dr",
        "--steps",
        "0",
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("eval.csv");
    let o = lab(&["eval", "--checkpoint", p(&run), "--episodes", "4", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    for l in csv.lines().skip(1).take(5) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[1], "4");
        let solved: usize = f[2].parse().unwrap();
        assert!(solved <= 4);
    }
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&[
        "eval",
        "--checkpoint",
        p(&tmp.path().join("nowhere")),
        "--out",
        p(&tmp.path().join("e.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = lab(&["eval", "--out", p(&tmp.path().join("e.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}
