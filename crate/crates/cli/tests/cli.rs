use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use shadowpeft::checkpoint::{load, save};
use shadowpeft::metrics::read_metrics;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shadowpeft"));
    c.env_remove("SHADOWPEFT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    serde_json::from_str(text.lines().last().expect("one line")).expect("json")
}

/// `(enumerated, formula)` for one row of the `params` table.
fn row(o: &Output, group: &str) -> (usize, usize) {
    let text = stdout(o);
    let line = text
        .lines()
        .find(|l| l.split_whitespace().next() == Some(group))
        .expect("row present");
    let f: Vec<usize> = line
        .split_whitespace()
        .skip(1)
        .take(2)
        .map(|t| t.parse().unwrap())
        .collect();
    (f[0], f[1])
}

const QUICK: &[&str] = &[
    "--set",
    "train.pretrain_steps=20",
    "--set",
    "train.steps=20",
    "--set",
    "train.eval_interval=10",
];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

/// A copy-task run with the default protocol, shared by the tests below.
fn trained() -> &'static Path {
    static RUN: OnceLock<TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let o = train_into(
            dir.path(),
            &["--set", "train.steps=200", "--set", "train.eval_interval=100"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    })
    .path()
}

#[test]
fn train_writes_checkpoint_config_and_metrics() {
    let dir = TempDir::new().unwrap();
    let o = train_into(dir.path(), QUICK);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.bin", "config.toml", "metrics.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let records = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20]);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn train_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(train_into(a.path(), QUICK).status.success());
    assert!(train_into(b.path(), QUICK).status.success());
    for f in ["checkpoint.bin", "config.toml", "metrics.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_flag_beats_environment() {
    let seed_of = |env: Option<&str>, flag: Option<&str>| {
        let dir = TempDir::new().unwrap();
        let mut c = bin();
        c.args(["train", "--out", dir.path().to_str().unwrap()]).args(QUICK);
        if let Some(e) = env {
            c.env("SHADOWPEFT_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
        text.lines().find(|l| l.starts_with("seed")).unwrap().to_string()
    };
    assert_eq!(seed_of(None, None), "seed = 0");
    assert_eq!(seed_of(Some("5"), None), "seed = 5");
    assert_eq!(seed_of(Some("5"), Some("7")), "seed = 7");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let o = train_into(dir.path(), &["--set", "injection.alpha=0", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("injection.alpha"), "{err}");
    assert!(err.contains("train.lr"), "{err}");
    let o = train_into(dir.path(), &["--set", "base.hiden=8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden"));
}

#[test]
fn config_file_is_read_and_overridden() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[injection]\nrank = 2\n").unwrap();
    let o = run(&["params", "--config", path.to_str().unwrap()]);
    assert_eq!(row(&o, "injection"), (384, 384));
    let o = run(&[
        "params",
        "--config",
        path.to_str().unwrap(),
        "--set",
        "injection.rank=4",
    ]);
    assert_eq!(row(&o, "injection"), (768, 768));
}

#[test]
fn eval_reproduces_the_final_training_accuracy() {
    let dir = trained();
    let last = read_metrics(&dir.join("metrics.jsonl"))
        .unwrap()
        .last()
        .copied()
        .unwrap();
    let o = run(&["eval", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["accuracy"].as_f64().unwrap(), last.eval_acc);
    assert_eq!(v["task"], "copy_lm");
}

#[test]
fn detached_eval_ignores_tampered_base_layers() {
    let dir = trained();
    let tampered = TempDir::new().unwrap();
    std::fs::copy(dir.join("config.toml"), tampered.path().join("config.toml")).unwrap();
    let mut store = load(&dir.join("checkpoint.bin")).unwrap();
    let mut zeroed = 0;
    for p in store.iter_mut().filter(|p| p.name.starts_with("base.L")) {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        zeroed += 1;
    }
    assert!(zeroed > 0);
    save(&tampered.path().join("checkpoint.bin"), &store).unwrap();
    let eval = |d: &Path| json(&run(&["eval", d.to_str().unwrap(), "--inference-mode", "detached"]));
    let (a, b) = (eval(dir), eval(tampered.path()));
    assert_eq!(a["accuracy"], b["accuracy"]);
    assert_eq!(b["base_layer_calls"], 0);
}

#[test]
fn lora_has_no_detached_eval() {
    let o = run(&[
        "eval",
        trained().to_str().unwrap(),
        "--method",
        "lora",
        "--inference-mode",
        "detached",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_copies_the_prompt() {
    let dir = trained().to_str().unwrap();
    let prompt = "3,1,4,1,5,9,2,6,5,3,5,8,9,7,9,3";
    let o = run(&["generate", dir, "--prompt", prompt, "--max-new", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out: Vec<usize> = stdout(&o).trim().split(',').map(|t| t.parse().unwrap()).collect();
    let want: Vec<usize> = prompt.split(',').map(|t| t.parse().unwrap()).collect();
    assert_eq!(&out[..16], &want[..]);
    let hits = out[16..].iter().zip(&want).filter(|(a, b)| a == b).count();
    assert!(hits as f64 / 16.0 >= 0.9, "{out:?}");
    assert_eq!(
        stdout(&o),
        stdout(&run(&["generate", dir, "--prompt", prompt, "--max-new", "16"]))
    );
}

#[test]
fn generate_echoes_with_zero_budget_and_rejects_overflow() {
    let dir = trained().to_str().unwrap();
    let o = run(&["generate", dir, "--prompt", "1,2,3", "--max-new", "0"]);
    assert_eq!(stdout(&o).trim(), "1,2,3");
    let o = run(&["generate", dir, "--prompt", "1,2,3", "--max-new", "31"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    for extra in [
        &[][..],
        &["--set", "update.enabled=false"],
        &["--method", "lora", "--set", "lora.dropout=0"],
    ] {
        let mut args = vec!["gradcheck"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{extra:?}: {}", stdout(&o));
        assert!(json(&o)["max_rel_err"].as_f64().unwrap() < 1e-4);
    }
    let o = run(&["gradcheck", "--corrupt", "inject.L1.up"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)["worst_tensor"], "inject.L1.up");
    assert!(stderr(&o).contains("inject.L1.up"));
    assert_eq!(run(&["gradcheck", "--f32"]).status.code(), Some(2));
}

#[test]
fn params_match_closed_forms() {
    let o = run(&["params"]);
    assert!(o.status.success());
    assert_eq!(row(&o, "injection"), (768, 768));
    let o = run(&["params", "--set", "update.enabled=false"]);
    assert_eq!(row(&o, "update"), (0, 0));
    let lora = run(&["params", "--method", "lora"]);
    let (s, l) = (row(&run(&["params"]), "total").0 as f64, row(&lora, "total").0 as f64);
    assert!((s - l).abs() / s <= 0.10, "{s} vs {l}");
}

fn head_run(extra: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut args = vec![
        "--set",
        "base.vocab_size=64",
        "--set",
        "train.pretrain_steps=0",
        "--set",
        "train.steps=0",
    ];
    args.extend_from_slice(extra);
    assert!(train_into(dir.path(), &args).status.success());
    dir
}

#[test]
fn pinv_init_recovers_identity_and_rejects_vocab_mismatch() {
    let wide = head_run(&[]);
    let narrow = head_run(&["--set", "base.hidden=16", "--set", "base.heads=2", "--seed", "3"]);
    let out = TempDir::new().unwrap();
    let pinv = |a: &Path, b: &Path| {
        run(&[
            "pinv-init",
            "--base",
            a.to_str().unwrap(),
            "--shadow",
            b.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ])
    };
    let o = pinv(wide.path(), wide.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json(&o)["residual"].as_f64().unwrap() < 1e-8);
    let store = load(&out.path().join("projection.bin")).unwrap();
    let p = store.by_name("shadow.proj").unwrap();
    assert_eq!(p.shape(), &[32, 32]);
    for i in 0..32 {
        for j in 0..32 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((p.data()[i * 32 + j] - want).abs() < 1e-8);
        }
    }
    let o = pinv(wide.path(), narrow.path());
    assert!(o.status.success());
    assert_eq!(json(&o)["shape"], serde_json::json!([32, 16]));
    let small = head_run(&["--set", "base.vocab_size=48"]);
    assert_eq!(pinv(wide.path(), small.path()).status.code(), Some(2));
}
