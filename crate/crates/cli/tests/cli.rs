use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flashvtg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashvtg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("FLASHVTG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flashvtg(args);
    assert!(
        out.status.success(),
        "flashvtg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"
[synth]
n_videos = 12
n_val = 6
min_clips = 10
max_clips = 16
d_video = 8
d_query = 8
seed = 3

[train]
d_model = 16
heads = 2
n_dummies = 2
encoder_layers = 1
max_steps = 6
batch_size = 4
gate_coords = 1
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let data = root.join("data");
    ok(&["synth", "--config", p(&config), "--out", p(&data)]);
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train_into(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let mut args = vec![
        "train",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

/// Run log lines with the wall-clock fields removed.
fn runlog_without_clock(path: &Path) -> Vec<serde_json::Value> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_secs");
            v
        })
        .collect()
}

#[test]
fn synth_is_idempotent_and_records_the_seed() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["synth", "--config", p(&f.config), "--out", p(&again)]);
    let manifest = read(&f.data.join("manifest.json"));
    assert_eq!(manifest, read(&again.join("manifest.json")));
    let m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(
        read(&f.data.join("train.jsonl")),
        read(&again.join("train.jsonl"))
    );

    let other = f.root.join("other");
    ok(&[
        "synth",
        "--config",
        p(&f.config),
        "--out",
        p(&other),
        "--seed",
        "4",
    ]);
    assert_ne!(manifest, read(&other.join("manifest.json")));
}

#[test]
fn synth_into_an_unwritable_path_fails() {
    let f = fixture();
    let blocker = f.root.join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = flashvtg(&[
        "synth",
        "--config",
        p(&f.config),
        "--out",
        p(&blocker.join("sub")),
    ]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nlearnig_rate = 0.1\n").unwrap();
    let out = flashvtg(&[
        "train",
        "--config",
        p(&bad),
        "--data",
        p(&f.data),
        "--out",
        p(&f.root.join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));
}

#[test]
fn train_eval_predict_roundtrip_is_deterministic() {
    let f = fixture();
    let a = train_into(&f, "a", &[]);
    let b = train_into(&f, "b", &[]);
    for name in ["last.fvck", "best.fvck"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
    assert_eq!(
        runlog_without_clock(&a.join("runlog.jsonl")),
        runlog_without_clock(&b.join("runlog.jsonl"))
    );

    let ckpt = a.join("best.fvck");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--data", p(&f.data)];
        args.extend_from_slice(extra);
        ok(&args).stdout
    };
    let from_ckpt = eval(&["--checkpoint", p(&ckpt)]);
    assert_eq!(from_ckpt, eval(&["--checkpoint", p(&ckpt)]));
    let report: serde_json::Value = serde_json::from_slice(&from_ckpt).unwrap();
    let keys: Vec<&str> = report
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    for k in [
        "r1_at_0_3",
        "r1_at_0_5",
        "r1_at_0_7",
        "map_at_0_5",
        "map_at_0_75",
        "map_avg",
        "miou",
        "short_map",
        "middle_map",
        "long_map",
        "hd_map",
        "hit_at_1",
        "queries",
        "hd_queries",
        "hd_excluded",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(keys.len(), 15);

    let preds = f.root.join("preds.jsonl");
    let preds2 = f.root.join("preds2.jsonl");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.data),
        "--out",
        p(&preds),
    ]);
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.data),
        "--out",
        p(&preds2),
    ]);
    assert_eq!(read(&preds), read(&preds2));

    // Scoring the written predictions needs no weights and agrees.
    let from_file = eval(&["--pred-file", p(&preds)]);
    assert_eq!(from_file, from_ckpt);
}

#[test]
fn predict_respects_top_n() {
    let f = fixture();
    let run = train_into(&f, "run", &[]);
    let preds = f.root.join("top2.jsonl");
    ok(&[
        "predict",
        "--checkpoint",
        p(&run.join("last.fvck")),
        "--data",
        p(&f.data),
        "--out",
        p(&preds),
        "--top-n",
        "2",
    ]);
    let text = String::from_utf8(read(&preds)).unwrap();
    assert_eq!(text.lines().count(), 6);
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["moments"].as_array().unwrap().len() <= 2);
    }
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let run = train_into(&f, "run", &["--max-steps", "2", "--no-tfl"]);
    let text = String::from_utf8(read(&run.join("runlog.jsonl"))).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps.iter().max(), Some(&2));
    // A single-level checkpoint has no downsampling kernels.
    let ckpt = read(&run.join("last.fvck"));
    let needle = b"pyramid.down";
    assert!(!ckpt.windows(needle.len()).any(|w| w == needle));
}

#[test]
fn resume_continues_from_saved_optimizer_state() {
    let f = fixture();
    let first = train_into(&f, "first", &["--max-steps", "3"]);
    let resume = first.join("last.fvck");
    let r1 = train_into(&f, "r1", &["--resume", p(&resume)]);
    let r2 = train_into(&f, "r2", &["--resume", p(&resume)]);
    assert_eq!(read(&r1.join("last.fvck")), read(&r2.join("last.fvck")));
    // Resuming at the final step re-saves the identical state.
    let same = train_into(&f, "same", &["--max-steps", "3", "--resume", p(&resume)]);
    assert_eq!(read(&same.join("last.fvck")), read(&resume));
}

#[test]
fn divergence_exits_nonzero_and_keeps_a_partial_checkpoint() {
    let f = fixture();
    let out = f.root.join("boom");
    let status = flashvtg(&[
        "train",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--out",
        p(&out),
        "--lr",
        "1e12",
        "--max-steps",
        "40",
        "--gate-coords",
        "0",
    ]);
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("diverged"));
    assert!(out.join("partial.fvck").exists());
    assert!(!out.join("last.fvck").exists());
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let f = fixture();
    let csv = f.root.join("ablation.csv");
    let args = [
        "ablate",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--out",
        p(&csv),
        "--seeds",
        "0,1",
        "--max-steps",
        "2",
        "--gate-coords",
        "0",
    ];
    ok(&args);
    let text = String::from_utf8(read(&csv)).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("variant,seed,"));
    let first = read(&csv);
    ok(&args);
    assert_eq!(first, read(&csv));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let out = ok(&["gradcheck", "--coords", "4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS"));
    assert!(text.contains("max relative error"));
    assert!(text.contains("fusion.aca.p_q"));

    let bad = flashvtg(&["gradcheck", "--coords", "4", "--inject-broken-backward"]);
    assert!(!bad.status.success());
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(text.contains("FAIL"));
}

#[test]
fn eval_rejects_both_or_neither_source() {
    let f = fixture();
    assert!(!flashvtg(&["eval", "--data", p(&f.data)]).status.success());
    let x = f.root.join("x");
    assert!(!flashvtg(&[
        "eval",
        "--data",
        p(&f.data),
        "--checkpoint",
        p(&x),
        "--pred-file",
        p(&x)
    ])
    .status
    .success());
}

#[test]
fn bad_thread_count_is_an_error() {
    let f = fixture();
    let out = Command::new(env!("CARGO_BIN_EXE_flashvtg"))
        .args([
            "eval",
            "--data",
            p(&f.data),
            "--pred-file",
            p(&f.root.join("none")),
        ])
        .env("FLASHVTG_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
