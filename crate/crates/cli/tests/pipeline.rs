use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write as _;

const TINY: &str = r#"seed = 5

[synth]
size = 240

[model]
d_y = 4
d_z = 4
embed_dim = 8
hidden_dim = 16
align_hidden_dim = 8
max_decode_len = 12

[train]
epochs = 3
stage1_epochs = 1
batch_size = 16
points_per_epoch = 48
probe_size = 6
monitor_pairs = 16

[train.schedule]
midpoint = 2.0
steepness = 0.5

[eval]
limit = 12

[ablation]
limit = 6
"#;

fn quase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quase"))
        .current_dir(dir)
        .env_remove("QUASE_RESULTS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = quase(dir, args);
    assert!(
        out.status.success(),
        "quase {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().expect("one error line");
    let mut fields = line.split('\t');
    assert_eq!(fields.next(), Some("error"), "{line}");
    let code = fields.next().unwrap().to_string();
    assert!(fields.next().is_some_and(|m| !m.is_empty()));
    code
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

const STAGES: [&str; 6] = ["synth", "prepare", "mine", "train", "eval", "ablate"];

fn run_all(dir: &Path) {
    for stage in STAGES {
        ok(dir, &["--config", "run.toml", stage]);
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_runs_end_to_end_and_reruns_byte_identically() {
    let dir = setup();
    run_all(dir.path());
    let first = snapshot(dir.path());
    for name in ["raw.txt", "lexicon.tsv", "train.tsv", "valid.tsv", "test.tsv", "pairs.tsv", "train_log.tsv", "checkpoint.json"] {
        assert!(first.contains_key(&Path::new("work").join(name)), "missing {name}");
    }
    let results: Vec<&PathBuf> = first.keys().filter(|p| p.starts_with("results")).collect();
    assert_eq!(results.len(), 4, "{results:?}");

    for (path, bytes) in &first {
        let text = String::from_utf8_lossy(bytes);
        if path.extension().is_some_and(|e| e == "tsv") || path.ends_with("raw.txt") || path.ends_with("eval.txt") {
            assert!(text.contains("config_hash=") && text.contains("seed=5"), "{} lacks a stamp", path.display());
        }
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
            let stamp = v.get("meta").unwrap_or(&v);
            assert!(stamp.get("config_hash").is_some(), "{} lacks a hash", path.display());
            assert_eq!(stamp["seed"].to_string().trim_matches('"'), "5");
        }
    }

    for stage in STAGES {
        ok(dir.path(), &["--config", "run.toml", stage]);
        assert_eq!(snapshot(dir.path()), first, "{stage} rerun changed the artifacts");
    }

    let other = setup();
    run_all(other.path());
    assert_eq!(snapshot(other.path()), first, "a fresh directory reproduces every artifact");
}

#[test]
fn edit_reads_stdin_and_keeps_blank_lines() {
    let dir = setup();
    for stage in ["synth", "prepare", "mine", "train"] {
        ok(dir.path(), &["--config", "run.toml", stage]);
    }
    let mut child = Command::new(env!("CARGO_BIN_EXE_quase"))
        .current_dir(dir.path())
        .args(["edit", "--checkpoint", "work/checkpoint.json", "--target", "4.5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"the food is ok .\n\nthe service was awful .\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    for l in [lines[0], lines[2]] {
        let (sentence, outcome) = l.split_once('\t').expect("sentence and outcome");
        assert!(!sentence.is_empty());
        let r: f64 = outcome.parse().unwrap();
        assert!(r.is_finite());
    }

    let max = quase(dir.path(), &["edit", "--checkpoint", "work/checkpoint.json", "--max", "--log-tau", "-50"]);
    assert!(max.status.success());
    let clash = quase(dir.path(), &["edit", "--target", "3", "--max"]);
    assert!(!clash.status.success());
}

#[test]
fn stage_errors_are_single_machine_readable_lines() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(error_code(&quase(d, &["--config", "run.toml", "prepare"])), "missing-input");
    assert_eq!(error_code(&quase(d, &["--config", "absent.toml", "synth"])), "missing-input");
    assert_eq!(error_code(&quase(d, &["synth"])), "config");

    std::fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(error_code(&quase(d, &["--config", "bad.toml", "synth"])), "config-schema");
    std::fs::write(d.join("broken.toml"), "[train\n").unwrap();
    assert_eq!(error_code(&quase(d, &["--config", "broken.toml", "synth"])), "config-schema");
    assert_eq!(
        error_code(&quase(d, &["--config", "run.toml", "--set", "train.batch_size=\"x\"", "synth"])),
        "config-schema"
    );

    ok(d, &["--config", "run.toml", "synth"]);
    ok(d, &["--config", "run.toml", "prepare"]);
    let changed = quase(d, &["--config", "run.toml", "--set", "prepare.test_fraction=0.2", "mine"]);
    assert_eq!(error_code(&changed), "upstream-mismatch");
    let reseeded = quase(d, &["--config", "run.toml", "--seed", "6", "mine"]);
    assert_eq!(error_code(&reseeded), "upstream-mismatch");
}

#[test]
fn edit_rejects_checkpoints_from_another_format_version() {
    let dir = setup();
    let d = dir.path();
    for stage in ["synth", "prepare", "mine", "train"] {
        ok(d, &["--config", "run.toml", stage]);
    }
    let text = std::fs::read_to_string(d.join("work/checkpoint.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = 99.into();
    std::fs::write(d.join("future.json"), v.to_string()).unwrap();
    let out = quase(d, &["edit", "--checkpoint", "future.json", "--target", "3"]);
    assert_eq!(error_code(&out), "checkpoint-version");
    assert_eq!(error_code(&quase(d, &["--config", "run.toml", "--set", "train.epochs=4", "eval"])), "upstream-mismatch");
}

#[test]
fn results_root_follows_the_environment() {
    let dir = setup();
    let d = dir.path();
    for stage in ["synth", "prepare", "mine", "train"] {
        ok(d, &["--config", "run.toml", stage]);
    }
    let elsewhere = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_quase"))
        .current_dir(d)
        .env("QUASE_RESULTS", elsewhere.path())
        .args(["--config", "run.toml", "eval"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let written = snapshot(elsewhere.path());
    assert!(written.keys().any(|p| p.ends_with("eval.json")));
    assert!(!d.join("results").exists());
}
