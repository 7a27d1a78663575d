use std::path::Path;
use std::process::{Command, Output};

fn scenetune(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenetune"))
        .args(args)
        .current_dir(dir)
        .env("SCENETUNE_LOG", "warn")
        .output()
        .unwrap()
}

const CONFIG: &str = r#"
seed = 3
[dataset.quotas]
vqa = 20
grounding = 10
multiple_choice = 6
conversation = 4
[model.perceiver]
d_feat = 16
d_hidden = 16
d_model = 16
[model.lm]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq = 192
[model.lora]
r = 2
alpha = 4.0
[train]
steps = 4
micro_batch = 2
checkpoint_every = 2
[prompt]
max_new_tokens = 8
"#;

fn setup(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let out = scenetune(&["fixtures", "--config", "run.toml", "--count", &n.to_string(), "--points", "24"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn summaries(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summaries/summaries.json")).unwrap()).unwrap()
}

#[test]
fn ingest_ten_scenes() {
    let dir = setup(10);
    let out = scenetune(&["ingest", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let first = std::fs::read(dir.path().join("summaries/summaries.json")).unwrap();
    assert_eq!(summaries(dir.path())["summaries"].as_array().unwrap().len(), 10);
    assert!(!dir.path().join("summaries/INCOMPLETE").exists());

    let again = scenetune(&["ingest", "--config", "run.toml"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("summaries/summaries.json")).unwrap(), first);
}

#[test]
fn corrupt_scene_is_reported() {
    let dir = setup(10);
    std::fs::write(dir.path().join("scenes/scene0004.ply"), "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n1 2\n").unwrap();
    let out = scenetune(&["ingest", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let s = summaries(dir.path());
    assert_eq!(s["summaries"].as_array().unwrap().len(), 9);
    let errors = s["errors"].as_array().unwrap();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0]["file"], "scene0004.ply");
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene0004.ply"));
}

#[test]
fn validation_errors_exit_one() {
    let dir = setup(2);
    std::fs::write(dir.path().join("bad.toml"), "[model.lm]\nn_heads = 3\nd_model = 16\n").unwrap();
    let out = scenetune(&["build-dataset", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("dataset").exists(), "no side effects before validation");

    std::fs::write(dir.path().join("typo.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = scenetune(&["train", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo.toml"));

    let out = scenetune(&["evaluate", "--config", "run.toml", "--checkpoint", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = scenetune(&["ingest", "--scenes", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = scenetune(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline() {
    let dir = setup(5);
    let d = dir.path();
    for cmd in ["ingest", "build-dataset", "train"] {
        let out = scenetune(&[cmd, "--config", "run.toml"], d);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        if cmd == "build-dataset" {
            let table = String::from_utf8_lossy(&out.stdout);
            assert!(table.contains("grounding") && table.contains("36665"), "{table}");
        }
    }
    let ck = d.join("checkpoints");
    for f in ["adapter.json", "merged.json", "step-000002.json", "step-000004.json", "vocab.json"] {
        assert!(ck.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(ck.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("step,loss\n1,"));

    let out = scenetune(&["evaluate", "--config", "run.toml", "--out", "eval_a"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = scenetune(
        &["evaluate", "--config", "run.toml", "--checkpoint", "checkpoints/adapter.json", "--split", "train", "--out", "eval_b"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["predictions.jsonl", "report.json", "report.txt"] {
        assert!(d.join("eval_a").join(f).is_file());
    }
    let out = scenetune(&["report", "eval_a", "eval_b/report.json", "--out", "combined.txt"], d);
    assert!(out.status.success());
    let table = std::fs::read_to_string(d.join("combined.txt")).unwrap();
    assert!(table.contains("eval_a / ") && table.contains("eval_b / "), "{table}");
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = setup(4);
    let d = dir.path();
    let build = |seed: &str, out: &str| {
        let o = scenetune(&["build-dataset", "--config", "run.toml", "--seed", seed, "--out", out], d);
        assert!(o.status.success());
        std::fs::read(d.join(out).join("vqa.jsonl")).unwrap()
    };
    assert_eq!(build("1", "a"), build("1", "b"));
    assert_ne!(build("1", "c"), build("2", "e"));
}
