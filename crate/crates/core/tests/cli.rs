use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MANIFEST: &str = r#"
schema = "partlab-corpus/1"
[asr]
train = 24
dev = 4
test = 4
[s2tt]
train = 12
dev = 4
test = 4
"#;

const EXPERIMENT: &str = r#"
schema = "partlab-experiment/1"
corpus = "corpus"
[budget]
stage1 = 4
stage2 = 4
stage3 = 4
batch_size = 2
[foundation]
steps = 4
encoder_steps = 4
"#;

fn partlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.toml"), MANIFEST).unwrap();
    fs::write(dir.path().join("exp.toml"), EXPERIMENT).unwrap();
    ok(&partlab(dir.path(), &["gen-corpus", "--config", "corpus.toml", "--out", "corpus"]));
    dir
}

#[test]
fn completed_output_needs_force() {
    let d = setup();
    let again = partlab(d.path(), &["gen-corpus", "--config", "corpus.toml", "--out", "corpus"]);
    assert_eq!(again.status.code(), Some(4));
    ok(&partlab(d.path(), &["gen-corpus", "--config", "corpus.toml", "--out", "corpus", "--force"]));
}

#[test]
fn train_then_eval_writes_artifacts() {
    let d = setup();
    ok(&partlab(d.path(), &["train", "--config", "exp.toml", "--out", "run", "--seed", "3"]));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "final.ckpt", "loss.csv", "audit.csv", "draws.csv", "recipe.toml", "provenance.json"] {
        assert!(d.path().join("run").join(f).exists(), "missing {f}");
    }
    let loss = fs::read_to_string(d.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 12);
    let prov = fs::read_to_string(d.path().join("run/provenance.json")).unwrap();
    assert!(prov.contains("\"seed\": 3"));
    ok(&partlab(d.path(), &["eval", "--config", "exp.toml", "--checkpoint", "run/final.ckpt", "--split", "dev", "--out", "ev"]));
    let scores = fs::read_to_string(d.path().join("ev/scores_dev.csv")).unwrap();
    assert!(scores.starts_with("split,task,lang_or_direction,metric_name,value,count"));
}

#[test]
fn corrupt_checkpoint_exits_with_its_own_code() {
    let d = setup();
    fs::write(d.path().join("bad.ckpt"), b"PARTCKPT not really").unwrap();
    let o = partlab(d.path(), &["eval", "--config", "exp.toml", "--checkpoint", "bad.ckpt", "--out", "ev"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt checkpoint"));
}

#[test]
fn bad_configs_exit_with_code_two() {
    let d = setup();
    fs::write(d.path().join("typo.toml"), EXPERIMENT.replace("stage1", "stagee1")).unwrap();
    let o = partlab(d.path(), &["train", "--config", "typo.toml", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    let o = partlab(d.path(), &["train", "--config", "exp.toml", "--recipe", "nope", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    let o = partlab(d.path(), &["compare", "--config", "exp.toml", "--seeds", "0", "--out", "cmp"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(partlab(d.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn recipe_file_is_accepted() {
    let d = setup();
    ok(&partlab(d.path(), &["train", "--config", "exp.toml", "--recipe", "two_stage", "--out", "a"]));
    fs::copy(d.path().join("a/recipe.toml"), d.path().join("mine.toml")).unwrap();
    ok(&partlab(d.path(), &["train", "--config", "exp.toml", "--recipe", "mine.toml", "--out", "b"]));
    let a = fs::read_to_string(d.path().join("a/loss.csv")).unwrap();
    let b = fs::read_to_string(d.path().join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compare_is_deterministic() {
    let d = setup();
    let args = |out: &'static str| ["compare", "--config", "exp.toml", "--recipe", "part,two_stage", "--seeds", "2", "--out", out];
    ok(&partlab(d.path(), &args("c1")));
    ok(&partlab(d.path(), &args("c2")));
    for f in ["comparison.csv", "runs.csv", "comparison.txt"] {
        let a = fs::read(d.path().join("c1").join(f)).unwrap();
        let b = fs::read(d.path().join("c2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let csv = fs::read_to_string(d.path().join("c1/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(d.path().join("c1/part/seed1/final.ckpt").exists());
}

#[test]
fn grad_check_command_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = partlab(d.path(), &["grad-check", "--out", "gc"]);
    ok(&o);
    let csv = fs::read_to_string(d.path().join("gc/gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.contains("model.loss"));
}
