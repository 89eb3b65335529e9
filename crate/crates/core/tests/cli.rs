use std::fs;
use std::path::Path;
use std::process::Command;

fn qcml(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qcml"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const CONFIG: &str = r#"
seed = 3
output_dir = "runs"

[dataset]
kind = "synthetic"
regime = "investment-grade"
n = 60
seed = 1

[qcml]
hilbert_dim = 2
epochs = 5

[forest]
n_trees = 10

[evaluation]
n_splits = 2
ks = [1, 2, 3]
figures = false
"#;

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qcml(&["train"], dir.path()).0, 2);
    assert_eq!(qcml(&["train", "--preset", "nope"], dir.path()).0, 2);
    fs::write(dir.path().join("bad.toml"), "output_dir = \"x\"\n[dataset]\nkind = \"builtin\"\nname = \"diabetes\"\n").unwrap();
    let (code, _, err) = qcml(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = qcml(&["mds", "absent.qprx", "--seed", "0"], dir.path());
    assert_eq!(code, 3);
}

#[test]
fn train_proximity_evaluate_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    let run = |cmd: &[&str]| {
        let (code, out, err) = qcml(cmd, dir.path());
        assert_eq!(code, 0, "{cmd:?}: {err}");
        dir.path().join(out.trim())
    };

    let train_dir = run(&["train", "--config", "c.toml"]);
    let models = train_dir.to_str().unwrap().to_string();
    let prox_dir = run(&["proximity", "--config", "c.toml", "--models", &models]);
    let eval_dir = run(&["evaluate", "--config", "c.toml"]);
    let first: Vec<Vec<u8>> = [&train_dir, &prox_dir, &eval_dir]
        .iter()
        .map(|d| fs::read(d.join("manifest.json")).unwrap())
        .collect();
    assert!(prox_dir.join("rf-gap-test-train.qprx").exists());
    assert!(eval_dir.join("knn_curves.csv").exists());

    for d in [&train_dir, &prox_dir, &eval_dir] {
        fs::remove_dir_all(d).unwrap();
    }
    run(&["train", "--config", "c.toml"]);
    run(&["proximity", "--config", "c.toml", "--models", &models]);
    run(&["evaluate", "--config", "c.toml"]);
    let second: Vec<Vec<u8>> = [&train_dir, &prox_dir, &eval_dir]
        .iter()
        .map(|d| fs::read(d.join("manifest.json")).unwrap())
        .collect();
    // manifests carry the sha256 of every artifact
    assert_eq!(first, second);
}

#[test]
fn synth_writes_csv_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = qcml(&["synth", "--regime", "hy", "--n", "60", "--seed", "2", "--out", "s"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 2);
    let csv = fs::read_to_string(dir.path().join(out.lines().next().unwrap())).unwrap();
    assert_eq!(csv.lines().count(), 61);
}
