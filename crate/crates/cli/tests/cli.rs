use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "seed = 17
data.source = synthetic
data.classes = 3
data.samples = 240
data.validation = 48
data.shape = 1x8x8
model.architecture = conv(4,3,1,1) relu maxpool(2,2) conv(6,3,1,1) relu maxpool(2,2) fc(3)
train.epochs = 2
train.batch_size = 16
prune.ratio = 0.5
prune.interval = 3
prune.learning_rate = 0.005
prune.batch_size = 16
retrain.epochs = 1
retrain.batch_size = 16
bench.warmup = 1
bench.runs = 2
bench.batch_size = 4
";

fn spp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spp"))
        .args(args)
        .arg("--config")
        .arg(dir.join("exp.cfg"))
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), CONFIG).unwrap();
    dir
}

#[test]
fn train_prune_eval_bench() {
    let dir = workspace();
    let out = dir.path().join("out");

    let train = stdout(&spp(dir.path(), &["train"]));
    assert!(out.join("baseline.ckpt").is_file());
    assert!(out.join("train_metrics.csv").is_file());
    let baseline_acc = value(&train, "validation_accuracy").to_string();

    let eval = stdout(&spp(dir.path(), &["eval"]));
    assert!(value(&eval, "checkpoint").ends_with("baseline.ckpt"));
    assert_eq!(value(&eval, "validation_accuracy"), baseline_acc);
    assert_eq!(value(&eval, "recorded_validation_accuracy"), baseline_acc);

    let prune = stdout(&spp(dir.path(), &["prune"]));
    // 9 columns at R = 0.5 round half-to-even to 4 pruned.
    assert_eq!(value(&prune, "layer 0 pruned_fraction"), "0.4444");
    assert_eq!(value(&prune, "layer 1 pruned_fraction"), "0.5000");
    assert!(value(&prune, "pruning_iterations").parse::<usize>().unwrap() > 0);
    for f in ["pruned.ckpt", "final.ckpt", "metrics.csv", "recovery.csv", "sensitivity.csv", "ratio_plan.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!out.join("prune_state.ckpt").exists());

    let eval = stdout(&spp(dir.path(), &["eval"]));
    assert!(value(&eval, "checkpoint").ends_with("final.ckpt"));
    assert_eq!(value(&eval, "validation_accuracy"), value(&eval, "recorded_validation_accuracy"));

    let bench = stdout(&spp(dir.path(), &["bench"]));
    assert!(value(&bench, "theoretical_speedup").parse::<f64>().unwrap() > 1.0);
    assert!(value(&bench, "max_abs_diff").parse::<f64>().unwrap() <= 1e-10);
    assert!(out.join("bench.csv").is_file());
}

#[test]
fn one_shot_method_and_stop_resume() {
    let dir = workspace();
    let out = dir.path().join("out");
    stdout(&spp(dir.path(), &["train", "--seed", "3"]));

    let fp = stdout(&spp(dir.path(), &["prune", "--seed", "3", "--method", "fp"]));
    assert_eq!(value(&fp, "layer 0 pruned_fraction"), "0.4444");
    assert!(!fp.contains("recovery_ratio"));

    let stopped = stdout(&spp(dir.path(), &["prune", "--seed", "3", "--stop-after", "5"]));
    assert!(stopped.starts_with("stopped at iteration 5"), "{stopped}");
    let state = out.join("prune_state.ckpt");
    assert!(state.is_file());

    let state_arg = state.to_str().unwrap();
    let wrong_seed = spp(dir.path(), &["prune", "--seed", "4", "--resume", state_arg]);
    assert_eq!(wrong_seed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&wrong_seed.stderr).contains("different config or seed"));

    let resumed = stdout(&spp(dir.path(), &["prune", "--seed", "3", "--resume", state_arg]));
    assert!(value(&resumed, "layer 0 recovery_ratio").parse::<f64>().is_ok());
    assert!(!state.exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = workspace();
    let missing = spp(dir.path(), &["prune"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.starts_with("error:") && err.contains("baseline.ckpt"), "{err}");

    std::fs::write(dir.path().join("exp.cfg"), "prune.flatness = 2\n").unwrap();
    let bad = spp(dir.path(), &["train"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("u = 2"));

    std::fs::write(dir.path().join("exp.cfg"), "prune.interval = 1\nprune.intervall = 2\n").unwrap();
    let typo = spp(dir.path(), &["train"]);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("line 2"));

    let usage = Command::new(env!("CARGO_BIN_EXE_spp")).arg("prune").output().unwrap();
    assert!(!usage.status.success());
    assert!(String::from_utf8_lossy(&usage.stderr).contains("--config"));
}
