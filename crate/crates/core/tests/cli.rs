use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "epochs=2",
    "--set",
    "pretrain_epochs=5",
    "--set",
    "synth_users=60",
    "--set",
    "synth_items=80",
];

fn music(out: &Path, extra: &[&str], cmd: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_music"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(extra)
        .args(cmd)
        .output()
        .unwrap()
}

fn ok(out: &Path, extra: &[&str], cmd: &[&str]) -> String {
    let o = music(out, extra, cmd);
    assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_artifact_names_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = music(dir.path(), &[], &["train"]);
    assert_eq!(o.status.code(), Some(7));
    assert!(stderr(&o).contains("run `synth` or `ingest` first"), "{}", stderr(&o));

    ok(dir.path(), &[], &["synth"]);
    let o = music(dir.path(), &[], &["evaluate"]);
    assert_eq!(o.status.code(), Some(7));
    assert!(stderr(&o).contains("`pretrain`"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = music(dir.path(), &["--set", "no_such_key=1"], &["synth"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn rerunning_a_stage_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &[], &["synth"]);
    ok(dir.path(), &[], &["pretrain"]);
    let first = ok(dir.path(), &[], &["train"]);
    let index = std::fs::read(dir.path().join("index.json")).unwrap();
    let second = ok(dir.path(), &[], &["train"]);
    assert_eq!(first, second);
    assert_eq!(index, std::fs::read(dir.path().join("index.json")).unwrap());

    let metrics = ok(dir.path(), &[], &["evaluate"]);
    assert!(metrics.contains("standard"), "{metrics}");
    assert!(metrics.contains("dual_cold_start"), "{metrics}");
    let generated = ok(dir.path(), &[], &["infer"]);
    assert!(generated.contains("infer-b50"), "{generated}");
}

#[test]
fn evaluate_refuses_a_model_from_another_corpus() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "pretrain", "train"] {
        ok(dir.path(), &[], &[cmd]);
    }
    ok(dir.path(), &["--seed", "7"], &["synth"]);
    let o = music(dir.path(), &[], &["evaluate"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));

    ok(dir.path(), &["--seed", "7"], &["pretrain"]);
    let o = music(dir.path(), &["--seed", "7"], &["evaluate"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn every_artifact_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "lambda=0.3"], &["synth"]);
    let mut seen = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            let echo = std::fs::read_to_string(path.join("config.txt")).unwrap();
            assert!(echo.contains("lambda = 0.3"), "{echo}");
            seen += 1;
        }
    }
    assert_eq!(seen, 1);
}

#[test]
fn ablate_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &[], &["synth"]);
    let table = ok(dir.path(), &["--set", "betas=0.5"], &["ablate"]);
    for heading in ["w/o MLLM", "w/o diffusion", "w/o side", "full"] {
        assert!(table.contains(heading), "{table}");
    }
    let sweep = ok(
        dir.path(),
        &["--set", "betas=0.5", "--set", "sweep_steps=2,5"],
        &["ablate", "--sweep"],
    );
    assert!(sweep.contains("monotone:"), "{sweep}");
    assert!(sweep.contains("best T:"), "{sweep}");
}
