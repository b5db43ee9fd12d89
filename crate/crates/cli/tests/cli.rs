use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bip"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn simulate(dir: &Path, sub: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "--seed", "7", "--threads", "1", "--out", sub];
    args.extend_from_slice(extra);
    let out = bip(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a", &["--preset", "appendix-c1-p3"]);
    simulate(dir.path(), "b", &["--preset", "appendix-c1-p3"]);
    for f in ["dataset.csv", "truth.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn example_sidecar_names_the_invariant_set() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ex", &["--preset", "uq-example1"]);
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("ex/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["z_star"], "10");
}

#[test]
fn fit_exact_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d", &["--preset", "appendix-c3-p10", "--envs", "4", "--n", "100"]);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let name = format!("post{threads}.csv");
        let out = bip(dir.path(), &["fit-exact", "d/dataset.csv", "--threads", threads, "--out", &name]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn fit_vi_is_byte_identical_and_zero_steps_keep_init() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d", &["--preset", "uq-example2"]);
    fs::write(dir.path().join("vi.json"), r#"{"version": 1, "iterations": 120}"#).unwrap();
    for sub in ["r1", "r2"] {
        let out = bip(dir.path(), &["fit-vi", "d/dataset.csv", "--config", "vi.json", "--seed", "3", "--threads", "1", "--out", sub]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["log.jsonl", "phi.json", "selections.json"] {
        assert_eq!(fs::read(dir.path().join("r1").join(f)).unwrap(), fs::read(dir.path().join("r2").join(f)).unwrap());
    }

    fs::write(dir.path().join("zero.json"), r#"{"version": 1, "iterations": 0, "phi_init": [0.25, -1.5]}"#).unwrap();
    let out = bip(dir.path(), &["fit-vi", "d/dataset.csv", "--config", "zero.json", "--out", "z"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let phi: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("z/phi.json")).unwrap()).unwrap();
    assert_eq!(phi["phi"], serde_json::json!([0.25, -1.5]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bip(dir.path(), &["fit-exact", "missing.csv"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    fs::write(dir.path().join("bad.json"), r#"{"version": 1, "n": [10]}"#).unwrap();
    assert_eq!(code(&bip(dir.path(), &["sweep", "--config", "bad.json"])), 2);

    fs::write(
        dir.path().join("empty.json"),
        r#"{"version": 1, "preset": "appendix-c1-p3", "n": [10], "envs": [2], "strength": [1.0], "replicates": 1, "methods": []}"#,
    )
    .unwrap();
    assert_eq!(code(&bip(dir.path(), &["sweep", "--config", "empty.json"])), 2);

    assert_eq!(code(&bip(dir.path(), &["simulate", "--preset", "no-such-preset", "--out", "x"])), 2);

    simulate(dir.path(), "big", &["--preset", "appendix-c3-p10", "--p", "30", "--envs", "2", "--n", "50"]);
    let out = bip(dir.path(), &["fit-exact", "big/dataset.csv", "--cap", "1024"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit-vi"));
}

#[test]
fn evaluate_scores_a_bitstring() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "ex", &["--preset", "uq-example1"]);
    let out = bip(dir.path(), &["evaluate", "10", "--truth", "ex/truth.json", "--out", "eval.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
