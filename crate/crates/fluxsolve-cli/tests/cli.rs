//! End-to-end tests of the `fluxsolve` binary: exercises every subcommand
//! through its public flags and asserts on exit codes, printed output and
//! the artifact files (including the per-directory `manifest.json`).

use std::path::Path;
use std::process::{Command, Output};

use fluxsolve_core::data::SplitData;
use fluxsolve_core::model::{FluxModel, ModelConfig};
use tempfile::tempdir;

fn fluxsolve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluxsolve"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process not killed by signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("stderr is UTF-8")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Generates a small dataset into `dir` and asserts success.
fn gen_small_data(dir: &Path, seed: u64) {
    let out = fluxsolve(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--n-train",
        "3",
        "--n-val",
        "2",
        "--n-test",
        "2",
    ]);
    assert_eq!(exit_code(&out), 0, "gen-data failed: {}", stderr(&out));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join("manifest.json"))).expect("manifest parses")
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    gen_small_data(&a, 7);
    gen_small_data(&b, 7);
    gen_small_data(&c, 8);
    for name in ["train.json", "val.json", "test.json"] {
        assert_eq!(
            read(&a.join(name)),
            read(&b.join(name)),
            "{name} differs across runs"
        );
    }
    assert_ne!(
        read(&a.join("train.json")),
        read(&c.join("train.json")),
        "different seeds must give different data"
    );
}

#[test]
fn gen_data_writes_one_manifest_listing_every_output() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("data");
    gen_small_data(&dir, 0);
    let m = manifest(&dir);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seeds"], serde_json::json!([0]));
    let outputs: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(outputs, ["train.json", "val.json", "test.json"]);
    for name in &outputs {
        assert!(dir.join(name).is_file(), "{name} listed but missing");
    }
    let manifests = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count();
    assert_eq!(manifests, 1);
}

#[test]
fn gen_data_rejects_an_empty_split() {
    let tmp = tempdir().unwrap();
    let out = fluxsolve(&[
        "gen-data",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--n-train",
        "0",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn train_with_zero_epochs_checkpoints_the_initialization() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data, 0);
    let run = tmp.path().join("run");
    let out = fluxsolve(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "0",
        "--width",
        "8",
        "--seed",
        "5",
    ]);
    assert_eq!(exit_code(&out), 0, "train failed: {}", stderr(&out));

    let written = FluxModel::from_json(&read(&run.join("checkpoint.json"))).unwrap();
    let train_split = SplitData::from_json(&read(&data.join("train.json"))).unwrap();
    let expected_config = ModelConfig {
        encoded_dim: 8,
        u_ref: train_split.u_ref,
        ..ModelConfig::default()
    };
    let expected = FluxModel::new(expected_config, 5).unwrap();
    assert_eq!(
        written, expected,
        "checkpoint must equal the fresh initialization"
    );

    let log = read(&run.join("train_log.csv"));
    assert_eq!(
        log.lines().count(),
        1,
        "no epochs ran, so the log is header-only"
    );
    let m = manifest(&run);
    assert_eq!(m["command"], "train");
    assert!(
        !m["input_hashes"].as_object().unwrap().is_empty(),
        "manifest must hash the dataset files it read"
    );
}

#[test]
fn train_demands_the_data_flag() {
    let tmp = tempdir().unwrap();
    let out = fluxsolve(&["train", "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2, "missing required flag is a usage error");
}

#[test]
fn train_rejects_a_malformed_solver_name() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data, 0);
    let out = fluxsolve(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
        "--solver",
        "bb:zero",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_with_a_classical_scheme_writes_metrics() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data, 0);
    let run = tmp.path().join("eval");
    let out = fluxsolve(&[
        "eval",
        "--fvm",
        "blended",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "eval failed: {}", stderr(&out));
    let csv = read(&run.join("metrics.csv"));
    assert!(csv.starts_with("method,dataset,mse,mse_sem,cons_err,cons_err_sem,wall_s\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("fvm-blended,test,"));
    assert_eq!(stdout(&out), csv, "the CSV is echoed to stdout verbatim");
    let m = manifest(&run);
    let outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["metrics.csv", "metrics.json"]);
}

#[test]
fn eval_accepts_exactly_one_predictor() {
    let tmp = tempdir().unwrap();
    let both = fluxsolve(&[
        "eval",
        "--fvm",
        "blended",
        "--model",
        "x.json",
        "--data",
        "d",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        exit_code(&both),
        2,
        "--model and --fvm are mutually exclusive"
    );
    let neither = fluxsolve(&["eval", "--data", "d", "--out", "o"]);
    assert_eq!(exit_code(&neither), 2, "one of --model/--fvm is required");
}

#[test]
fn eval_rejects_an_unknown_split_name() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data, 0);
    let out = fluxsolve(&[
        "eval",
        "--fvm",
        "central",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--split",
        "bogus",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_flags_a_tampered_checkpoint_as_corrupt() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_data(&data, 0);
    let run = tmp.path().join("train");
    let out = fluxsolve(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "0",
        "--width",
        "8",
    ]);
    assert_eq!(exit_code(&out), 0, "train failed: {}", stderr(&out));

    // Double one decoder entry: the file still parses, but the stored
    // decoder no longer inverts the encoder, which validation must catch.
    let ckpt_path = run.join("checkpoint.json");
    let mut ckpt: serde_json::Value = serde_json::from_str(&read(&ckpt_path)).unwrap();
    let entry = &mut ckpt["decoder"][0][0];
    let doubled = 2.0 * entry.as_f64().unwrap();
    *entry = serde_json::Value::from(doubled);
    std::fs::write(&ckpt_path, serde_json::to_string(&ckpt).unwrap()).unwrap();

    let out = fluxsolve(&[
        "eval",
        "--model",
        ckpt_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("failed validation"));
}

#[test]
fn converge_prints_the_requested_resolutions() {
    let out = fluxsolve(&["converge", "--scheme", "upwind", "--resolutions", "5,10"]);
    assert_eq!(exit_code(&out), 0, "converge failed: {}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_cells,dx,rmse");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5,"));
    assert!(lines[2].starts_with("10,"));
}

#[test]
fn converge_writes_the_table_when_an_output_directory_is_given() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path().join("study");
    let out = fluxsolve(&[
        "converge",
        "--resolutions",
        "5,10,20",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(read(&dir.join("convergence.csv")), stdout(&out));
    assert_eq!(manifest(&dir)["command"], "converge");
}

#[test]
fn converge_rejects_an_unknown_scheme() {
    let out = fluxsolve(&["converge", "--scheme", "quick"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn propcheck_passes_on_the_stock_configuration() {
    let out = fluxsolve(&["propcheck", "--seed", "0", "--probes", "5"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all 9 checks passed"), "stdout: {text}");
    assert_eq!(text.matches("pass ").count(), 9);
}

#[test]
fn propcheck_fails_when_the_vertex_gate_is_unshared() {
    let out = fluxsolve(&[
        "propcheck",
        "--probes",
        "5",
        "--inject-break",
        "unshared-vertex-mlp",
    ]);
    assert_eq!(exit_code(&out), 1);
    let text = stdout(&out);
    assert!(
        text.contains("FAIL face-blend-swap-symmetry"),
        "the injected defect must surface in its check: {text}"
    );
    assert!(stderr(&out).contains("1 of 9 checks failed"));
}

#[test]
fn propcheck_rejects_an_unknown_break_name() {
    let out = fluxsolve(&["propcheck", "--inject-break", "bogus"]);
    assert_eq!(exit_code(&out), 2);
}
