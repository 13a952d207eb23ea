use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circnet::config::RunConfig;
use circnet::data::{self, Dataset};
use circnet::matrix::Matrix;
use circnet::{model, optim};

fn circnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_single_error_line(out: &Output) {
    let err = stderr(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

const LAYERS: &str = r#"
[[layer]]
kind = "circulant"
d_in = 16
k_out = 32
mode = "MODE"

[[layer]]
kind = "dense"
d_in = 32
k_out = 4
"#;

fn synthetic_config(dir: &Path, name: &str, mode: &str, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"
[train]
learning_rate = 0.05
batch_size = 32
epochs = 4
seed = 3
val_fraction = 0.2
{extra_train}

[data]
source = "synthetic"
n = 400
test_n = 100
dim = 16
classes = 4
spread = 0.08
seed = 11

[output]
model = "{name}.circ"
metrics = "{name}.json"
{}"#,
        LAYERS.replace("MODE", mode)
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_model_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    let out = circnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 4);

    let m = metrics(&dir.path().join("run.json"));
    for key in [
        "train_error",
        "test_error",
        "param_floats",
        "param_memory_mb",
        "test_time_s",
        "train_time_s",
    ] {
        assert!(!m[key].is_null(), "{key}");
    }
    assert!(m["test_error"].as_f64().unwrap() < 0.2);
    assert_eq!(m["layers"][0]["floats"], 32);
    assert_eq!(m["layers"][0]["sign_bits"], 32);
    assert_eq!(m["param_floats"], 32 + 32 * 4);
    assert!(model::load(dir.path().join("run.circ")).is_ok());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synthetic_config(dir.path(), "a", "trained", "");
    let b = synthetic_config(dir.path(), "b", "trained", "");
    for cfg in [&a, &b] {
        assert!(circnet(&["train", "--config", cfg.to_str().unwrap()])
            .status
            .success());
    }
    let bytes = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(bytes("a.circ"), bytes("b.circ"));
}

#[test]
fn eval_matches_in_memory_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = synthetic_config(dir.path(), "run", "trained", "");
    assert!(circnet(&["train", "--config", cfg_path.to_str().unwrap()])
        .status
        .success());

    let cfg = RunConfig::load(&cfg_path).unwrap();
    let test = cfg.load_data().unwrap().test.unwrap();
    let (images, labels) = (dir.path().join("img"), dir.path().join("lbl"));
    data::write_idx(&test, 4, 4, &images, &labels).unwrap();

    let model_path = dir.path().join("run.circ");
    let out = circnet(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);

    let net = model::load(&model_path).unwrap();
    let reloaded = data::load_idx(&images, &labels).unwrap();
    let err = optim::evaluate(&net, &reloaded).unwrap();
    let first = text.lines().next().unwrap();
    assert!(
        first.starts_with(&format!("error {err:.6} (")),
        "{first} vs {err}"
    );

    // one header row plus one row of counts per class
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip_while(|l| !l.starts_with("confusion"))
        .skip(1)
        .map(|l| {
            l.split_whitespace()
                .skip(1)
                .map(|c| c.parse().unwrap())
                .collect()
        })
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().flatten().sum::<usize>(), test.len());
    assert_eq!(rows, optim::confusion_matrix(&net, &reloaded, 1).unwrap());

    let threaded = Command::new(env!("CARGO_BIN_EXE_circnet"))
        .env("CIRCNET_THREADS", "3")
        .args(["eval", "--model", model_path.to_str().unwrap()])
        .args([
            "--images",
            images.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(stdout(&threaded).lines().next(), text.lines().next());
}

#[test]
fn corrupted_model_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    assert!(circnet(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let model_path = dir.path().join("run.circ");
    let mut bytes = std::fs::read(&model_path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&model_path, &bytes).unwrap();

    let test = data::synth_blobs(8, 16, 4, 0.1, 1).unwrap();
    let (images, labels) = (dir.path().join("img"), dir.path().join("lbl"));
    data::write_idx(&test, 4, 4, &images, &labels).unwrap();
    let out = circnet(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_single_error_line(&out);
    assert!(stderr(&out).contains("checksum"));
}

#[test]
fn eval_with_mismatched_dims_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    assert!(circnet(&["train", "--config", cfg.to_str().unwrap()])
        .status
        .success());
    let other = data::synth_blobs(8, 9, 2, 0.1, 1).unwrap();
    let (images, labels) = (dir.path().join("img"), dir.path().join("lbl"));
    data::write_idx(&other, 3, 3, &images, &labels).unwrap();
    let model_path = dir.path().join("run.circ");
    let out = circnet(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_single_error_line(&out);
}

#[test]
fn mismatched_layer_chain_exits_2_naming_both_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("d_in = 32", "d_in = 31");
    std::fs::write(&cfg, text).unwrap();
    let out = circnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_single_error_line(&out);
    let err = stderr(&out);
    assert!(
        err.contains("layer[0]") && err.contains("layer[1]"),
        "{err}"
    );
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "momentum_typo = 0.5");
    let out = circnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_single_error_line(&out);
    let err = stderr(&out);
    assert!(
        err.contains("line 8") && err.contains("momentum_typo"),
        "{err}"
    );
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("learning_rate = 0.05", "learning_rate = 1e7");
    std::fs::write(&cfg, text).unwrap();
    let out = circnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert_single_error_line(&out);
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn randomized_layers_are_saved_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = synthetic_config(dir.path(), "run", "randomized", "");
    let out = circnet(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let initial = RunConfig::load(&cfg_path).unwrap().build_network().unwrap();
    let trained = model::load(dir.path().join("run.circ")).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(trained.params(0)), bits(initial.params(0)));
    assert_ne!(bits(trained.params(1)), bits(initial.params(1)));
    assert_eq!(
        metrics(&dir.path().join("run.json"))["layers"][0]["frozen"],
        true
    );
}

#[test]
fn train_fraction_flag_subsets_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), "run", "trained", "");
    let mut seen = Vec::new();
    for f in ["0.1", "0.25", "0.5", "1.0"] {
        let out = circnet(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--train-fraction",
            f,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let m = metrics(&dir.path().join("run.json"));
        assert_eq!(
            m["train_fraction"].as_f64().unwrap().to_string(),
            f.trim_end_matches(".0")
        );
        seen.push(m["n_train"].as_u64().unwrap());
    }
    assert_eq!(seen, vec![32, 80, 160, 320]);

    let out = circnet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train-fraction",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_single_error_line(&out);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let ok = circnet(&["gradcheck", "--seed", "4", "--sizes", "1,6"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("worst"));

    let bad = circnet(&["gradcheck", "--sizes", "4", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(5));
    assert_single_error_line(&bad);
    assert!(stderr(&bad).contains("grad_r"));

    let too_big = circnet(&["gradcheck", "--sizes", "65"]);
    assert_eq!(too_big.status.code(), Some(2));
}

#[test]
fn bench_single_dim_and_invalid_dim() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = circnet(&[
        "bench",
        "--dims",
        "256",
        "--reps",
        "10",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "d,dense_ms,circ_ms,speedup,space_ratio");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("256,") && lines[1].ends_with(",256"));

    let bad = circnet(&["bench", "--dims", "1000", "--reps", "10"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_single_error_line(&bad);
}

#[test]
fn usage_and_io_errors() {
    let out = circnet(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_single_error_line(&out);

    let out = circnet(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert_single_error_line(&out);

    assert!(circnet(&["--help"]).status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_circnet"))
        .env("CIRCNET_THREADS", "zero")
        .args(["eval", "--model", "m", "--images", "i", "--labels", "l"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn in_memory_and_reloaded_probabilities_agree_bitwise() {
    let ds = data::synth_blobs(64, 16, 4, 0.1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(synthetic_config(dir.path(), "run", "trained", "")).unwrap();
    let mut net = cfg.build_network().unwrap();
    let train = Dataset::new(ds.features().clone(), ds.labels().to_vec(), 4).unwrap();
    let run = optim::TrainRun {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    optim::train(
        &mut net,
        optim::TrainData {
            train: &train,
            val: None,
            test: None,
        },
        &run,
        |_| {},
    )
    .unwrap();
    let back = model::from_bytes(&model::to_bytes(&net)).unwrap();
    let bits = |m: Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(net.probabilities(ds.features()).unwrap()),
        bits(back.probabilities(ds.features()).unwrap())
    );
}
