//! TOML run configuration: layer stack, training hyperparameters, data and
//! output paths.
//!
//! ```toml
//! [train]
//! learning_rate = 0.01
//! epochs = 10
//! val_fraction = 0.1
//!
//! [data]
//! source = "idx"
//! train_images = "data/mnist/train-images-idx3-ubyte.gz"
//! train_labels = "data/mnist/train-labels-idx1-ubyte.gz"
//!
//! [output]
//! model = "mlp.circ"
//!
//! [[layer]]
//! kind = "circulant"
//! d_in = 784
//! k_out = 1024
//!
//! [[layer]]
//! kind = "dense"
//! d_in = 1024
//! k_out = 10
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::circulant::Mode;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerKind, LayerSpec, Network};
use crate::optim::TrainRun;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    train: RawTrain,
    data: RawData,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    layer: Vec<RawLayer>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr_decay: Option<f64>,
    patience: Option<usize>,
    seed: Option<u64>,
    weight_decay: Option<f64>,
    train_fraction: Option<f64>,
    val_fraction: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: String,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    n: Option<usize>,
    test_n: Option<usize>,
    dim: Option<usize>,
    classes: Option<usize>,
    spread: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    model: Option<PathBuf>,
    metrics: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    d_in: usize,
    k_out: usize,
    activation: Option<String>,
    mode: Option<String>,
    sign_flip: Option<bool>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
    /// Gaussian blobs; the last `test_n` of `n + test_n` samples form the test set.
    Synthetic {
        n: usize,
        test_n: usize,
        dim: usize,
        classes: usize,
        spread: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: Vec<LayerSpec>,
    pub train: TrainRun,
    /// Share of the training data held out for plateau detection; 0 disables.
    pub val_fraction: f64,
    pub data: DataSource,
    pub model_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Training, validation and test sets described by a [`DataSource`].
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn config_err(field: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {reason}"))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let stem = path
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
        RunConfig::parse_with(&text, base, &stem)
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        RunConfig::parse_with(text, base, "model")
    }

    fn parse_with(text: &str, base: &Path, stem: &str) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let reason = e.message().trim().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("line {line}, column {col}: {reason}"))
                }
                None => Error::Config(reason),
            }
        })?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let defaults = TrainRun::default();
        let t = raw.train;
        let train = TrainRun {
            learning_rate: t.learning_rate.unwrap_or(defaults.learning_rate),
            momentum: t.momentum.unwrap_or(defaults.momentum),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            epochs: t.epochs.unwrap_or(defaults.epochs),
            lr_decay: t.lr_decay.unwrap_or(defaults.lr_decay),
            patience: t.patience.unwrap_or(defaults.patience),
            seed: t.seed.unwrap_or(defaults.seed),
            weight_decay: t.weight_decay.unwrap_or(defaults.weight_decay),
            train_fraction: t.train_fraction.unwrap_or(defaults.train_fraction),
        };
        train
            .validate(usize::MAX)
            .map_err(|e| config_err("train", e))?;
        let val_fraction = t.val_fraction.unwrap_or(0.0);
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(config_err(
                "train.val_fraction",
                format!("must be in [0, 1), got {val_fraction}"),
            ));
        }

        let data = parse_data(raw.data, &resolve)?;
        let layers = parse_layers(&raw.layer, train.seed)?;
        check_chain(&layers)?;

        let model_path = resolve(
            raw.output
                .model
                .unwrap_or_else(|| format!("{stem}.circ").into()),
        );
        let metrics_path = resolve(
            raw.output
                .metrics
                .unwrap_or_else(|| format!("{stem}.metrics.json").into()),
        );
        Ok(RunConfig {
            layers,
            train,
            val_fraction,
            data,
            model_path,
            metrics_path,
        })
    }

    pub fn build_network(&self) -> Result<Network> {
        Network::from_specs(&self.layers)
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        let (train_all, test) = match &self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                let test = test
                    .as_ref()
                    .map(|(i, l)| data::load_idx(i, l))
                    .transpose()?;
                (train, test)
            }
            &DataSource::Synthetic {
                n,
                test_n,
                dim,
                classes,
                spread,
                seed,
            } => {
                let all = data::synth_blobs(n + test_n, dim, classes, spread, seed)?;
                let train = all.subset(&(0..n).collect::<Vec<_>>());
                let test = (test_n > 0).then(|| all.subset(&(n..n + test_n).collect::<Vec<_>>()));
                (train, test)
            }
        };
        let (train, val) = if self.val_fraction > 0.0 {
            let (t, v) = data::split(&train_all, self.val_fraction, self.train.seed)?;
            (t, Some(v))
        } else {
            (train_all, None)
        };
        Ok(LoadedData { train, val, test })
    }
}

fn parse_data(raw: RawData, resolve: &dyn Fn(PathBuf) -> PathBuf) -> Result<DataSource> {
    let idx_fields = [
        ("train_images", raw.train_images.is_some()),
        ("train_labels", raw.train_labels.is_some()),
        ("test_images", raw.test_images.is_some()),
        ("test_labels", raw.test_labels.is_some()),
    ];
    let synth_fields = [
        ("n", raw.n.is_some()),
        ("test_n", raw.test_n.is_some()),
        ("dim", raw.dim.is_some()),
        ("classes", raw.classes.is_some()),
        ("spread", raw.spread.is_some()),
        ("seed", raw.seed.is_some()),
    ];
    let reject = |fields: &[(&str, bool)], source: &str| -> Result<()> {
        match fields.iter().find(|(_, set)| *set) {
            Some((name, _)) => Err(config_err(
                &format!("data.{name}"),
                format!("not allowed with source = {source:?}"),
            )),
            None => Ok(()),
        }
    };
    let required = |name: &str| config_err(&format!("data.{name}"), "missing");
    match raw.source.as_str() {
        "idx" => {
            reject(&synth_fields, "idx")?;
            let test = match (raw.test_images, raw.test_labels) {
                (Some(i), Some(l)) => Some((resolve(i), resolve(l))),
                (None, None) => None,
                (Some(_), None) => return Err(required("test_labels")),
                (None, Some(_)) => return Err(required("test_images")),
            };
            Ok(DataSource::Idx {
                train_images: resolve(raw.train_images.ok_or_else(|| required("train_images"))?),
                train_labels: resolve(raw.train_labels.ok_or_else(|| required("train_labels"))?),
                test,
            })
        }
        "synthetic" => {
            reject(&idx_fields, "synthetic")?;
            let n = raw.n.ok_or_else(|| required("n"))?;
            let classes = raw.classes.ok_or_else(|| required("classes"))?;
            let dim = raw.dim.ok_or_else(|| required("dim"))?;
            if n < 2 || classes == 0 || dim == 0 {
                return Err(config_err(
                    "data",
                    "need n >= 2 and positive dim and classes",
                ));
            }
            Ok(DataSource::Synthetic {
                n,
                test_n: raw.test_n.unwrap_or(0),
                dim,
                classes,
                spread: raw.spread.unwrap_or(0.05),
                seed: raw.seed.unwrap_or(0),
            })
        }
        other => Err(config_err(
            "data.source",
            format!("expected \"idx\" or \"synthetic\", got {other:?}"),
        )),
    }
}

fn parse_layers(raw: &[RawLayer], train_seed: u64) -> Result<Vec<LayerSpec>> {
    if raw.is_empty() {
        return Err(config_err("layer", "at least one [[layer]] is required"));
    }
    let last = raw.len() - 1;
    raw.iter()
        .enumerate()
        .map(|(i, l)| {
            let field = |name: &str| format!("layer[{i}].{name}");
            if l.d_in == 0 || l.k_out == 0 {
                return Err(config_err(&field("d_in"), "layer dims must be positive"));
            }
            let activation = match &l.activation {
                Some(a) => a.parse().map_err(|e| config_err(&field("activation"), e))?,
                None if i == last => Activation::Identity,
                None => Activation::Relu,
            };
            let kind = match l.kind.as_str() {
                "dense" => {
                    if l.mode.is_some() || l.sign_flip.is_some() {
                        let name = if l.mode.is_some() {
                            "mode"
                        } else {
                            "sign_flip"
                        };
                        return Err(config_err(&field(name), "only applies to circulant layers"));
                    }
                    LayerKind::Dense
                }
                "circulant" => {
                    let mode = match l.mode.as_deref().unwrap_or("trained") {
                        "trained" => Mode::Trained,
                        "randomized" => Mode::Randomized,
                        other => {
                            return Err(config_err(
                                &field("mode"),
                                format!("expected \"trained\" or \"randomized\", got {other:?}"),
                            ))
                        }
                    };
                    LayerKind::Circulant {
                        mode,
                        sign_flip: l.sign_flip.unwrap_or(true),
                    }
                }
                other => {
                    return Err(config_err(
                        &field("kind"),
                        format!("expected \"dense\" or \"circulant\", got {other:?}"),
                    ))
                }
            };
            Ok(LayerSpec {
                kind,
                d_in: l.d_in,
                k_out: l.k_out,
                activation,
                seed: l.seed.unwrap_or_else(|| default_layer_seed(train_seed, i)),
            })
        })
        .collect()
}

/// Distinct per-layer seed derived from the run seed.
pub fn default_layer_seed(train_seed: u64, index: usize) -> u64 {
    train_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

fn check_chain(layers: &[LayerSpec]) -> Result<()> {
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].k_out != pair[1].d_in {
            return Err(Error::Config(format!(
                "layer[{i}].k_out = {} does not match layer[{}].d_in = {}",
                pair[0].k_out,
                i + 1,
                pair[1].d_in
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
[train]
learning_rate = 0.05
epochs = 3
batch_size = 16
seed = 7
val_fraction = 0.2

[data]
source = "synthetic"
n = 120
test_n = 40
dim = 6
classes = 3

[[layer]]
kind = "circulant"
d_in = 6
k_out = 8
mode = "randomized"
sign_flip = false

[[layer]]
kind = "dense"
d_in = 8
k_out = 3
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    fn reason(text: &str) -> String {
        match parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn parses_full_config_with_defaults() {
        let cfg = parse(SYNTH).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.val_fraction, 0.2);
        assert_eq!(cfg.layers.len(), 2);
        assert_eq!(
            cfg.layers[0].kind,
            LayerKind::Circulant {
                mode: Mode::Randomized,
                sign_flip: false
            }
        );
        assert_eq!(cfg.layers[0].activation, Activation::Relu);
        assert_eq!(cfg.layers[1].activation, Activation::Identity);
        assert_ne!(cfg.layers[0].seed, cfg.layers[1].seed);
        assert_eq!(cfg.model_path, Path::new("/cfg/model.circ"));
        assert_eq!(cfg.metrics_path, Path::new("/cfg/model.metrics.json"));
        let net = cfg.build_network().unwrap();
        assert_eq!((net.input_dim(), net.classes()), (6, 3));
    }

    #[test]
    fn synthetic_data_splits() {
        let cfg = parse(SYNTH).unwrap();
        let d = cfg.load_data().unwrap();
        assert_eq!(d.train.len() + d.val.as_ref().unwrap().len(), 120);
        assert_eq!(d.val.unwrap().len(), 24);
        assert_eq!(d.test.unwrap().len(), 40);
    }

    #[test]
    fn idx_paths_resolve_against_config_dir() {
        let text = r#"
[data]
source = "idx"
train_images = "a.gz"
train_labels = "/abs/b.gz"
[output]
model = "out/m.circ"
[[layer]]
kind = "dense"
d_in = 784
k_out = 10
"#;
        let cfg = parse(text).unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Idx {
                train_images: "/cfg/a.gz".into(),
                train_labels: "/abs/b.gz".into(),
                test: None,
            }
        );
        assert_eq!(cfg.model_path, Path::new("/cfg/out/m.circ"));
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let text = SYNTH.replace("epochs = 3", "epochs = 3\nlearning_rat = 0.1");
        let m = reason(&text);
        assert!(m.starts_with("line 5,"), "{m}");
        assert!(m.contains("learning_rat"), "{m}");
        let m = reason(&SYNTH.replace("sign_flip = false", "sign_flip = false\nbias = true"));
        assert!(m.contains("bias"), "{m}");
    }

    #[test]
    fn syntax_errors_report_position() {
        let m = reason("[train\nepochs = 1");
        assert!(m.starts_with("line 1,"), "{m}");
        assert!(!m.contains('\n'));
    }

    #[test]
    fn chain_mismatch_names_both_layers() {
        let m = reason(&SYNTH.replace("d_in = 8", "d_in = 9"));
        assert!(m.contains("layer[0]") && m.contains("layer[1]"), "{m}");
    }

    #[test]
    fn field_level_diagnostics() {
        assert!(reason(&SYNTH.replace("\"randomized\"", "\"frozen\"")).starts_with("layer[0].mode"));
        assert!(
            reason(&SYNTH.replace("kind = \"dense\"", "kind = \"conv\""))
                .starts_with("layer[1].kind")
        );
        assert!(reason(&SYNTH.replace("\"synthetic\"", "\"csv\"")).starts_with("data.source"));
        assert!(reason(&SYNTH.replace("n = 120\n", "")).starts_with("data.n"));
        assert!(
            reason(&SYNTH.replace("n = 120", "n = 120\ntrain_images = \"x\""))
                .starts_with("data.train_images")
        );
        assert!(
            reason(&SYNTH.replace("val_fraction = 0.2", "val_fraction = 1.5"))
                .starts_with("train.val_fraction")
        );
        assert!(
            reason(&SYNTH.replace("learning_rate = 0.05", "learning_rate = -1.0"))
                .starts_with("train")
        );
        let dense_mode = SYNTH.replace("k_out = 3", "k_out = 3\nmode = \"trained\"");
        assert!(reason(&dense_mode).starts_with("layer[1].mode"));
        assert!(
            reason("[data]\nsource = \"synthetic\"\nn = 4\ndim = 2\nclasses = 2\n")
                .starts_with("layer")
        );
    }

    #[test]
    fn default_layer_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> =
            (0..50).map(|i| default_layer_seed(3, i)).collect();
        assert_eq!(seeds.len(), 50);
    }
}
