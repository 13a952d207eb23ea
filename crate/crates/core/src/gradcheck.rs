//! Central finite-difference checks of every analytic gradient: circulant
//! `∂/∂r` and `∂/∂x`, dense `∂/∂W` and `∂/∂x`, and whole networks under
//! softmax cross-entropy.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circulant::{CirculantLayer, Mode};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::nn::{Activation, DenseLayer, LayerKind, LayerSpec, Linear, Network};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_SIZE: usize = 64;
pub const DEFAULT_SIZES: [usize; 6] = [1, 4, 6, 16, 50, 64];
const BATCH: usize = 3;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub sizes: Vec<usize>,
    /// Perturbs the analytic circulant `∂/∂r` so the suite must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            sizes: DEFAULT_SIZES.to_vec(),
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn offenders(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<44} {:>6} entries  max rel err {:.3e}  {}",
                c.name,
                c.entries,
                c.max_rel_error,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} checks, worst {:.3e}, tolerance {:e}",
            self.checks.len(),
            self.max_rel_error(),
            self.tolerance
        )
    }
}

/// Largest per-entry `|a − n| / max(|a|, |n|, floor)`, where the floor is
/// `1e-3` of the largest numerical magnitude (at least `1e-8`) so that
/// entries that are zero up to rounding do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `p`.
pub fn numeric_gradient(p: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut work = p.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        work[i] = p[i] + EPSILON;
        let plus = f(&work)?;
        work[i] = p[i] - EPSILON;
        let minus = f(&work)?;
        work[i] = p[i];
        out.push((plus - minus) / (2.0 * EPSILON));
    }
    Ok(out)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: bool,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        self.checks.push(CheckResult {
            name,
            entries: analytic.len(),
            max_rel_error: max_relative_error(analytic, numeric),
        });
    }

    /// Objective `Σ w ∘ y` for a single circulant layer.
    fn circulant(&mut self, d_in: usize, k_out: usize, sign_flip: bool) -> Result<()> {
        let seed = self.rng.random();
        let layer = CirculantLayer::new(d_in, k_out, Mode::Trained, seed)?;
        let layer = if sign_flip {
            layer
        } else {
            layer.without_sign_flip()
        };
        let x = Matrix::from_vec(
            BATCH,
            d_in,
            random_vec(&mut self.rng, BATCH * d_in, -1.0, 1.0),
        )?;
        let w = Matrix::from_vec(
            BATCH,
            k_out,
            random_vec(&mut self.rng, BATCH * k_out, -1.0, 1.0),
        )?;
        let (_, cache) = layer.forward(&x)?;
        let grads = layer.backward_with(&w, &cache, true)?;
        let mut grad_r = grads.grad_r;
        if self.corrupt {
            grad_r[0] += 1e-2 * (1.0 + grad_r[0].abs());
        }
        let grad_x = grads.grad_input.expect("input gradient requested");

        let signs = layer.signs().clone();
        let numeric_r = numeric_gradient(layer.params(), |r| {
            let l =
                CirculantLayer::from_parts(d_in, k_out, Mode::Trained, r.to_vec(), signs.clone())?;
            Ok(dot(l.forward(&x)?.0.as_slice(), w.as_slice()))
        })?;
        let numeric_x = numeric_gradient(x.as_slice(), |xv| {
            let xm = Matrix::from_vec(BATCH, d_in, xv.to_vec())?;
            Ok(dot(layer.forward(&xm)?.0.as_slice(), w.as_slice()))
        })?;
        let tag = if sign_flip { "" } else { " no-flip" };
        self.record(
            format!("circulant{tag} grad_r {d_in}->{k_out}"),
            &grad_r,
            &numeric_r,
        );
        self.record(
            format!("circulant{tag} grad_x {d_in}->{k_out}"),
            grad_x.as_slice(),
            &numeric_x,
        );
        Ok(())
    }

    fn dense(&mut self, d_in: usize, k_out: usize) -> Result<()> {
        let seed = self.rng.random();
        let layer = DenseLayer::new(d_in, k_out, seed)?;
        let x = Matrix::from_vec(
            BATCH,
            d_in,
            random_vec(&mut self.rng, BATCH * d_in, -1.0, 1.0),
        )?;
        let w = Matrix::from_vec(
            BATCH,
            k_out,
            random_vec(&mut self.rng, BATCH * k_out, -1.0, 1.0),
        )?;
        let (_, cache) = layer.forward(&x)?;
        let grads = layer.backward_with(&w, &cache, true)?;
        let grad_x = grads.grad_input.expect("input gradient requested");

        let numeric_w = numeric_gradient(layer.weights().as_slice(), |wv| {
            let l = DenseLayer::from_matrix(Matrix::from_vec(k_out, d_in, wv.to_vec())?)?;
            Ok(dot(l.apply(&x)?.as_slice(), w.as_slice()))
        })?;
        let numeric_x = numeric_gradient(x.as_slice(), |xv| {
            let xm = Matrix::from_vec(BATCH, d_in, xv.to_vec())?;
            Ok(dot(layer.apply(&xm)?.as_slice(), w.as_slice()))
        })?;
        self.record(
            format!("dense grad_w {d_in}->{k_out}"),
            grads.grad_w.as_slice(),
            &numeric_w,
        );
        self.record(
            format!("dense grad_x {d_in}->{k_out}"),
            grad_x.as_slice(),
            &numeric_x,
        );
        Ok(())
    }

    /// Mean cross-entropy of `specs` on a random batch; checks every
    /// trainable layer and the input.
    fn network(&mut self, label: &str, specs: &[LayerSpec]) -> Result<()> {
        let net = Network::from_specs(specs)?;
        let d = net.input_dim();
        let classes = net.classes();
        let x = Matrix::from_vec(BATCH, d, random_vec(&mut self.rng, BATCH * d, 0.0, 1.0))?;
        let labels: Vec<usize> = (0..BATCH)
            .map(|_| self.rng.random_range(0..classes))
            .collect();
        let pass = net.forward(&x, Some(&labels))?;
        let grads = net.backward(&pass, true)?;
        let loss = |n: &Network, x: &Matrix| -> Result<f64> {
            Ok(n.forward(x, Some(&labels))?.loss.expect("labels given"))
        };

        for (j, stage) in net.stages().iter().enumerate() {
            let Some(analytic) = grads.layers[j].as_slice() else {
                continue;
            };
            let p0 = net.params(j).to_vec();
            let numeric = numeric_gradient(&p0, |p| {
                let mut n = net.clone();
                let step: Vec<f64> = p.iter().zip(&p0).map(|(a, b)| a - b).collect();
                n.apply_update(j, &step)?;
                loss(&n, &x)
            })?;
            let kind = match stage.linear {
                Linear::Dense(_) => "dense",
                Linear::Circulant(_) => "circulant",
            };
            self.record(format!("net {label} layer {j} {kind}"), analytic, &numeric);
        }
        let numeric_x = numeric_gradient(x.as_slice(), |xv| {
            loss(&net, &Matrix::from_vec(BATCH, d, xv.to_vec())?)
        })?;
        let grad_x = grads.input.expect("input gradient requested");
        self.record(format!("net {label} input"), grad_x.as_slice(), &numeric_x);
        Ok(())
    }
}

fn spec(
    kind: LayerKind,
    d_in: usize,
    k_out: usize,
    activation: Activation,
    seed: u64,
) -> LayerSpec {
    LayerSpec {
        kind,
        d_in,
        k_out,
        activation,
        seed,
    }
}

const CIRC: LayerKind = LayerKind::Circulant {
    mode: Mode::Trained,
    sign_flip: true,
};
const CIRC_NO_FLIP: LayerKind = LayerKind::Circulant {
    mode: Mode::Trained,
    sign_flip: false,
};
const CIRC_RANDOM: LayerKind = LayerKind::Circulant {
    mode: Mode::Randomized,
    sign_flip: true,
};

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.sizes.is_empty() {
        return Err(Error::Argument("no gradcheck sizes given".into()));
    }
    if let Some(&bad) = opts.sizes.iter().find(|&&s| s == 0 || s > MAX_SIZE) {
        return Err(Error::Argument(format!(
            "gradcheck size {bad} is outside 1..={MAX_SIZE}"
        )));
    }
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        corrupt: opts.corrupt_gradient,
        checks: Vec::new(),
    };
    for &s in &opts.sizes {
        let h = (s / 2).max(1);
        let mut shapes = vec![(s, s), (s, h), (h, s)];
        shapes.dedup();
        for &(d_in, k_out) in &shapes {
            suite.circulant(d_in, k_out, true)?;
            suite.dense(d_in, k_out)?;
        }
        suite.circulant(s, h, false)?;

        let classes = s.clamp(2, 5);
        let seed = |suite: &mut Suite| suite.rng.random::<u64>();
        let a = [
            spec(CIRC, s, s, Activation::Relu, seed(&mut suite)),
            spec(
                LayerKind::Dense,
                s,
                classes,
                Activation::Identity,
                seed(&mut suite),
            ),
        ];
        suite.network(&format!("circ-dense {s}"), &a)?;
        let b = [
            spec(LayerKind::Dense, s, h, Activation::Relu, seed(&mut suite)),
            spec(
                CIRC_NO_FLIP,
                h,
                classes,
                Activation::Identity,
                seed(&mut suite),
            ),
        ];
        suite.network(&format!("dense-circ {s}"), &b)?;
        let c = [
            spec(CIRC_RANDOM, s, s, Activation::Relu, seed(&mut suite)),
            spec(CIRC, s, h, Activation::Relu, seed(&mut suite)),
            spec(
                LayerKind::Dense,
                h,
                classes,
                Activation::Identity,
                seed(&mut suite),
            ),
        ];
        suite.network(&format!("frozen-circ-dense {s}"), &c)?;
    }
    Ok(GradcheckReport {
        checks: suite.checks,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.len() > 50);
        for needle in [
            "circulant grad_r",
            "circulant grad_x",
            "dense grad_w",
            "net ",
        ] {
            assert!(
                report.checks.iter().any(|c| c.name.contains(needle)),
                "{needle}"
            );
        }
    }

    #[test]
    fn pad_and_truncate_shapes_are_covered() {
        let report = run(&GradcheckOptions {
            sizes: vec![6],
            ..Default::default()
        })
        .unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"circulant grad_r 6->3"));
        assert!(names.contains(&"circulant grad_x 3->6"));
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn size_one_passes() {
        let report = run(&GradcheckOptions {
            sizes: vec![1],
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let report = run(&GradcheckOptions {
            sizes: vec![4, 16],
            corrupt_gradient: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.offenders().iter().all(|c| c.name.contains("grad_r")));
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn frozen_layers_are_skipped() {
        let report = run(&GradcheckOptions {
            sizes: vec![4],
            ..Default::default()
        })
        .unwrap();
        let frozen: Vec<_> = report
            .checks
            .iter()
            .filter(|c| c.name.starts_with("net frozen-circ-dense"))
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(
            frozen,
            ["layer 1 circulant", "layer 2 dense", "input"]
                .map(|s| format!("net frozen-circ-dense 4 {s}"))
        );
    }

    #[test]
    fn rejects_bad_sizes() {
        for sizes in [vec![], vec![0], vec![65]] {
            let opts = GradcheckOptions {
                sizes,
                ..Default::default()
            };
            assert!(matches!(run(&opts), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_error(&[1.01], &[1.0]) - 0.01 / 1.01).abs() < 1e-12);
        // tiny entries are judged against the floor, not themselves
        assert!(max_relative_error(&[1.0, 1e-12], &[1.0, 3e-12]) < 1e-8);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], |p| Ok(p[0] * p[0] + 3.0 * p[1])).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
