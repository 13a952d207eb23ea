//! Dense baseline layer, activations, and the layer stack with a softmax
//! cross-entropy head.

mod dense;

use std::fmt;

pub use dense::{DenseCache, DenseGradients, DenseLayer};

use crate::circulant::{CirculantCache, CirculantLayer, Mode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => {
                let mut out = pre.clone();
                for v in out.as_mut_slice() {
                    *v = v.max(0.0);
                }
                out
            }
        }
    }

    /// Multiplies `grad` by `φ'(pre)` in place. `relu'(0)` is 0.
    pub fn backprop(self, pre: &Matrix, grad: &mut Matrix) {
        if self == Activation::Relu {
            for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Argument(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Linear {
    Dense(DenseLayer),
    Circulant(CirculantLayer),
}

impl Linear {
    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(l) => l.d_in(),
            Linear::Circulant(l) => l.d_in(),
        }
    }

    pub fn k_out(&self) -> usize {
        match self {
            Linear::Dense(l) => l.k_out(),
            Linear::Circulant(l) => l.k_out(),
        }
    }

    /// `(floats, sign entries)`.
    pub fn param_count(&self) -> (usize, usize) {
        match self {
            Linear::Dense(l) => (l.param_count(), 0),
            Linear::Circulant(l) => l.param_count(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, Linear::Circulant(l) if l.mode() == Mode::Randomized)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(l) => l.apply(x),
            Linear::Circulant(l) => l.forward(x).map(|(y, _)| y),
        }
    }

    fn describe(&self) -> String {
        match self {
            Linear::Dense(l) => format!("dense {}->{}", l.d_in(), l.k_out()),
            Linear::Circulant(l) => format!("circulant {}->{}", l.d_in(), l.k_out()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub linear: Linear,
    pub activation: Activation,
}

impl Stage {
    pub fn new(linear: Linear, activation: Activation) -> Self {
        Stage { linear, activation }
    }
}

/// What kind of linear map a [`LayerSpec`] builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Circulant { mode: Mode, sign_flip: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub d_in: usize,
    pub k_out: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl LayerSpec {
    pub fn build(&self) -> Result<Stage> {
        let linear = match self.kind {
            LayerKind::Dense => Linear::Dense(DenseLayer::new(self.d_in, self.k_out, self.seed)?),
            LayerKind::Circulant { mode, sign_flip } => {
                let l = CirculantLayer::new(self.d_in, self.k_out, mode, self.seed)?;
                Linear::Circulant(if sign_flip { l } else { l.without_sign_flip() })
            }
        };
        Ok(Stage::new(linear, self.activation))
    }
}

#[derive(Debug, Clone)]
enum LinearCache {
    Dense(DenseCache),
    Circulant(CirculantCache),
}

#[derive(Debug, Clone)]
struct StageCache {
    linear: LinearCache,
    pre: Matrix,
}

/// Output of [`Network::forward`]; feed it back to [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Mean cross-entropy, present when labels were given.
    pub loss: Option<f64>,
    pub probs: Matrix,
    caches: Vec<StageCache>,
    labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense(Matrix),
    Circulant(Vec<f64>),
    /// Randomized circulant layer; receives no update.
    Frozen,
}

impl LayerGrad {
    pub fn as_slice(&self) -> Option<&[f64]> {
        match self {
            LayerGrad::Dense(m) => Some(m.as_slice()),
            LayerGrad::Circulant(v) => Some(v),
            LayerGrad::Frozen => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<LayerGrad>,
    pub input: Option<Matrix>,
}

/// Ordered stack of linear layers and activations ending in softmax
/// cross-entropy over `classes()` outputs.
#[derive(Debug, Clone)]
pub struct Network {
    stages: Vec<Stage>,
}

impl Network {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        for (i, pair) in stages.windows(2).enumerate() {
            let (a, b) = (&pair[0].linear, &pair[1].linear);
            if a.k_out() != b.d_in() {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) outputs {} values but layer {} ({}) expects {}",
                    a.describe(),
                    a.k_out(),
                    i + 1,
                    b.describe(),
                    b.d_in()
                )));
            }
        }
        Ok(Network { stages })
    }

    pub fn from_specs(specs: &[LayerSpec]) -> Result<Self> {
        Network::new(specs.iter().map(LayerSpec::build).collect::<Result<_>>()?)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].linear.d_in()
    }

    pub fn classes(&self) -> usize {
        self.stages[self.stages.len() - 1].linear.k_out()
    }

    /// Per-layer `(floats, sign entries)`.
    pub fn param_counts(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| s.linear.param_count()).collect()
    }

    pub fn total_floats(&self) -> usize {
        self.param_counts().iter().map(|c| c.0).sum()
    }

    /// Logits for a batch, without caches.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.activation.apply(&stage.linear.apply(&h)?);
        }
        Ok(h)
    }

    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn forward(&self, x: &Matrix, labels: Option<&[usize]>) -> Result<ForwardPass> {
        if let Some(labels) = labels {
            if labels.len() != x.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    x.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes()) {
                return Err(Error::Label {
                    label: bad,
                    classes: self.classes(),
                });
            }
        }
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let (pre, linear) = match &stage.linear {
                Linear::Dense(l) => {
                    let (y, c) = l.forward(&h)?;
                    (y, LinearCache::Dense(c))
                }
                Linear::Circulant(l) => {
                    let (y, c) = l.forward(&h)?;
                    (y, LinearCache::Circulant(c))
                }
            };
            h = stage.activation.apply(&pre);
            caches.push(StageCache { linear, pre });
        }
        let probs = softmax(&h);
        let loss = labels.map(|l| cross_entropy(&h, l));
        Ok(ForwardPass {
            loss,
            probs,
            caches,
            labels: labels.map(<[usize]>::to_vec),
        })
    }

    /// Gradients of the mean loss. The input gradient is computed only when
    /// `need_input` is set.
    pub fn backward(&self, pass: &ForwardPass, need_input: bool) -> Result<NetGradients> {
        let labels = pass
            .labels
            .as_ref()
            .ok_or_else(|| Error::State("forward pass ran without labels".into()))?;
        if pass.caches.len() != self.stages.len() {
            return Err(Error::State(
                "forward pass belongs to a different network".into(),
            ));
        }
        let batch = pass.probs.rows();
        let scale = 1.0 / batch as f64;
        let mut delta = pass.probs.clone();
        for (b, &label) in labels.iter().enumerate() {
            delta[(b, label)] -= 1.0;
        }
        for v in delta.as_mut_slice() {
            *v *= scale;
        }

        let mut grads = vec![LayerGrad::Frozen; self.stages.len()];
        for (i, (stage, cache)) in self.stages.iter().zip(&pass.caches).enumerate().rev() {
            stage.activation.backprop(&cache.pre, &mut delta);
            let want_input = i > 0 || need_input;
            let (grad, input) = match (&stage.linear, &cache.linear) {
                (Linear::Dense(l), LinearCache::Dense(c)) => {
                    let g = l.backward_with(&delta, c, want_input)?;
                    (LayerGrad::Dense(g.grad_w), g.grad_input)
                }
                (Linear::Circulant(l), LinearCache::Circulant(c)) => {
                    let g = l.backward_with(&delta, c, want_input)?;
                    let grad = if l.mode() == Mode::Randomized {
                        LayerGrad::Frozen
                    } else {
                        LayerGrad::Circulant(g.grad_r)
                    };
                    (grad, g.grad_input)
                }
                _ => return Err(Error::State(format!("cache kind mismatch at layer {i}"))),
            };
            grads[i] = grad;
            match input {
                Some(d) => delta = d,
                None => {
                    return Ok(NetGradients {
                        layers: grads,
                        input: None,
                    })
                }
            }
        }
        Ok(NetGradients {
            layers: grads,
            input: Some(delta),
        })
    }

    /// Adds `step` to layer `index`'s trainable parameters.
    pub fn apply_update(&mut self, index: usize, step: &[f64]) -> Result<()> {
        match &mut self.stages[index].linear {
            Linear::Dense(l) => l.apply_update(step),
            Linear::Circulant(l) => l.apply_update(step),
        }
    }

    pub fn params(&self, index: usize) -> &[f64] {
        match &self.stages[index].linear {
            Linear::Dense(l) => l.weights().as_slice(),
            Linear::Circulant(l) => l.params(),
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{} {}", s.linear.describe(), s.activation.name()))
            .collect();
        write!(f, "{}", parts.join(" | "))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for b in 0..out.rows() {
        let row = out.row_mut(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean of `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / labels.len() as f64
}
