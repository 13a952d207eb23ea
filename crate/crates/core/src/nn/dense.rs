use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::circulant::fresh_layer_id;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

/// Unstructured `k_out × d_in` projection, no bias.
#[derive(Debug)]
pub struct DenseLayer {
    w: Matrix,
    id: u64,
    version: u64,
}

impl Clone for DenseLayer {
    fn clone(&self) -> Self {
        DenseLayer {
            w: self.w.clone(),
            id: fresh_layer_id(),
            version: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Matrix,
    layer_id: u64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct DenseGradients {
    pub grad_w: Matrix,
    pub grad_input: Option<Matrix>,
}

impl DenseLayer {
    /// Weights drawn from N(0, 1/d_in).
    pub fn new(d_in: usize, k_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || k_out == 0 {
            return Err(Error::Argument(format!(
                "dense layer dims must be positive, got {d_in}->{k_out}"
            )));
        }
        let std = (1.0 / d_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..d_in * k_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_matrix(Matrix::from_vec(k_out, d_in, data)?)
    }

    pub fn from_matrix(w: Matrix) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(Error::Argument("dense layer dims must be positive".into()));
        }
        if !w.is_finite() {
            return Err(Error::Data("dense weights must be finite".into()));
        }
        Ok(DenseLayer {
            w,
            id: fresh_layer_id(),
            version: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn k_out(&self) -> usize {
        self.w.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Data("dense layer input is not finite".into()));
        }
        Ok(())
    }

    /// `x·Wᵀ` without keeping a cache.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut out = Matrix::zeros(x.rows(), self.k_out());
        let k = self.k_out();
        for o in 0..k {
            let w_row = self.w.row(o);
            for b in 0..x.rows() {
                out[(b, o)] = dot(x.row(b), w_row);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, DenseCache)> {
        let out = self.apply(x)?;
        Ok((
            out,
            DenseCache {
                input: x.clone(),
                layer_id: self.id,
                version: self.version,
            },
        ))
    }

    pub fn backward(&self, upstream: &Matrix, cache: &DenseCache) -> Result<DenseGradients> {
        self.backward_with(upstream, cache, true)
    }

    /// `grad_W = Σ_b δ_bᵀ·x_b` (accumulated in sample order) and `grad_input = δ·W`.
    pub fn backward_with(
        &self,
        upstream: &Matrix,
        cache: &DenseCache,
        need_input: bool,
    ) -> Result<DenseGradients> {
        self.check_cache(upstream, cache)?;
        let x = &cache.input;
        let batch = upstream.rows();
        let mut grad_w = Matrix::zeros(self.k_out(), self.d_in());
        for o in 0..self.k_out() {
            let g_row = grad_w.row_mut(o);
            for b in 0..batch {
                let d = upstream[(b, o)];
                if d != 0.0 {
                    axpy(d, x.row(b), g_row);
                }
            }
        }
        let grad_input = need_input.then(|| self.input_gradient(upstream));
        Ok(DenseGradients { grad_w, grad_input })
    }

    fn input_gradient(&self, upstream: &Matrix) -> Matrix {
        let batch = upstream.rows();
        let mut gi = Matrix::zeros(batch, self.d_in());
        for o in 0..self.k_out() {
            let w_row = self.w.row(o);
            for b in 0..batch {
                let d = upstream[(b, o)];
                if d != 0.0 {
                    axpy(d, w_row, gi.row_mut(b));
                }
            }
        }
        gi
    }

    fn check_cache(&self, upstream: &Matrix, cache: &DenseCache) -> Result<()> {
        if cache.layer_id != self.id {
            return Err(Error::State(
                "cache was produced by a different layer".into(),
            ));
        }
        if cache.version != self.version {
            return Err(Error::State(
                "cache is stale: parameters changed after the forward pass".into(),
            ));
        }
        if upstream.cols() != self.k_out() || upstream.rows() != cache.input.rows() {
            return Err(Error::Shape(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.input.rows(),
                self.k_out()
            )));
        }
        Ok(())
    }

    /// `W ← W + step`, `step` in the same row-major layout as the weights.
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        if step.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "update has {} entries, layer has {}",
                step.len(),
                self.param_count()
            )));
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("update contains non-finite values".into()));
        }
        for (w, s) in self.w.as_mut_slice().iter_mut().zip(step) {
            *w += s;
        }
        self.version += 1;
        Ok(())
    }

    /// Backward and a plain SGD update fused into one sweep over `W`, so no
    /// separate gradient matrix is allocated. Returns the input gradient,
    /// computed with the weights as they were before the update.
    pub fn sgd_backward_in_place(
        &mut self,
        upstream: &Matrix,
        cache: &DenseCache,
        lr: f64,
    ) -> Result<Matrix> {
        self.check_cache(upstream, cache)?;
        let grad_input = self.input_gradient(upstream);
        let x = &cache.input;
        for o in 0..self.k_out() {
            let w_row = self.w.row_mut(o);
            for b in 0..upstream.rows() {
                let d = upstream[(b, o)];
                if d != 0.0 {
                    axpy(-lr * d, x.row(b), w_row);
                }
            }
        }
        self.version += 1;
        Ok(grad_input)
    }
}
