//! Circulant fully-connected layer with random sign flipping.
//!
//! The weight matrix is `R·D` where `R = circ(r)` has `r` as its first column
//! and every later column rotated down by one, and `D` is a fixed diagonal of
//! ±1 entries. `R` is never materialized: `R·z` is the circular convolution
//! `r ⊛ z`, evaluated through the DFT in O(n log n).
//!
//! Inputs with `d_in < n` are zero-padded and outputs are truncated to the
//! first `k_out` entries, where `n = next_pow2(max(d_in, k_out))`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fft::{self, ComplexSpectrum};
use crate::matrix::Matrix;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_layer_id() -> u64 {
    NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `r` is learned; initialized from N(0, 1/n).
    Trained,
    /// `r` is drawn from N(0, 1) and frozen.
    Randomized,
}

/// Diagonal of the sign-flipping matrix `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignVector {
    signs: Vec<f64>,
    seed: u64,
    flipping: bool,
}

impl SignVector {
    /// Independent fair ±1 draws, reproducible from `seed`.
    pub fn rademacher(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let signs = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        SignVector {
            signs,
            seed,
            flipping: true,
        }
    }

    /// All +1, i.e. `D = I`. Used to ablate the sign flip.
    pub fn identity(n: usize) -> Self {
        SignVector {
            signs: vec![1.0; n],
            seed: 0,
            flipping: false,
        }
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_flipping(&self) -> bool {
        self.flipping
    }
}

#[derive(Debug)]
pub struct CirculantLayer {
    r: Vec<f64>,
    signs: SignVector,
    d_in: usize,
    k_out: usize,
    n: usize,
    mode: Mode,
    spectrum: OnceLock<ComplexSpectrum>,
    id: u64,
    version: u64,
}

impl Clone for CirculantLayer {
    fn clone(&self) -> Self {
        CirculantLayer {
            r: self.r.clone(),
            signs: self.signs.clone(),
            d_in: self.d_in,
            k_out: self.k_out,
            n: self.n,
            mode: self.mode,
            spectrum: self.spectrum.clone(),
            id: fresh_layer_id(),
            version: 0,
        }
    }
}

/// Per-sample state saved by [`CirculantLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct CirculantCache {
    /// Rows are `z = D·pad(x)`, length `n`.
    pub z: Matrix,
    /// `dft(z)` per row, `n` bins each, concatenated.
    z_spectra: Vec<Complex64>,
    layer_id: u64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    /// Summed over the batch.
    pub grad_r: Vec<f64>,
    /// `batch × d_in`; absent when the caller asked to skip it.
    pub grad_input: Option<Matrix>,
}

impl CirculantLayer {
    pub fn new(d_in: usize, k_out: usize, mode: Mode, seed: u64) -> Result<Self> {
        if d_in == 0 || k_out == 0 {
            return Err(Error::Argument(format!(
                "circulant layer dims must be positive, got {d_in}->{k_out}"
            )));
        }
        let n = fft::next_pow2(d_in.max(k_out));
        let std = match mode {
            Mode::Trained => (1.0 / n as f64).sqrt(),
            Mode::Randomized => 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(CirculantLayer {
            r,
            signs: SignVector::rademacher(n, seed),
            d_in,
            k_out,
            n,
            mode,
            spectrum: OnceLock::new(),
            id: fresh_layer_id(),
            version: 0,
        })
    }

    /// Rebuilds a layer from stored parameters.
    pub fn from_parts(
        d_in: usize,
        k_out: usize,
        mode: Mode,
        r: Vec<f64>,
        signs: SignVector,
    ) -> Result<Self> {
        if d_in == 0 || k_out == 0 {
            return Err(Error::Argument(format!(
                "circulant layer dims must be positive, got {d_in}->{k_out}"
            )));
        }
        let n = fft::next_pow2(d_in.max(k_out));
        if r.len() != n || signs.len() != n {
            return Err(Error::Shape(format!(
                "layer {d_in}->{k_out} needs {n} parameters and signs, got {} and {}",
                r.len(),
                signs.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("circulant parameters must be finite".into()));
        }
        Ok(CirculantLayer {
            r,
            signs,
            d_in,
            k_out,
            n,
            mode,
            spectrum: OnceLock::new(),
            id: fresh_layer_id(),
            version: 0,
        })
    }

    /// Replaces `D` with the identity.
    pub fn without_sign_flip(mut self) -> Self {
        self.signs = SignVector::identity(self.n);
        self
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn k_out(&self) -> usize {
        self.k_out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &[f64] {
        &self.r
    }

    pub fn signs(&self) -> &SignVector {
        &self.signs
    }

    /// The stored `dft(r)`, if a forward pass has filled it since the last update.
    pub fn cached_spectrum(&self) -> Option<&ComplexSpectrum> {
        self.spectrum.get()
    }

    fn spectrum(&self) -> &ComplexSpectrum {
        self.spectrum
            .get_or_init(|| fft::dft(&self.r).expect("r is finite with power-of-two length"))
    }

    /// `(floats, sign entries)`; `n` floats for `r` and `n` booleans for `D`.
    pub fn param_count(&self) -> (usize, usize) {
        let sign_bits = if self.signs.is_flipping() { self.n } else { 0 };
        (self.n, sign_bits)
    }

    /// Pre-activations `R·D·pad(x)`, truncated to `k_out` columns.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, CirculantCache)> {
        if x.cols() != self.d_in {
            return Err(Error::Shape(format!(
                "circulant layer expects {} inputs, got {}",
                self.d_in,
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Data("circulant layer input is not finite".into()));
        }
        let n = self.n;
        let r_hat = self.spectrum().bins();
        let signs = self.signs.as_slice();
        let batch = x.rows();
        let mut out = Matrix::zeros(batch, self.k_out);
        let mut z = Matrix::zeros(batch, n);
        let mut z_spectra = Vec::with_capacity(batch * n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];

        for b in 0..batch {
            let zr = z.row_mut(b);
            for ((zi, &xi), &s) in zr.iter_mut().zip(x.row(b)).zip(signs) {
                *zi = s * xi;
            }
            for (c, &v) in buf.iter_mut().zip(zr.iter()) {
                *c = Complex64::new(v, 0.0);
            }
            fft::transform_in_place(&mut buf, false);
            z_spectra.extend_from_slice(&buf);
            for (c, rh) in buf.iter_mut().zip(r_hat) {
                *c *= rh;
            }
            fft::transform_in_place(&mut buf, true);
            check_residue(&buf)?;
            for (o, c) in out.row_mut(b).iter_mut().zip(&buf) {
                *o = c.re;
            }
        }

        Ok((
            out,
            CirculantCache {
                z,
                z_spectra,
                layer_id: self.id,
                version: self.version,
            },
        ))
    }

    pub fn backward(&self, upstream: &Matrix, cache: &CirculantCache) -> Result<LayerGradients> {
        self.backward_with(upstream, cache, true)
    }

    /// `grad_r = Σ_b circ_corr(z_b, δ_b)` and, if requested,
    /// `grad_input_b = D·circ_corr(r, δ_b)` truncated to `d_in`, where `δ_b`
    /// is the upstream row zero-padded to `n`.
    pub fn backward_with(
        &self,
        upstream: &Matrix,
        cache: &CirculantCache,
        need_input: bool,
    ) -> Result<LayerGradients> {
        self.check_cache(cache)?;
        if upstream.cols() != self.k_out || upstream.rows() != cache.z.rows() {
            return Err(Error::Shape(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.z.rows(),
                self.k_out
            )));
        }
        let n = self.n;
        let r_hat = self.spectrum().bins();
        let signs = self.signs.as_slice();
        let batch = upstream.rows();
        let mut grad_r = vec![0.0; n];
        let mut grad_input = need_input.then(|| Matrix::zeros(batch, self.d_in));
        let mut delta = vec![Complex64::new(0.0, 0.0); n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];

        for b in 0..batch {
            delta.fill(Complex64::new(0.0, 0.0));
            for (c, &u) in delta.iter_mut().zip(upstream.row(b)) {
                c.re = u;
            }
            fft::transform_in_place(&mut delta, false);

            let z_hat = &cache.z_spectra[b * n..(b + 1) * n];
            for ((c, zh), dh) in buf.iter_mut().zip(z_hat).zip(&delta) {
                *c = zh.conj() * dh;
            }
            fft::transform_in_place(&mut buf, true);
            check_residue(&buf)?;
            for (g, c) in grad_r.iter_mut().zip(&buf) {
                *g += c.re;
            }

            if let Some(gi) = grad_input.as_mut() {
                for ((c, rh), dh) in buf.iter_mut().zip(r_hat).zip(&delta) {
                    *c = rh.conj() * dh;
                }
                fft::transform_in_place(&mut buf, true);
                check_residue(&buf)?;
                for ((g, c), &s) in gi.row_mut(b).iter_mut().zip(&buf).zip(signs) {
                    *g = s * c.re;
                }
            }
        }

        Ok(LayerGradients { grad_r, grad_input })
    }

    fn check_cache(&self, cache: &CirculantCache) -> Result<()> {
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
        if cache.z.cols() != self.n || cache.z_spectra.len() != cache.z.rows() * self.n {
            return Err(Error::State("cache has the wrong internal size".into()));
        }
        Ok(())
    }

    /// `r ← r + step`. Randomized layers are frozen and refuse updates.
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        if self.mode == Mode::Randomized {
            return Err(Error::Mode("randomized circulant layers are frozen".into()));
        }
        if step.len() != self.n {
            return Err(Error::Shape(format!(
                "update has {} entries, layer has {}",
                step.len(),
                self.n
            )));
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("update contains non-finite values".into()));
        }
        for (p, s) in self.r.iter_mut().zip(step) {
            *p += s;
        }
        self.spectrum = OnceLock::new();
        self.version += 1;
        Ok(())
    }

    /// The `k_out × d_in` dense matrix this layer applies, `W[i][j] = r[(i−j) mod n]·s[j]`.
    pub fn to_dense(&self) -> Matrix {
        let n = self.n;
        let signs = self.signs.as_slice();
        let mut w = Matrix::zeros(self.k_out, self.d_in);
        for i in 0..self.k_out {
            for (j, wij) in w.row_mut(i).iter_mut().enumerate() {
                *wij = self.r[(i + n - j) % n] * signs[j];
            }
        }
        w
    }
}

fn check_residue(buf: &[Complex64]) -> Result<()> {
    let residue = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue.is_nan() || residue >= fft::IMAG_RESIDUE_LIMIT {
        return Err(Error::NumericalConsistency {
            residue,
            limit: fft::IMAG_RESIDUE_LIMIT,
        });
    }
    Ok(())
}
