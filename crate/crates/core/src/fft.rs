//! Power-of-two discrete Fourier transforms and the circular convolution /
//! correlation primitives built on them.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[j] = Σ_t x[t]·exp(−2πi·jt/n)`, and the inverse carries the `1/n`.
//! Transforms are iterative radix-2 Cooley–Tukey with a bit-reversal
//! permutation. Twiddles and permutation tables are computed once per size
//! and shared through a process-wide cache.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest imaginary component tolerated when inverting a spectrum that
/// should belong to a real signal.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

/// Smallest power of two that is `>= m`. `next_pow2(0)` is 1.
pub fn next_pow2(m: usize) -> usize {
    m.max(1).next_power_of_two()
}

/// Frequency-domain representation of a length-`n` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    bins: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn from_bins(bins: Vec<Complex64>) -> Self {
        ComplexSpectrum { bins }
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Length(format!(
                "real part has {} entries, imaginary part {}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexSpectrum {
            bins: re
                .iter()
                .zip(im)
                .map(|(&r, &i)| Complex64::new(r, i))
                .collect(),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    #[inline]
    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn re(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.im).collect()
    }

    /// Elementwise product `self ∘ other`.
    pub fn mul(&self, other: &ComplexSpectrum) -> Result<ComplexSpectrum> {
        check_same_len(self.len(), other.len())?;
        Ok(ComplexSpectrum {
            bins: self
                .bins
                .iter()
                .zip(&other.bins)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// Elementwise product `conj(self) ∘ other`.
    pub fn conj_mul(&self, other: &ComplexSpectrum) -> Result<ComplexSpectrum> {
        check_same_len(self.len(), other.len())?;
        Ok(ComplexSpectrum {
            bins: self
                .bins
                .iter()
                .zip(&other.bins)
                .map(|(a, b)| a.conj() * b)
                .collect(),
        })
    }

    /// Largest deviation from `X[n−j] = conj(X[j])`.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let n = self.len();
        (1..n)
            .map(|j| (self.bins[n - j] - self.bins[j].conj()).norm())
            .fold(0.0, f64::max)
    }
}

struct Plan {
    /// `exp(−2πi·k/n)` for `k < n/2`.
    twiddles: Vec<Complex64>,
    bit_reverse: Vec<u32>,
}

impl Plan {
    fn new(n: usize) -> Plan {
        let bits = n.trailing_zeros();
        let twiddles = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        let bit_reverse = (0..n as u32)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (32 - bits)
                }
            })
            .collect();
        Plan {
            twiddles,
            bit_reverse,
        }
    }
}

fn plan_for(n: usize) -> Arc<Plan> {
    static PLANS: OnceLock<RwLock<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(p) = plans.read().unwrap_or_else(|e| e.into_inner()).get(&n) {
        return Arc::clone(p);
    }
    let mut guard = plans.write().unwrap_or_else(|e| e.into_inner());
    Arc::clone(guard.entry(n).or_insert_with(|| Arc::new(Plan::new(n))))
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Length(format!("length {n} is not a power of two")));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Length(format!("operand lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// In-place transform of a power-of-two buffer. The inverse applies `1/n`.
pub(crate) fn transform_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n == 1 {
        return;
    }
    let plan = plan_for(n);
    for (i, &j) in plan.bit_reverse.iter().enumerate() {
        let j = j as usize;
        if i < j {
            buf.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for block in buf.chunks_exact_mut(len) {
            let (lo, hi) = block.split_at_mut(half);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let mut w = plan.twiddles[k * stride];
                if inverse {
                    w = w.conj();
                }
                let t = *b * w;
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward DFT of a real signal whose length is a power of two.
pub fn dft(x: &[f64]) -> Result<ComplexSpectrum> {
    check_pow2(x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("signal contains non-finite values".into()));
    }
    let mut bins: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_in_place(&mut bins, false);
    Ok(ComplexSpectrum { bins })
}

/// Inverse DFT back to a real signal. Fails if the spectrum is not
/// conjugate-symmetric enough to describe one.
pub fn idft(spectrum: &ComplexSpectrum) -> Result<Vec<f64>> {
    let mut bins = spectrum.bins.clone();
    check_pow2(bins.len())?;
    transform_in_place(&mut bins, true);
    real_part(bins)
}

pub(crate) fn real_part(bins: Vec<Complex64>) -> Result<Vec<f64>> {
    let residue = bins.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue.is_nan() || residue >= IMAG_RESIDUE_LIMIT {
        return Err(Error::NumericalConsistency {
            residue,
            limit: IMAG_RESIDUE_LIMIT,
        });
    }
    Ok(bins.into_iter().map(|c| c.re).collect())
}

/// Inverse transform of an owned spectrum, skipping the copy `idft` makes.
pub(crate) fn idft_owned(spectrum: ComplexSpectrum) -> Result<Vec<f64>> {
    let mut bins = spectrum.bins;
    check_pow2(bins.len())?;
    transform_in_place(&mut bins, true);
    real_part(bins)
}

/// Circular convolution `c[i] = Σ_j a[j]·b[(i−j) mod n]`.
pub fn circ_conv(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_same_len(a.len(), b.len())?;
    idft_owned(dft(a)?.mul(&dft(b)?)?)
}

/// Circular correlation `c[i] = Σ_j a[j]·b[(i+j) mod n]`, the adjoint of
/// convolution by `a`. Equal to `circ_conv(s→1(rev(a)), b)`.
pub fn circ_corr(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_same_len(a.len(), b.len())?;
    idft_owned(dft(a)?.conj_mul(&dft(b)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n²) summation.
    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|j| {
                x.iter()
                    .enumerate()
                    .fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                        let angle = -2.0 * std::f64::consts::PI * ((j * t) % n) as f64 / n as f64;
                        acc + Complex64::from_polar(v, angle)
                    })
            })
            .collect()
    }

    fn naive_conv(a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| a[j] * b[(i + n - j) % n]).sum())
            .collect()
    }

    fn naive_corr(a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| a[j] * b[(i + j) % n]).sum())
            .collect()
    }

    fn shift_right_of_reverse(a: &[f64]) -> Vec<f64> {
        let n = a.len();
        let rev: Vec<f64> = a.iter().rev().copied().collect();
        (0..n).map(|i| rev[(i + n - 1) % n]).collect()
    }

    fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn next_pow2_examples() {
        assert_eq!(next_pow2(1), 1);
        assert_eq!(next_pow2(4096), 4096);
        assert_eq!(next_pow2(3000), 4096);
        assert_eq!(next_pow2(784), 1024);
        assert_eq!(next_pow2(5), 8);
    }

    #[test]
    fn delta_transforms_to_constant() {
        let s = dft(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.re(), vec![1.0; 4]);
        assert_eq!(s.im(), vec![0.0; 4]);
    }

    #[test]
    fn constant_transforms_to_scaled_delta() {
        let s = dft(&[1.0; 4]).unwrap();
        assert_eq!(s.re(), vec![4.0, 0.0, 0.0, 0.0]);
        assert!(s.im().iter().all(|v| v.abs() < 1e-15));
        let back =
            idft(&ComplexSpectrum::from_parts(&[4.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap()).unwrap();
        assert_eq!(back, vec![1.0; 4]);
    }

    #[test]
    fn dft_matches_brute_force_at_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_signal(&mut rng, 16);
        let fast = dft(&x).unwrap();
        for (a, b) in fast.bins().iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_small_and_64() {
        let x = [3.0, 1.0, 4.0, 1.0];
        let back = idft(&dft(&x).unwrap()).unwrap();
        assert!(max_abs(&back, &x) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let x = random_signal(&mut rng, 64);
        let back = idft(&dft(&x).unwrap()).unwrap();
        assert!(max_abs(&back, &x) < 1e-10);
    }

    #[test]
    fn length_one_is_identity() {
        assert_eq!(dft(&[2.5]).unwrap().re(), vec![2.5]);
        assert_eq!(circ_conv(&[2.0], &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(matches!(dft(&[1.0, 2.0, 3.0]), Err(Error::Length(_))));
        assert!(matches!(dft(&[]), Err(Error::Length(_))));
        assert!(matches!(
            circ_conv(&[1.0; 4], &[1.0; 8]),
            Err(Error::Length(_))
        ));
        assert!(matches!(
            circ_corr(&[1.0; 2], &[1.0; 4]),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn corrupted_spectrum_is_reported() {
        // A lone imaginary bin at j=1 has no conjugate partner.
        let s = ComplexSpectrum::from_parts(&[0.0; 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(idft(&s), Err(Error::NumericalConsistency { .. })));
    }

    #[test]
    fn non_finite_signal_rejected() {
        assert!(matches!(dft(&[1.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn conv_examples() {
        assert_eq!(
            round(&circ_conv(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 0.0]).unwrap()),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(
            round(&circ_conv(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]).unwrap()),
            vec![1.0, 2.0, 1.0, 0.0]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_signal(&mut rng, 32);
        let b = random_signal(&mut rng, 32);
        assert!(max_abs(&circ_conv(&a, &b).unwrap(), &naive_conv(&a, &b)) < 1e-9);
    }

    #[test]
    fn corr_examples() {
        let b = [0.3, -2.0, 5.5, 1.25];
        assert!(max_abs(&circ_corr(&[1.0, 0.0, 0.0, 0.0], &b).unwrap(), &b) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_signal(&mut rng, 16);
        let b = random_signal(&mut rng, 16);
        let fast = circ_corr(&a, &b).unwrap();
        let via_conv = circ_conv(&shift_right_of_reverse(&a), &b).unwrap();
        assert!(max_abs(&fast, &via_conv) < 1e-10);
        assert!(max_abs(&fast, &naive_corr(&a, &b)) < 1e-10);
    }

    #[test]
    fn convolution_theorem_up_to_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(256);
        let mut n = 1;
        while n <= 256 {
            let a = random_signal(&mut rng, n);
            let b = random_signal(&mut rng, n);
            assert!(
                max_abs(&circ_conv(&a, &b).unwrap(), &naive_conv(&a, &b)) < 1e-9,
                "n={n}"
            );
            n *= 2;
        }
    }

    #[test]
    fn plan_cache_is_safe_under_concurrent_first_use() {
        let handles: Vec<_> = (0..8)
            .map(|t| {
                std::thread::spawn(move || {
                    let x: Vec<f64> = (0..512).map(|i| ((i * (t + 1)) % 7) as f64).collect();
                    idft(&dft(&x).unwrap())
                        .unwrap()
                        .iter()
                        .zip(&x)
                        .all(|(a, b)| (a - b).abs() < 1e-10)
                })
            })
            .collect();
        assert!(handles.into_iter().all(|h| h.join().unwrap()));
    }

    fn round(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| (x * 1e9).round() / 1e9).collect()
    }

    fn pow2_signal() -> impl Strategy<Value = Vec<f64>> {
        (0u32..9).prop_flat_map(|k| proptest::collection::vec(-10.0f64..10.0, 1usize << k))
    }

    proptest! {
        #[test]
        fn linearity(
            (x, y) in (0u32..8).prop_flat_map(|k| {
                let n = 1usize << k;
                (proptest::collection::vec(-10.0f64..10.0, n), proptest::collection::vec(-10.0f64..10.0, n))
            }),
            alpha in -10.0f64..10.0,
            beta in -10.0f64..10.0,
        ) {
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = dft(&combo).unwrap();
            let (fx, fy) = (dft(&x).unwrap(), dft(&y).unwrap());
            for ((l, a), b) in lhs.bins().iter().zip(fx.bins()).zip(fy.bins()) {
                prop_assert!((l - (a * alpha + b * beta)).norm() < 1e-9);
            }
        }

        #[test]
        fn parseval(x in pow2_signal()) {
            let n = x.len() as f64;
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 = dft(&x).unwrap().bins().iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
            prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1e-300));
        }

        #[test]
        fn conjugate_symmetry_of_real_input(x in pow2_signal()) {
            prop_assert!(dft(&x).unwrap().conjugate_symmetry_error() < 1e-9);
        }

        #[test]
        fn roundtrip(x in (0u32..11).prop_flat_map(|k| proptest::collection::vec(-1.0f64..1.0, 1usize << k))) {
            let back = idft(&dft(&x).unwrap()).unwrap();
            prop_assert!(max_abs(&back, &x) < 1e-10);
        }
    }
}
