//! Real-input FFT pair over the last axis.
//!
//! Forward transform is unnormalized; the inverse carries the `1/L` factor.
//! Plans come from `rustfft` (radix-2/mixed-radix with a Bluestein fallback)
//! and are cached per thread by length.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::tensor::{ComplexTensor, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Number of non-redundant bins for a real signal of length `len`.
pub fn half_bins(len: usize) -> usize {
    len / 2 + 1
}

/// Half-spectrum of one real sequence.
pub fn rfft(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = x.len();
    if len < 2 {
        return Err(Error::invalid(format!(
            "rfft needs at least 2 samples, got {len}"
        )));
    }
    let bins = half_bins(len);
    let mut re = vec![0.0; bins];
    let mut im = vec![0.0; bins];
    rfft_into(x, &plan(len, false), &mut re, &mut im);
    Ok((re, im))
}

/// Inverse of [`rfft`]; imaginary parts of the DC and (even-length) Nyquist
/// bins are ignored.
pub fn irfft(re: &[f64], im: &[f64], len: usize) -> Result<Vec<f64>> {
    if len < 2 || re.len() != half_bins(len) || im.len() != re.len() {
        return Err(Error::invalid(format!(
            "irfft: spectrum of {} bins is inconsistent with output length {len}",
            re.len()
        )));
    }
    let mut out = vec![0.0; len];
    irfft_into(re, im, &plan(len, true), &mut out);
    Ok(out)
}

fn rfft_into(x: &[f64], fft: &Arc<dyn Fft<f64>>, re: &mut [f64], im: &mut [f64]) {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    for k in 0..re.len() {
        re[k] = buf[k].re;
        im[k] = buf[k].im;
    }
    // Exact zeros where the transform of real input is real.
    im[0] = 0.0;
    if x.len() % 2 == 0 {
        im[x.len() / 2] = 0.0;
    }
}

fn irfft_into(re: &[f64], im: &[f64], fft: &Arc<dyn Fft<f64>>, out: &mut [f64]) {
    let len = out.len();
    let bins = re.len();
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    buf[0] = Complex64::new(re[0], 0.0);
    for k in 1..bins {
        let mut c = Complex64::new(re[k], im[k]);
        if 2 * k == len {
            c.im = 0.0;
        }
        buf[k] = c;
        if len - k != k {
            buf[len - k] = c.conj();
        }
    }
    fft.process(&mut buf);
    let inv = 1.0 / len as f64;
    for (o, c) in out.iter_mut().zip(&buf) {
        *o = c.re * inv;
    }
}

/// `rfft` applied to every row of the last axis.
pub fn rfft_last(x: &Tensor) -> Result<ComplexTensor> {
    let len = x.last_dim();
    if len < 2 {
        return Err(Error::invalid(format!(
            "rfft needs at least 2 samples, got {len}"
        )));
    }
    let bins = half_bins(len);
    let rows = x.len() / len;
    let mut re = vec![0.0; rows * bins];
    let mut im = vec![0.0; rows * bins];
    let fft = plan(len, false);
    for r in 0..rows {
        rfft_into(
            &x.data()[r * len..(r + 1) * len],
            &fft,
            &mut re[r * bins..(r + 1) * bins],
            &mut im[r * bins..(r + 1) * bins],
        );
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = bins;
    ComplexTensor::new(shape, re, im)
}

/// `irfft` applied to every row of the last axis, producing `len` samples each.
pub fn irfft_last(x: &ComplexTensor, len: usize) -> Result<Tensor> {
    let bins = x.last_dim();
    if len < 2 || bins != half_bins(len) {
        return Err(Error::invalid(format!(
            "irfft: spectrum of {bins} bins is inconsistent with output length {len}"
        )));
    }
    let rows = x.len() / bins;
    let mut out = vec![0.0; rows * len];
    let fft = plan(len, true);
    for r in 0..rows {
        irfft_into(
            &x.re()[r * bins..(r + 1) * bins],
            &x.im()[r * bins..(r + 1) * bins],
            &fft,
            &mut out[r * len..(r + 1) * len],
        );
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..half_bins(n))
            .map(|k| {
                let mut acc = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    acc.0 += v * ang.cos();
                    acc.1 += v * ang.sin();
                }
                acc
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let (re, im) = rfft(&[1.0; 4]).unwrap();
        assert_eq!(re, vec![4.0, 0.0, 0.0]);
        assert_eq!(im, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn alternating_signal_is_nyquist_only() {
        let (re, im) = rfft(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(re, vec![0.0, 0.0, 4.0]);
        assert_eq!(im, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_signal_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (re, im) = rfft(&x).unwrap();
        for (k, (r, i)) in naive_dft(&x).into_iter().enumerate() {
            let scale = r.hypot(i).max(1.0);
            assert!((re[k] - r).abs() / scale < 1e-10);
            assert!((im[k] - i).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(rfft(&[1.0]).is_err());
        assert!(irfft(&[1.0, 0.0], &[0.0, 0.0], 4).is_err());
    }

    #[test]
    fn inverse_examples() {
        let x = irfft(&[4.0, 0.0, 0.0], &[0.0; 3], 4).unwrap();
        assert_eq!(x, vec![1.0; 4]);
        let y = irfft(&[0.0, 2.0, 0.0], &[0.0; 3], 4).unwrap();
        let want = [1.0, 0.0, -1.0, 0.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (re, im) = rfft(&x).unwrap();
        let back = irfft(&re, &im, 16).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }
}
