//! Learnable Gaussian band-pass filter bank.
//!
//! Each filter has the difference-of-Gaussians response
//!
//! ```text
//! H(f) = exp(-(f - f1)² / 2σ²) - exp(-(f - f2)² / 2σ²)
//! ```
//!
//! evaluated at integer bin frequencies. The cutoffs come from two
//! unconstrained reals through nested sigmoids,
//! `f1 = f_nyq·s(a)` and `f2 = f1 + (f_nyq - f1)·s(b)`, so
//! `0 < f1 < f2 ≤ f_nyq` holds for any finite `a`, `b`.
//!
//! The bandwidth follows the input: `σ = σ0·(α/D0)·mean|X|²`, with `D0` the
//! band midpoint and the mean taken over all bins of all variables of one
//! sample, then clamped to `[σ_min, σ_max]`.
//!
//! Note that the literal response is positive around `f1` and negative
//! around `f2`; [`FilterMode::AbsDog`] takes its modulus instead.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndmath::tape::sigmoid;
use crate::ndmath::{ComplexTensor, Primitive, Tape, Tensor, Value, Var};
use crate::spectral::SpectrumBatch;

/// Margin kept between initial cutoffs and the ends of the sigmoid range.
const INIT_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    /// Literal difference of Gaussians.
    Dog,
    /// Modulus of the difference of Gaussians.
    AbsDog,
    /// Fixed rectangular bands tiling the spectrum; no learnable cutoffs.
    Rect,
}

impl FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dog" => Ok(FilterMode::Dog),
            "abs-dog" => Ok(FilterMode::AbsDog),
            "rect" => Ok(FilterMode::Rect),
            other => Err(Error::Config(format!(
                "unknown filter mode `{other}` (expected dog, abs-dog or rect)"
            ))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Dog => "dog",
            FilterMode::AbsDog => "abs-dog",
            FilterMode::Rect => "rect",
        })
    }
}

/// Resolved bandwidth settings shared by every filter of a bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthSettings {
    pub mode: FilterMode,
    pub sigma0: f64,
    pub alpha: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl BandwidthSettings {
    /// `σ0 = f_nyq / (2·E_max)`, `α = 1`, clamp `[0.5, f_nyq/2]`.
    pub fn defaults(e_max: usize, bins: usize) -> Self {
        let nyq = nyquist(bins);
        BandwidthSettings {
            mode: FilterMode::Dog,
            sigma0: nyq / (2.0 * e_max as f64),
            alpha: 1.0,
            sigma_min: 0.5,
            sigma_max: nyq / 2.0,
        }
    }

    pub fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(self.sigma_min, self.sigma_max)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma0 > 0.0
            && self.alpha > 0.0
            && self.sigma_min > 0.0
            && self.sigma_max >= self.sigma_min
            && [self.sigma0, self.alpha, self.sigma_min, self.sigma_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bandwidth settings {self:?}")))
        }
    }
}

/// Highest bin frequency for a half-spectrum of `bins` bins.
pub fn nyquist(bins: usize) -> f64 {
    (bins.max(2) - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBandpassFilter {
    pub a: f64,
    pub b: f64,
    pub sigma0: f64,
    pub alpha: f64,
}

impl GaussianBandpassFilter {
    /// `(f1, f2)` for the given Nyquist bin.
    pub fn cutoffs(&self, nyq: f64) -> (f64, f64) {
        cutoffs(self.a, self.b, nyq)
    }

    /// Band midpoint `D0`.
    pub fn center(&self, nyq: f64) -> f64 {
        let (f1, f2) = self.cutoffs(nyq);
        0.5 * (f1 + f2)
    }

    /// Unclamped bandwidth for a given mean spectral power.
    pub fn raw_sigma(&self, mean_power: f64, nyq: f64) -> f64 {
        self.sigma0 * self.alpha / self.center(nyq) * mean_power
    }
}

pub(crate) fn cutoffs(a: f64, b: f64, nyq: f64) -> (f64, f64) {
    let f1 = nyq * sigmoid(a);
    let f2 = f1 + (nyq - f1) * sigmoid(b);
    (f1, f2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub filters: Vec<GaussianBandpassFilter>,
    pub e_max: usize,
    pub bins: usize,
    pub settings: BandwidthSettings,
}

/// Sub-band spectra, shape `(E_max, B, V, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandBatch {
    pub values: ComplexTensor,
}

/// Difference-of-Gaussians response at bins `0..bins`.
pub fn response(filter: &GaussianBandpassFilter, sigma: f64, bins: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (f1, f2) = filter.cutoffs(nyquist(bins));
    Ok((0..bins).map(|f| dog(f as f64, f1, f2, sigma)).collect())
}

fn dog(f: f64, f1: f64, f2: f64, sigma: f64) -> f64 {
    let (d1, d2) = offsets(f, f1, f2);
    let s2 = 2.0 * sigma * sigma;
    (-d1 * d1 / s2).exp() - (-d2 * d2 / s2).exp()
}

/// `(f - f1, f - f2)` measured from the band midpoint, so both offsets have
/// equal magnitude at `(f1 + f2) / 2`.
fn offsets(f: f64, f1: f64, f2: f64) -> (f64, f64) {
    let u = f - 0.5 * (f1 + f2);
    let h = 0.5 * (f2 - f1);
    (u + h, u - h)
}

/// Difference-of-Gaussians response at a real frequency `f`.
pub fn response_at(filter: &GaussianBandpassFilter, sigma: f64, f: f64, bins: usize) -> f64 {
    let (f1, f2) = filter.cutoffs(nyquist(bins));
    dog(f, f1, f2, sigma)
}

/// Per-sample mean of `|X|²` over every bin of every variable.
pub fn mean_power(spec: &SpectrumBatch) -> Vec<f64> {
    let batch = spec.batch();
    let per = spec.values.len() / batch;
    (0..batch)
        .map(|b| {
            let r = &spec.values.re()[b * per..(b + 1) * per];
            let i = &spec.values.im()[b * per..(b + 1) * per];
            r.iter().zip(i).map(|(x, y)| x * x + y * y).sum::<f64>() / per as f64
        })
        .collect()
}

/// Clamped adaptive bandwidth, one value per sample.
pub fn adaptive_sigma(
    filter: &GaussianBandpassFilter,
    spec: &SpectrumBatch,
    settings: &BandwidthSettings,
) -> Vec<f64> {
    let nyq = nyquist(spec.bins());
    mean_power(spec)
        .into_iter()
        .map(|p| settings.clamp(filter.raw_sigma(p, nyq)))
        .collect()
}

/// Equal contiguous passbands tiling `(0, f_nyq]`.
pub fn init_bank(e_max: usize, bins: usize, settings: BandwidthSettings) -> Result<FilterBank> {
    if e_max == 0 {
        return Err(Error::invalid("e_max must be at least 1"));
    }
    let nyq = nyquist(bins);
    let width = nyq / e_max as f64;
    let clamp = |s: f64| s.clamp(INIT_MARGIN, 1.0 - INIT_MARGIN);
    let filters = (0..e_max)
        .map(|e| {
            let lo = e as f64 * width;
            let hi = (e + 1) as f64 * width;
            let sa = clamp(lo / nyq);
            let f1 = nyq * sa;
            let sb = clamp((hi - f1) / (nyq - f1));
            GaussianBandpassFilter {
                a: logit(sa),
                b: logit(sb),
                sigma0: settings.sigma0,
                alpha: settings.alpha,
            }
        })
        .collect();
    Ok(FilterBank {
        filters,
        e_max,
        bins,
        settings,
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rectangular band of expert `e`: bins `f` with `⌊f·E/F⌋ == e`.
pub fn rect_response(e: usize, e_max: usize, bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|f| if (f * e_max / bins).min(e_max - 1) == e { 1.0 } else { 0.0 })
        .collect()
}

impl FilterBank {
    pub fn nyquist(&self) -> f64 {
        nyquist(self.bins)
    }

    /// Response of filter `e` for each sample, shape `(B, F)`.
    pub fn responses(&self, e: usize, spec: &SpectrumBatch) -> Result<Tensor> {
        let batch = spec.batch();
        let rows: Vec<f64> = match self.settings.mode {
            FilterMode::Rect => {
                let row = rect_response(e, self.e_max, self.bins);
                (0..batch).flat_map(|_| row.iter().copied()).collect()
            }
            mode => {
                let filter = &self.filters[e];
                let mut out = Vec::with_capacity(batch * self.bins);
                for sigma in adaptive_sigma(filter, spec, &self.settings) {
                    let h = response(filter, sigma, self.bins)?;
                    if mode == FilterMode::AbsDog {
                        out.extend(h.into_iter().map(f64::abs));
                    } else {
                        out.extend(h);
                    }
                }
                out
            }
        };
        Tensor::new(vec![batch, self.bins], rows)
    }

    /// Filters `spec` through every band.
    pub fn apply(&self, spec: &SpectrumBatch) -> Result<SubbandBatch> {
        if spec.bins() != self.bins {
            return Err(Error::invalid(format!(
                "spectrum has {} bins, bank expects {}",
                spec.bins(),
                self.bins
            )));
        }
        let per = spec.values.len();
        let mut re = Vec::with_capacity(self.e_max * per);
        let mut im = Vec::with_capacity(self.e_max * per);
        for e in 0..self.e_max {
            let h = self.responses(e, spec)?;
            let band = filter_spectrum(&spec.values, &h)?;
            re.extend_from_slice(band.re());
            im.extend_from_slice(band.im());
        }
        let mut shape = vec![self.e_max];
        shape.extend_from_slice(spec.values.shape());
        Ok(SubbandBatch {
            values: ComplexTensor::new(shape, re, im)?,
        })
    }
}

/// `X[b,v,f] · h[b,f]`.
pub fn filter_spectrum(x: &ComplexTensor, h: &Tensor) -> Result<ComplexTensor> {
    let (batch, vars, bins) = x.dims3()?;
    if h.shape() != [batch, bins] {
        return Err(Error::invalid(format!(
            "response shape {:?} does not match spectrum {:?}",
            h.shape(),
            x.shape()
        )));
    }
    let mut out = ComplexTensor::zeros(x.shape());
    let (re, im) = out.parts_mut();
    for b in 0..batch {
        for v in 0..vars {
            let base = (b * vars + v) * bins;
            for f in 0..bins {
                let hv = h.data()[b * bins + f];
                re[base + f] = x.re()[base + f] * hv;
                im[base + f] = x.im()[base + f] * hv;
            }
        }
    }
    Ok(out)
}

/// Records the per-sample response of one filter on the tape.
///
/// Inputs are the scalar parameter nodes `a`, `b` and the per-sample mean
/// power `(B)`; the output has shape `(B, F)`. The clamp passes no gradient
/// outside `(σ_min, σ_max)`.
pub fn response_on_tape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    power: Var,
    bins: usize,
    settings: BandwidthSettings,
) -> Result<Var> {
    let av = tape.real(a)?.data()[0];
    let bv = tape.real(b)?.data()[0];
    let p = tape.real(power)?.clone();
    let op = ResponseOp {
        a,
        b,
        power,
        bins,
        settings,
    };
    let geo = op.geometry(av, bv);
    let mut out = Vec::with_capacity(p.len() * bins);
    for &pw in p.data() {
        let sigma = settings.clamp(geo.c * pw / geo.d0);
        for f in 0..bins {
            let h = dog(f as f64, geo.f1, geo.f2, sigma);
            out.push(if settings.mode == FilterMode::AbsDog { h.abs() } else { h });
        }
    }
    let value = Tensor::new(vec![p.len(), bins], out)?;
    Ok(tape.push(Value::Real(value), Box::new(op)))
}

#[derive(Debug)]
struct ResponseOp {
    a: Var,
    b: Var,
    power: Var,
    bins: usize,
    settings: BandwidthSettings,
}

struct Geometry {
    sa: f64,
    sb: f64,
    f1: f64,
    f2: f64,
    d0: f64,
    c: f64,
    nyq: f64,
}

impl ResponseOp {
    fn geometry(&self, a: f64, b: f64) -> Geometry {
        let nyq = nyquist(self.bins);
        let (sa, sb) = (sigmoid(a), sigmoid(b));
        let f1 = nyq * sa;
        let f2 = f1 + (nyq - f1) * sb;
        Geometry {
            sa,
            sb,
            f1,
            f2,
            d0: 0.5 * (f1 + f2),
            c: self.settings.sigma0 * self.settings.alpha,
            nyq,
        }
    }
}

impl Primitive for ResponseOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b, self.power]
    }

    fn backward(&self, tape: &Tape, _out: &Value, grad: &Value) -> Result<Vec<Option<Value>>> {
        let g = grad.real()?;
        let geo = self.geometry(tape.real(self.a)?.data()[0], tape.real(self.b)?.data()[0]);
        let power = tape.real(self.power)?;
        let abs_mode = self.settings.mode == FilterMode::AbsDog;

        let (mut g_f1, mut g_f2, mut g_d0) = (0.0, 0.0, 0.0);
        let mut g_power = vec![0.0; power.len()];
        for (bi, &pw) in power.data().iter().enumerate() {
            let raw = geo.c * pw / geo.d0;
            let sigma = self.settings.clamp(raw);
            let s2 = sigma * sigma;
            let mut g_sigma = 0.0;
            for f in 0..self.bins {
                let idx = bi * self.bins + f;
                let (d1, d2) = offsets(f as f64, geo.f1, geo.f2);
                let g1 = (-d1 * d1 / (2.0 * s2)).exp();
                let g2 = (-d2 * d2 / (2.0 * s2)).exp();
                let mut up = g.data()[idx];
                if abs_mode {
                    up *= sign(g1 - g2);
                }
                if up == 0.0 {
                    continue;
                }
                g_f1 += up * g1 * d1 / s2;
                g_f2 -= up * g2 * d2 / s2;
                g_sigma += up * (g1 * d1 * d1 - g2 * d2 * d2) / (s2 * sigma);
            }
            let inside = raw > self.settings.sigma_min && raw < self.settings.sigma_max;
            if inside {
                g_power[bi] = g_sigma * geo.c / geo.d0;
                g_d0 -= g_sigma * raw / geo.d0;
            }
        }
        let g_f2_total = g_f2 + 0.5 * g_d0;
        let g_f1_total = g_f1 + 0.5 * g_d0 + g_f2_total * (1.0 - geo.sb);
        let g_a = g_f1_total * geo.nyq * geo.sa * (1.0 - geo.sa);
        let g_b = g_f2_total * (geo.nyq - geo.f1) * geo.sb * (1.0 - geo.sb);
        Ok(vec![
            Some(Value::Real(Tensor::scalar(g_a))),
            Some(Value::Real(Tensor::scalar(g_b))),
            Some(Value::Real(Tensor::new(power.shape().to_vec(), g_power)?)),
        ])
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
