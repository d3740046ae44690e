//! Spectral summary features consumed by the gate.
//!
//! `mu[b,f]` averages magnitudes across variables at each bin; `e[b,v]`
//! averages each variable's magnitudes across bins. The gate input `chi` is
//! `[mu ; e]` in that order.
//!
//! The label attached to `e` in the literature is ambiguous ("average
//! spectral intensity" vs. a cross-variable response); the per-variable
//! formula is what is implemented.

use crate::error::{Error, Result};
use crate::ndmath::fft::{self, half_bins};
use crate::ndmath::{ComplexTensor, Tape, Tensor, Var};

/// Half-spectra of a window batch, shape `(B, V, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBatch {
    pub values: ComplexTensor,
    pub lookback: usize,
}

impl SpectrumBatch {
    pub fn new(values: ComplexTensor, lookback: usize) -> Result<Self> {
        let (_, _, bins) = values.dims3()?;
        if bins != half_bins(lookback) {
            return Err(Error::invalid(format!(
                "{bins} bins do not match lookback {lookback}"
            )));
        }
        Ok(SpectrumBatch { values, lookback })
    }

    /// Transforms a `(B, L, V)` window batch.
    pub fn from_window(window: &Tensor) -> Result<Self> {
        let (_, lookback, _) = window.dims3()?;
        let values = fft::rfft_last(&window.transpose12()?)?;
        Ok(SpectrumBatch { values, lookback })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn variables(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    pub mu: Tensor,
    pub e: Tensor,
    pub chi: Tensor,
}

impl SpectralSummary {
    pub fn compute(spec: &SpectrumBatch) -> Result<Self> {
        let mu = cross_variable_response(spec)?;
        let e = spectral_intensity(spec)?;
        let chi = gate_features(&mu, &e)?;
        Ok(SpectralSummary { mu, e, chi })
    }
}

/// `mu[b,f] = (1/V) Σ_v |X[b,v,f]|`.
pub fn cross_variable_response(spec: &SpectrumBatch) -> Result<Tensor> {
    spec.values.magnitude().mean_axis(1)
}

/// `e[b,v] = (1/F) Σ_f |X[b,v,f]|`.
pub fn spectral_intensity(spec: &SpectrumBatch) -> Result<Tensor> {
    spec.values.magnitude().mean_axis(2)
}

/// Per-sample concatenation `[mu ; e]`.
pub fn gate_features(mu: &Tensor, e: &Tensor) -> Result<Tensor> {
    if mu.rank() != 2 || e.rank() != 2 || mu.shape()[0] != e.shape()[0] {
        return Err(Error::invalid(format!(
            "gate_features: incompatible shapes {:?} and {:?}",
            mu.shape(),
            e.shape()
        )));
    }
    mu.concat_last(e)
}

/// Tape nodes for one summary computation.
#[derive(Debug, Clone, Copy)]
pub struct SummaryVars {
    pub mu: Var,
    pub e: Var,
    pub chi: Var,
}

/// Differentiable summary of a complex `(B, V, F)` spectrum node.
pub fn summary_on_tape(tape: &mut Tape, spectrum: Var) -> Result<SummaryVars> {
    let mag = tape.magnitude(spectrum)?;
    let mu = tape.mean_axis(mag, 1)?;
    let e = tape.mean_axis(mag, 2)?;
    let chi = tape.concat_last(mu, e)?;
    Ok(SummaryVars { mu, e, chi })
}
