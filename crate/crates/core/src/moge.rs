//! The adaptive mixture-of-experts layer.
//!
//! Per block: spectrum of the window, gate features, a scalar head predicting
//! how many experts to use, an `E_max`-way softmax gate, hard top-K routing,
//! Gaussian sub-bands and one complex linear expert per band. Outputs of the
//! selected experts are mixed with renormalized gate weights.
//!
//! With `depth > 1` every block but the last maps the window to itself and is
//! followed by a pointwise feed-forward over variables; both are residual.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filterbank::{
    self, BandwidthSettings, FilterBank, FilterMode, GaussianBandpassFilter,
};
use crate::ndmath::fft::{half_bins, irfft_last};
use crate::ndmath::tape::sigmoid;
use crate::ndmath::{
    ComplexTensor, ParamId, ParameterStore, Primitive, Tape, Tensor, Value, Var,
};
use crate::spectral::{self, SpectrumBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Expert count predicted per sample.
    Adaptive,
    /// Constant expert count.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateFeatures {
    /// `[mu ; e]` spectral summary.
    Dual,
    /// Flattened time-domain window.
    Window,
}

impl FromStr for GateFeatures {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(GateFeatures::Dual),
            "window" => Ok(GateFeatures::Window),
            other => Err(Error::Config(format!(
                "unknown gate features `{other}` (expected dual or window)"
            ))),
        }
    }
}

impl fmt::Display for GateFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateFeatures::Dual => "dual",
            GateFeatures::Window => "window",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variables: usize,
    pub e_max: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub bandwidth: BandwidthSettings,
    pub gate_mode: GateMode,
    pub gate_features: GateFeatures,
}

impl LayerConfig {
    /// Depth 1, feature width 16, adaptive dual-feature gate, default bandwidth.
    pub fn new(lookback: usize, horizon: usize, variables: usize, e_max: usize) -> Self {
        LayerConfig {
            lookback,
            horizon,
            variables,
            e_max,
            depth: 1,
            feature_dim: 16,
            bandwidth: BandwidthSettings::defaults(e_max.max(1), half_bins(lookback)),
            gate_mode: GateMode::Adaptive,
            gate_features: GateFeatures::Dual,
        }
    }

    pub fn bins(&self) -> usize {
        half_bins(self.lookback)
    }

    pub fn out_bins(&self) -> usize {
        half_bins(self.horizon)
    }

    pub fn gate_inputs(&self) -> usize {
        match self.gate_features {
            GateFeatures::Dual => self.bins() + self.variables,
            GateFeatures::Window => self.lookback * self.variables,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lookback < 2 || self.horizon < 2 {
            return fail(format!(
                "lookback and horizon must be at least 2 (got {} and {})",
                self.lookback, self.horizon
            ));
        }
        if self.variables == 0 || self.e_max == 0 || self.depth == 0 || self.feature_dim == 0 {
            return fail("variables, e_max, depth and feature_dim must be positive".into());
        }
        if let GateMode::Fixed(k) = self.gate_mode {
            if k == 0 || k > self.e_max {
                return fail(format!("fixed expert count {k} outside [1, {}]", self.e_max));
            }
        }
        self.bandwidth.validate()
    }
}

/// Scalar expert-count head.
#[derive(Debug, Clone, PartialEq)]
pub struct KHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParameters {
    /// `None` when the expert count is fixed.
    pub k_head: Option<KHead>,
    pub fixed_k: Option<usize>,
    pub wg: Tensor,
    pub bg: Tensor,
}

/// One expert: complex `(F_out, F)` weight and `(F_out)` bias as real parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParameters {
    pub w_re: Tensor,
    pub w_im: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
}

/// Routing outcome for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateDecision {
    /// Weights scattered over all `e_max` experts.
    pub fn dense(&self, e_max: usize) -> Vec<f64> {
        let mut out = vec![0.0; e_max];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            out[i] = w;
        }
        out
    }
}

/// `k̂ = 1 + (E_max - 1)·sigmoid(w2·relu(w1·χ + b1) + b2)` and `K = round(k̂)`.
pub fn predict_expert_count(chi: &Tensor, head: &KHead, e_max: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let hidden = chi.linear(&head.w1, Some(&head.b1))?.map(|v| v.max(0.0));
    let z = hidden.linear(&head.w2, Some(&head.b2))?;
    let k_hat: Vec<f64> = z
        .data()
        .iter()
        .map(|&z| 1.0 + (e_max as f64 - 1.0) * sigmoid(z))
        .collect();
    let k = k_hat.iter().map(|&kh| round_count(kh, e_max)).collect();
    Ok((k_hat, k))
}

pub(crate) fn round_count(k_hat: f64, e_max: usize) -> usize {
    (k_hat.round().max(1.0) as usize).min(e_max)
}

/// Row-wise `softmax(wg·χ + bg)`.
pub fn gate_probabilities(chi: &Tensor, gate: &GateParameters) -> Result<Tensor> {
    Ok(chi.linear(&gate.wg, Some(&gate.bg))?.softmax_last())
}

/// The `k` largest entries of `p`, ties to the lower index, renormalized.
pub fn select_topk(p: &[f64], k: usize) -> Result<GateDecision> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("k = {k} outside [1, {}]", p.len())));
    }
    let order = rank_order(p);
    let indices: Vec<usize> = order[..k].to_vec();
    let total: f64 = indices.iter().map(|&i| p[i]).sum();
    let weights = indices.iter().map(|&i| p[i] / total).collect();
    Ok(GateDecision { k, indices, weights })
}

/// Expert ids sorted by descending probability, ties by ascending id.
pub fn rank_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

/// Complex map of a `(B, V, F)` sub-band to a `(B, H, V)` forecast.
pub fn expert_forward(
    expert: &ExpertParameters,
    subband: &ComplexTensor,
    lookback: usize,
    horizon: usize,
) -> Result<Tensor> {
    let (bsz, vars, bins) = subband.dims3()?;
    let (n_out, n_in) = expert.w_re.dims2()?;
    if n_in != bins || n_out != half_bins(horizon) {
        return Err(Error::invalid(format!(
            "expert weight {:?} does not map {bins} bins to horizon {horizon}",
            expert.w_re.shape()
        )));
    }
    let mut re = vec![0.0; bsz * vars * n_out];
    let mut im = vec![0.0; bsz * vars * n_out];
    for r in 0..bsz * vars {
        let xr = &subband.re()[r * bins..(r + 1) * bins];
        let xi = &subband.im()[r * bins..(r + 1) * bins];
        for o in 0..n_out {
            let (mut ar, mut ai) = (expert.b_re.data()[o], expert.b_im.data()[o]);
            for f in 0..bins {
                let (wr, wi) = (expert.w_re.data()[o * bins + f], expert.w_im.data()[o * bins + f]);
                ar += wr * xr[f] - wi * xi[f];
                ai += wr * xi[f] + wi * xr[f];
            }
            re[r * n_out + o] = ar;
            im[r * n_out + o] = ai;
        }
    }
    let y = ComplexTensor::new(vec![bsz, vars, n_out], re, im)?;
    irfft_last(&y, horizon)?
        .scale(horizon as f64 / lookback as f64)
        .transpose12()
}

#[derive(Debug, Clone)]
struct BlockIds {
    out_len: usize,
    filters: Vec<(ParamId, ParamId)>,
    k_head: Option<[ParamId; 4]>,
    wg: ParamId,
    bg: ParamId,
    experts: Vec<[ParamId; 4]>,
    ffn: Option<[ParamId; 4]>,
}

/// Diagnostics recorded for one block during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// `(B, F)`; empty for the window gate.
    pub mu: Option<Tensor>,
    /// `(B, V)`; empty for the window gate.
    pub intensity: Option<Tensor>,
    pub k_hat: Vec<f64>,
    pub k: Vec<usize>,
    /// `(B, E)` gate probabilities.
    pub probs: Tensor,
    /// `(B, E)` mixture weights, zero for unselected experts.
    pub weights: Tensor,
    /// `(f1, f2)` per expert.
    pub cutoffs: Vec<(f64, f64)>,
    /// `(B, E)` clamped bandwidths; empty for the rectangular bank.
    pub sigma: Option<Tensor>,
    /// Feed-forward pre-activations after this block, if it has one.
    pub ffn_preact: Option<Tensor>,
}

/// Layer parameters and their layout in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct AdaMoGe {
    pub config: LayerConfig,
    pub store: ParameterStore,
    blocks: Vec<BlockIds>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

impl AdaMoGe {
    /// Fresh parameters drawn from a seeded generator.
    ///
    /// Real weights are uniform in `±1/sqrt(fan_in)` with zero biases. Expert
    /// weights have modulus `1/sqrt(F)` and uniform phase. Filters start as an
    /// equal tiling of the spectrum.
    pub fn new(config: LayerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let mut blocks = Vec::with_capacity(config.depth);
        let bins = config.bins();
        let bank = filterbank::init_bank(config.e_max, bins, config.bandwidth)?;
        for d in 0..config.depth {
            let last = d + 1 == config.depth;
            let out_len = if last { config.horizon } else { config.lookback };
            let out_bins = half_bins(out_len);
            let name = |s: &str| format!("blocks.{d}.{s}");

            let mut filters = Vec::new();
            if config.bandwidth.mode != FilterMode::Rect {
                for (e, f) in bank.filters.iter().enumerate() {
                    let a = store.insert(name(&format!("filters.{e}.a")), Tensor::scalar(f.a), true)?;
                    let b = store.insert(name(&format!("filters.{e}.b")), Tensor::scalar(f.b), true)?;
                    filters.push((a, b));
                }
            }

            let g_in = config.gate_inputs();
            let hid = config.feature_dim;
            let k_head = match config.gate_mode {
                GateMode::Adaptive => Some([
                    store.insert(name("gate.w1"), uniform(&mut rng, &[hid, g_in], (g_in as f64).sqrt().recip()), true)?,
                    store.insert(name("gate.b1"), Tensor::zeros(&[hid]), true)?,
                    store.insert(name("gate.w2"), uniform(&mut rng, &[1, hid], (hid as f64).sqrt().recip()), true)?,
                    store.insert(name("gate.b2"), Tensor::zeros(&[1]), true)?,
                ]),
                GateMode::Fixed(_) => None,
            };
            let wg = store.insert(
                name("gate.wg"),
                uniform(&mut rng, &[config.e_max, g_in], (g_in as f64).sqrt().recip()),
                true,
            )?;
            let bg = store.insert(name("gate.bg"), Tensor::zeros(&[config.e_max]), true)?;

            let mut experts = Vec::with_capacity(config.e_max);
            let modulus = (bins as f64).sqrt().recip();
            for e in 0..config.e_max {
                let n = out_bins * bins;
                let (mut wr, mut wi) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    wr.push(modulus * phase.cos());
                    wi.push(modulus * phase.sin());
                }
                experts.push([
                    store.insert(name(&format!("experts.{e}.w_re")), Tensor::new(vec![out_bins, bins], wr)?, true)?,
                    store.insert(name(&format!("experts.{e}.w_im")), Tensor::new(vec![out_bins, bins], wi)?, true)?,
                    store.insert(name(&format!("experts.{e}.b_re")), Tensor::zeros(&[out_bins]), true)?,
                    store.insert(name(&format!("experts.{e}.b_im")), Tensor::zeros(&[out_bins]), true)?,
                ]);
            }

            let ffn = if last {
                None
            } else {
                let v = config.variables;
                Some([
                    store.insert(name("ffn.w1"), uniform(&mut rng, &[hid, v], (v as f64).sqrt().recip()), true)?,
                    store.insert(name("ffn.b1"), Tensor::zeros(&[hid]), true)?,
                    store.insert(name("ffn.w2"), uniform(&mut rng, &[v, hid], (hid as f64).sqrt().recip()), true)?,
                    store.insert(name("ffn.b2"), Tensor::zeros(&[v]), true)?,
                ])
            };
            blocks.push(BlockIds {
                out_len,
                filters,
                k_head,
                wg,
                bg,
                experts,
                ffn,
            });
        }
        Ok(AdaMoGe { config, store, blocks })
    }

    /// Trainable scalars; complex entries count as two.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Filter bank of block `d` with its current cutoffs.
    pub fn bank(&self, d: usize) -> FilterBank {
        let c = &self.config;
        let bins = c.bins();
        let filters = if self.blocks[d].filters.is_empty() {
            filterbank::init_bank(c.e_max, bins, c.bandwidth)
                .expect("validated config")
                .filters
        } else {
            self.blocks[d]
                .filters
                .iter()
                .map(|&(a, b)| GaussianBandpassFilter {
                    a: self.store.value(a).data()[0],
                    b: self.store.value(b).data()[0],
                    sigma0: c.bandwidth.sigma0,
                    alpha: c.bandwidth.alpha,
                })
                .collect()
        };
        FilterBank {
            filters,
            e_max: c.e_max,
            bins,
            settings: c.bandwidth,
        }
    }

    pub fn gate(&self, d: usize) -> GateParameters {
        let b = &self.blocks[d];
        let v = |id: ParamId| self.store.value(id).clone();
        GateParameters {
            k_head: b.k_head.map(|[w1, b1, w2, b2]| KHead {
                w1: v(w1),
                b1: v(b1),
                w2: v(w2),
                b2: v(b2),
            }),
            fixed_k: match self.config.gate_mode {
                GateMode::Fixed(k) => Some(k),
                GateMode::Adaptive => None,
            },
            wg: v(b.wg),
            bg: v(b.bg),
        }
    }

    pub fn experts(&self, d: usize) -> Vec<ExpertParameters> {
        self.blocks[d]
            .experts
            .iter()
            .map(|&[wr, wi, br, bi]| ExpertParameters {
                w_re: self.store.value(wr).clone(),
                w_im: self.store.value(wi).clone(),
                b_re: self.store.value(br).clone(),
                b_im: self.store.value(bi).clone(),
            })
            .collect()
    }

    /// Records the forward pass of a `(B, L, V)` window node, reading
    /// parameters from `store`. Returns the `(B, H, V)` output node.
    pub fn forward_on(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        window: Var,
    ) -> Result<(Var, Vec<BlockTrace>)> {
        let shape = tape.real(window)?.shape().to_vec();
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.lookback || shape[2] != c.variables {
            return Err(Error::invalid(format!(
                "window shape {shape:?} does not match lookback {} and {} variables",
                c.lookback, c.variables
            )));
        }
        let mut x = window;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, mut trace) = self.block_forward(store, tape, block, x)?;
            x = match block.ffn {
                None => y,
                Some([w1, b1, w2, b2]) => {
                    let r = tape.add(x, y)?;
                    let (w1, b1, w2, b2) = (tape.param(store, w1), tape.param(store, b1), tape.param(store, w2), tape.param(store, b2));
                    let h = tape.linear(r, w1, Some(b1))?;
                    trace.ffn_preact = Some(tape.real(h)?.clone());
                    let h = tape.relu(h)?;
                    let z = tape.linear(h, w2, Some(b2))?;
                    tape.add(r, z)?
                }
            };
            traces.push(trace);
        }
        Ok((x, traces))
    }

    fn block_forward(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        block: &BlockIds,
        x: Var,
    ) -> Result<(Var, BlockTrace)> {
        let c = &self.config;
        let bsz = tape.real(x)?.shape()[0];
        let bins = c.bins();
        let xt = tape.transpose12(x)?;
        let spec = tape.rfft(xt)?;

        let (features, mu, intensity) = match c.gate_features {
            GateFeatures::Dual => {
                let s = spectral::summary_on_tape(tape, spec)?;
                (s.chi, Some(tape.real(s.mu)?.clone()), Some(tape.real(s.e)?.clone()))
            }
            GateFeatures::Window => (tape.reshape(x, vec![bsz, c.lookback * c.variables])?, None, None),
        };

        let k_hat = match block.k_head {
            Some([w1, b1, w2, b2]) => {
                let (w1, b1, w2, b2) = (tape.param(store, w1), tape.param(store, b1), tape.param(store, w2), tape.param(store, b2));
                let h = tape.linear(features, w1, Some(b1))?;
                let h = tape.relu(h)?;
                let z = tape.linear(h, w2, Some(b2))?;
                let s = tape.sigmoid(z)?;
                tape.affine(s, c.e_max as f64 - 1.0, 1.0)?
            }
            None => {
                let GateMode::Fixed(k) = c.gate_mode else {
                    unreachable!("k-head exists for adaptive gates");
                };
                tape.constant(Tensor::full(&[bsz, 1], k as f64))
            }
        };
        let (wg, bg) = (tape.param(store, block.wg), tape.param(store, block.bg));
        let logits = tape.linear(features, wg, Some(bg))?;
        let probs = tape.softmax(logits)?;
        let weights = route(tape, probs, k_hat, c.e_max)?;

        let power = tape.mean_power(spec)?;
        let mut outputs = Vec::with_capacity(c.e_max);
        let mut cutoffs = Vec::with_capacity(c.e_max);
        let mut sigma = Vec::with_capacity(c.e_max);
        for e in 0..c.e_max {
            let h = match block.filters.get(e) {
                Some(&(a, b)) => {
                    let (av, bv) = (tape.param(store, a), tape.param(store, b));
                    let (a0, b0) = (store.value(a).data()[0], store.value(b).data()[0]);
                    cutoffs.push(filterbank::cutoffs(a0, b0, filterbank::nyquist(bins)));
                    let filt = GaussianBandpassFilter {
                        a: a0,
                        b: b0,
                        sigma0: c.bandwidth.sigma0,
                        alpha: c.bandwidth.alpha,
                    };
                    let nyq = filterbank::nyquist(bins);
                    sigma.push(
                        tape.real(power)?
                            .data()
                            .iter()
                            .map(|&p| c.bandwidth.clamp(filt.raw_sigma(p, nyq)))
                            .collect::<Vec<_>>(),
                    );
                    filterbank::response_on_tape(tape, av, bv, power, bins, c.bandwidth)?
                }
                None => {
                    let row = filterbank::rect_response(e, c.e_max, bins);
                    let lo = row.iter().position(|&v| v > 0.0).unwrap_or(0) as f64;
                    let hi = row.iter().rposition(|&v| v > 0.0).unwrap_or(0) as f64;
                    cutoffs.push((lo, hi));
                    let data = (0..bsz).flat_map(|_| row.iter().copied()).collect();
                    tape.constant(Tensor::new(vec![bsz, bins], data)?)
                }
            };
            let band = tape.scale_bins(spec, h)?;
            let [wr, wi, br, bi] = block.experts[e];
            let (wr, wi, br, bi) = (tape.param(store, wr), tape.param(store, wi), tape.param(store, br), tape.param(store, bi));
            let y = tape.complex_linear(band, wr, wi, br, bi)?;
            let y = tape.irfft(y, block.out_len)?;
            let y = tape.scale(y, block.out_len as f64 / c.lookback as f64)?;
            outputs.push(tape.transpose12(y)?);
        }
        let out = tape.mix(weights, &outputs)?;

        let k_hat_v = tape.real(k_hat)?.data().to_vec();
        let trace = BlockTrace {
            mu,
            intensity,
            k: k_hat_v.iter().map(|&k| round_count(k, c.e_max)).collect(),
            k_hat: k_hat_v,
            probs: tape.real(probs)?.clone(),
            weights: tape.real(weights)?.clone(),
            cutoffs,
            sigma: if sigma.is_empty() {
                None
            } else {
                let mut data = vec![0.0; bsz * c.e_max];
                for (e, col) in sigma.iter().enumerate() {
                    for (b, &s) in col.iter().enumerate() {
                        data[b * c.e_max + e] = s;
                    }
                }
                Some(Tensor::new(vec![bsz, c.e_max], data)?)
            },
            ffn_preact: None,
        };
        Ok((out, trace))
    }

    /// Forecast for a `(B, L, V)` normalized window batch.
    pub fn forecast(&self, window: &Tensor) -> Result<Tensor> {
        Ok(self.forecast_traced(window)?.0)
    }

    pub fn forecast_traced(&self, window: &Tensor) -> Result<(Tensor, Vec<BlockTrace>)> {
        let mut tape = Tape::new();
        let x = tape.constant(window.clone());
        let (y, traces) = self.forward_on(&self.store, &mut tape, x)?;
        Ok((tape.real(y)?.clone(), traces))
    }

    /// Smallest distance of any non-smooth point from its switching point:
    /// `k̂` from a rounding midpoint, the last selected probability from the
    /// first unselected one, the raw bandwidth from either clamp bound, a
    /// band midpoint from the nearest bin (modulus response only) and
    /// feed-forward pre-activations from zero.
    pub fn decision_margin(&self, window: &Tensor) -> Result<f64> {
        let (_, traces) = self.forecast_traced(window)?;
        let c = &self.config;
        let mut margin = f64::INFINITY;
        for tr in &traces {
            if let Some(h) = &tr.ffn_preact {
                margin = h.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
            if c.bandwidth.mode == FilterMode::AbsDog {
                for &(f1, f2) in &tr.cutoffs {
                    let mid = 0.5 * (f1 + f2);
                    margin = margin.min((mid - mid.round()).abs());
                }
            }
            let bsz = tr.k.len();
            for b in 0..bsz {
                if c.gate_mode == GateMode::Adaptive {
                    let kh = tr.k_hat[b];
                    margin = margin.min((kh - (kh.floor() + 0.5)).abs());
                }
                let row = &tr.probs.data()[b * c.e_max..(b + 1) * c.e_max];
                let order = rank_order(row);
                let k = tr.k[b];
                if k < c.e_max {
                    margin = margin.min(row[order[k - 1]] - row[order[k]]);
                }
            }
        }
        if c.bandwidth.mode != FilterMode::Rect {
            let mut x = window.clone();
            for d in 0..self.blocks.len() {
                let spec = SpectrumBatch::from_window(&x)?;
                let bank = self.bank(d);
                for p in filterbank::mean_power(&spec) {
                    for f in &bank.filters {
                        let raw = f.raw_sigma(p, bank.nyquist());
                        margin = margin
                            .min((raw - c.bandwidth.sigma_min).abs())
                            .min((raw - c.bandwidth.sigma_max).abs());
                    }
                }
                if d + 1 < self.blocks.len() {
                    x = self.block_input(d + 1, window)?;
                }
            }
        }
        Ok(margin)
    }

    /// Input seen by block `d` for a given model input.
    fn block_input(&self, d: usize, window: &Tensor) -> Result<Tensor> {
        let truncated = AdaMoGe {
            config: LayerConfig {
                horizon: self.config.lookback,
                ..self.config.clone()
            },
            store: self.store.clone(),
            blocks: self.blocks[..d].to_vec(),
        };
        let mut tape = Tape::new();
        let x = tape.constant(window.clone());
        let (y, _) = truncated.forward_on(&self.store, &mut tape, x)?;
        Ok(tape.real(y)?.clone())
    }
}

/// Hard top-K routing of `(B, E)` probabilities by a `(B, 1)` real count.
///
/// Forward: `K = round(k̂)` experts with the largest probabilities keep their
/// renormalized weight, all others get exactly zero. Backward: probabilities
/// receive the derivative of the renormalization with the selection held
/// fixed; `k̂` receives a straight-through gradient through the ramp
/// `m_r = clamp(k̂ - r, 0, 1)` over 0-based ranks `r`, whose slope is one at
/// rank `⌊k̂⌋` only.
pub fn route(tape: &mut Tape, probs: Var, k_hat: Var, e_max: usize) -> Result<Var> {
    let p = tape.real(probs)?;
    let (bsz, n) = p.dims2()?;
    let kh = tape.real(k_hat)?;
    if n != e_max || kh.len() != bsz {
        return Err(Error::invalid(format!(
            "route: probabilities {:?} and counts {:?} for {e_max} experts",
            p.shape(),
            kh.shape()
        )));
    }
    let mut out = vec![0.0; bsz * n];
    for b in 0..bsz {
        let row = &p.data()[b * n..(b + 1) * n];
        let d = select_topk(row, round_count(kh.data()[b], e_max))?;
        out[b * n..(b + 1) * n].copy_from_slice(&d.dense(n));
    }
    let value = Tensor::new(vec![bsz, n], out)?;
    Ok(tape.push(Value::Real(value), Box::new(Route { probs, k_hat, e_max })))
}

#[derive(Debug)]
struct Route {
    probs: Var,
    k_hat: Var,
    e_max: usize,
}

impl Primitive for Route {
    fn inputs(&self) -> Vec<Var> {
        vec![self.probs, self.k_hat]
    }

    fn backward(&self, tape: &Tape, out: &Value, grad: &Value) -> Result<Vec<Option<Value>>> {
        let g = grad.real()?;
        let w = out.real()?;
        let p = tape.real(self.probs)?;
        let kh = tape.real(self.k_hat)?;
        let n = self.e_max;
        let bsz = p.shape()[0];
        let mut gp = vec![0.0; bsz * n];
        let mut gk = vec![0.0; bsz];
        for b in 0..bsz {
            let row = b * n..(b + 1) * n;
            let (pr, wr, gr) = (&p.data()[row.clone()], &w.data()[row.clone()], &g.data()[row]);
            let total: f64 = (0..n).filter(|&e| wr[e] != 0.0).map(|e| pr[e]).sum();
            let mean_g: f64 = (0..n).map(|e| gr[e] * wr[e]).sum();
            for e in 0..n {
                if wr[e] != 0.0 {
                    gp[b * n + e] = (gr[e] - mean_g) / total;
                }
            }
            let r = kh.data()[b].floor();
            if r >= 0.0 && (r as usize) < n {
                let e = rank_order(pr)[r as usize];
                gk[b] = pr[e] / total * (gr[e] - mean_g);
            }
        }
        Ok(vec![
            Some(Value::Real(Tensor::new(p.shape().to_vec(), gp)?)),
            Some(Value::Real(Tensor::new(kh.shape().to_vec(), gk)?)),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::fft::{irfft, rfft};
    use crate::ndmath::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        uniform(r, shape, 1.0)
    }

    fn small_config() -> LayerConfig {
        let mut c = LayerConfig::new(16, 8, 2, 3);
        c.feature_dim = 4;
        c.bandwidth.alpha = 0.05;
        c
    }

    #[test]
    fn count_examples() {
        let head = KHead {
            w1: Tensor::zeros(&[2, 3]),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::zeros(&[1, 2]),
            b2: Tensor::zeros(&[1]),
        };
        let chi = Tensor::full(&[1, 3], 0.3);
        let (kh, k) = predict_expert_count(&chi, &head, 9).unwrap();
        assert_eq!((kh[0], k[0]), (5.0, 5));
        let (_, k) = predict_expert_count(&chi, &head, 1).unwrap();
        assert_eq!(k[0], 1);
        let saturated = KHead {
            b2: Tensor::vector(vec![1e3]),
            ..head
        };
        let (kh, k) = predict_expert_count(&chi, &saturated, 7).unwrap();
        assert_eq!((kh[0], k[0]), (7.0, 7));
    }

    #[test]
    fn count_is_monotone_in_logit() {
        let mut last = 0;
        for i in -400..=400 {
            let z = i as f64 * 0.05;
            let k = round_count(1.0 + 6.0 * sigmoid(z), 7);
            assert!(k >= last && (1..=7).contains(&k));
            last = k;
        }
    }

    #[test]
    fn uniform_and_shifted_probabilities() {
        let gate = GateParameters {
            k_head: None,
            fixed_k: Some(1),
            wg: Tensor::zeros(&[4, 3]),
            bg: Tensor::zeros(&[4]),
        };
        let p = gate_probabilities(&Tensor::full(&[2, 3], 1.7), &gate).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut r = rng(3);
        let wg = random(&[4, 3], &mut r);
        let chi = random(&[2, 3], &mut r);
        let base = GateParameters { wg, ..gate.clone() };
        let shifted = GateParameters {
            bg: Tensor::full(&[4], 12.5),
            ..base.clone()
        };
        let p0 = gate_probabilities(&chi, &base).unwrap();
        let p1 = gate_probabilities(&chi, &shifted).unwrap();
        for (a, b) in p0.data().iter().zip(p1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let logits = chi.linear(&base.wg, None).unwrap();
        for b in 0..2 {
            let row = &logits.data()[b * 4..(b + 1) * 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for e in 0..4 {
                assert!((p0.data()[b * 4 + e] - row[e].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_examples() {
        let d = select_topk(&[0.1, 0.6, 0.3], 2).unwrap();
        assert_eq!(d.indices, vec![1, 2]);
        assert!((d.weights[0] - 2.0 / 3.0).abs() < 1e-15 && (d.weights[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = [0.2, 0.5, 0.3];
        let d = select_topk(&p, 3).unwrap();
        assert_eq!(d.dense(3), p.to_vec());
        assert_eq!(select_topk(&[0.4, 0.4, 0.2], 1).unwrap().indices, vec![0]);
        assert!(select_topk(&p, 0).is_err());
        assert!(select_topk(&p, 4).is_err());
    }

    fn expert_like(out_bins: usize, bins: usize, r: &mut ChaCha8Rng) -> ExpertParameters {
        ExpertParameters {
            w_re: random(&[out_bins, bins], r),
            w_im: random(&[out_bins, bins], r),
            b_re: random(&[out_bins], r),
            b_im: random(&[out_bins], r),
        }
    }

    #[test]
    fn zero_expert_gives_zero_forecast() {
        let e = ExpertParameters {
            w_re: Tensor::zeros(&[3, 5]),
            w_im: Tensor::zeros(&[3, 5]),
            b_re: Tensor::zeros(&[3]),
            b_im: Tensor::zeros(&[3]),
        };
        let mut r = rng(1);
        let x = SpectrumBatch::from_window(&random(&[2, 8, 2], &mut r)).unwrap();
        let y = expert_forward(&e, &x.values, 8, 4).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_expert_reproduces_window() {
        let bins = 9;
        let mut eye = vec![0.0; bins * bins];
        for i in 0..bins {
            eye[i * bins + i] = 1.0;
        }
        let e = ExpertParameters {
            w_re: Tensor::new(vec![bins, bins], eye).unwrap(),
            w_im: Tensor::zeros(&[bins, bins]),
            b_re: Tensor::zeros(&[bins]),
            b_im: Tensor::zeros(&[bins]),
        };
        let mut r = rng(2);
        let w = random(&[2, 16, 3], &mut r);
        let spec = SpectrumBatch::from_window(&w).unwrap();
        let y = expert_forward(&e, &spec.values, 16, 16).unwrap();
        for (a, b) in y.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn expert_matches_loop_oracle() {
        let mut r = rng(4);
        let e = expert_like(3, 5, &mut r);
        let x: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (xr, xi) = rfft(&x).unwrap();
        let mut yr = vec![0.0; 3];
        let mut yi = vec![0.0; 3];
        for o in 0..3 {
            yr[o] = e.b_re.data()[o];
            yi[o] = e.b_im.data()[o];
            for f in 0..5 {
                let (a, b) = (e.w_re.data()[o * 5 + f], e.w_im.data()[o * 5 + f]);
                yr[o] += a * xr[f] - b * xi[f];
                yi[o] += a * xi[f] + b * xr[f];
            }
        }
        let want: Vec<f64> = irfft(&yr, &yi, 4).unwrap().iter().map(|v| v * 0.5).collect();
        let spec = SpectrumBatch::from_window(&Tensor::new(vec![1, 8, 1], x).unwrap()).unwrap();
        let got = expert_forward(&e, &spec.values, 8, 4).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_expert_layer_is_its_expert() {
        let mut c = small_config();
        c.e_max = 1;
        c.bandwidth = BandwidthSettings {
            alpha: 0.05,
            ..BandwidthSettings::defaults(1, 9)
        };
        let model = AdaMoGe::new(c.clone(), 11).unwrap();
        let mut r = rng(5);
        let w = random(&[2, 16, 2], &mut r);
        let (y, traces) = model.forecast_traced(&w).unwrap();
        assert_eq!(traces[0].k, vec![1, 1]);
        let spec = SpectrumBatch::from_window(&w).unwrap();
        let band = model.bank(0).apply(&spec).unwrap();
        let sub = ComplexTensor::new(vec![2, 2, 9], band.values.re().to_vec(), band.values.im().to_vec()).unwrap();
        let want = expert_forward(&model.experts(0)[0], &sub, 16, 8).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_selection_with_uniform_gate_is_expert_mean() {
        let mut c = small_config();
        c.gate_mode = GateMode::Fixed(3);
        let mut model = AdaMoGe::new(c, 12).unwrap();
        for name in ["blocks.0.gate.wg", "blocks.0.gate.bg"] {
            model.store.by_name_mut(name).unwrap().value.fill(0.0);
        }
        let mut r = rng(6);
        let w = random(&[2, 16, 2], &mut r);
        let y = model.forecast(&w).unwrap();
        let spec = SpectrumBatch::from_window(&w).unwrap();
        let bands = model.bank(0).apply(&spec).unwrap();
        let per = spec.values.len();
        let mut mean = Tensor::zeros(&[2, 8, 2]);
        for (e, ex) in model.experts(0).iter().enumerate() {
            let sub = ComplexTensor::new(
                vec![2, 2, 9],
                bands.values.re()[e * per..(e + 1) * per].to_vec(),
                bands.values.im()[e * per..(e + 1) * per].to_vec(),
            )
            .unwrap();
            mean.add_assign(&expert_forward(ex, &sub, 16, 8).unwrap().scale(1.0 / 3.0)).unwrap();
        }
        for (a, b) in y.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Straight-line scalar implementation of the whole layer.
    fn reference_forward(model: &AdaMoGe, window: &Tensor) -> Vec<f64> {
        let c = &model.config;
        let (bsz, l, v) = window.dims3().unwrap();
        let f_in = l / 2 + 1;
        let h = c.horizon;
        let f_out = h / 2 + 1;
        let e_max = c.e_max;
        let nyq = (f_in - 1) as f64;
        let gate = model.gate(0);
        let head = gate.k_head.clone().unwrap();
        let experts = model.experts(0);
        let bank = model.bank(0);
        let mut out = vec![0.0; bsz * h * v];
        for b in 0..bsz {
            // naive DFT per variable
            let mut xr = vec![vec![0.0; f_in]; v];
            let mut xi = vec![vec![0.0; f_in]; v];
            for vi in 0..v {
                for k in 0..f_in {
                    for t in 0..l {
                        let x = window.data()[(b * l + t) * v + vi];
                        let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / l as f64;
                        xr[vi][k] += x * ang.cos();
                        xi[vi][k] += x * ang.sin();
                    }
                }
            }
            let mut chi = Vec::new();
            for k in 0..f_in {
                chi.push((0..v).map(|vi| xr[vi][k].hypot(xi[vi][k])).sum::<f64>() / v as f64);
            }
            for vi in 0..v {
                chi.push((0..f_in).map(|k| xr[vi][k].hypot(xi[vi][k])).sum::<f64>() / f_in as f64);
            }
            let n_in = chi.len();
            let hd = head.b1.len();
            let mut z = head.b2.data()[0];
            for j in 0..hd {
                let mut a = head.b1.data()[j];
                for i in 0..n_in {
                    a += head.w1.data()[j * n_in + i] * chi[i];
                }
                z += head.w2.data()[j] * a.max(0.0);
            }
            let k_hat = 1.0 + (e_max as f64 - 1.0) / (1.0 + (-z).exp());
            let k = (k_hat.round() as usize).clamp(1, e_max);
            let mut logits = vec![0.0; e_max];
            for e in 0..e_max {
                logits[e] = gate.bg.data()[e];
                for i in 0..n_in {
                    logits[e] += gate.wg.data()[e * n_in + i] * chi[i];
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let zs: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
            let p: Vec<f64> = logits.iter().map(|x| (x - mx).exp() / zs).collect();
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..k {
                let mut best = usize::MAX;
                for e in 0..e_max {
                    if chosen.contains(&e) {
                        continue;
                    }
                    if best == usize::MAX || p[e] > p[best] {
                        best = e;
                    }
                }
                chosen.push(best);
            }
            let total: f64 = chosen.iter().map(|&e| p[e]).sum();
            let power: f64 = (0..v)
                .flat_map(|vi| (0..f_in).map(move |k| (vi, k)))
                .map(|(vi, k)| xr[vi][k].powi(2) + xi[vi][k].powi(2))
                .sum::<f64>()
                / (v * f_in) as f64;
            for &e in &chosen {
                let wgt = p[e] / total;
                let filt = bank.filters[e];
                let f1 = nyq / (1.0 + (-filt.a).exp());
                let f2 = f1 + (nyq - f1) / (1.0 + (-filt.b).exp());
                let d0 = (f1 + f2) / 2.0;
                let sigma = (c.bandwidth.sigma0 * c.bandwidth.alpha / d0 * power)
                    .clamp(c.bandwidth.sigma_min, c.bandwidth.sigma_max);
                let ex = &experts[e];
                for vi in 0..v {
                    let mut sr = vec![0.0; f_in];
                    let mut si = vec![0.0; f_in];
                    for k in 0..f_in {
                        let fk = k as f64;
                        let hh = (-(fk - f1).powi(2) / (2.0 * sigma * sigma)).exp()
                            - (-(fk - f2).powi(2) / (2.0 * sigma * sigma)).exp();
                        sr[k] = xr[vi][k] * hh;
                        si[k] = xi[vi][k] * hh;
                    }
                    let mut yr = vec![0.0; f_out];
                    let mut yi = vec![0.0; f_out];
                    for o in 0..f_out {
                        yr[o] = ex.b_re.data()[o];
                        yi[o] = ex.b_im.data()[o];
                        for k in 0..f_in {
                            let (a, bb) = (ex.w_re.data()[o * f_in + k], ex.w_im.data()[o * f_in + k]);
                            yr[o] += a * sr[k] - bb * si[k];
                            yi[o] += a * si[k] + bb * sr[k];
                        }
                    }
                    // naive inverse real DFT to h samples
                    for t in 0..h {
                        let mut acc = yr[0];
                        for o in 1..f_out {
                            let ang = 2.0 * std::f64::consts::PI * (o * t) as f64 / h as f64;
                            let c2 = if h % 2 == 0 && o == h / 2 { 1.0 } else { 2.0 };
                            acc += c2 * (yr[o] * ang.cos() - yi[o] * ang.sin());
                        }
                        let y = acc / h as f64 * h as f64 / l as f64;
                        out[(b * h + t) * v + vi] += wgt * y;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn layer_matches_scalar_reference() {
        for seed in 0..5 {
            let model = AdaMoGe::new(small_config(), 100 + seed).unwrap();
            let mut r = rng(200 + seed);
            let w = random(&[2, 16, 2], &mut r);
            let got = model.forecast(&w).unwrap();
            let want = reference_forward(&model, &w);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn unselected_expert_perturbation_is_invisible() {
        let mut c = small_config();
        c.gate_mode = GateMode::Fixed(1);
        let model = AdaMoGe::new(c, 21).unwrap();
        let mut r = rng(22);
        let w = random(&[1, 16, 2], &mut r);
        let (y0, tr) = model.forecast_traced(&w).unwrap();
        let chosen = (0..3).find(|&e| tr[0].weights.data()[e] != 0.0).unwrap();
        let mut perturbed = model.clone();
        for e in (0..3).filter(|&e| e != chosen) {
            for p in perturbed.store.iter_mut().filter(|p| {
                p.name.starts_with(&format!("blocks.0.experts.{e}."))
                    || p.name.starts_with(&format!("blocks.0.filters.{e}."))
            }) {
                p.value = p.value.map(|v| v * 3.0 + 1.0);
            }
        }
        let y1 = perturbed.forecast(&w).unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let mut c = small_config();
        c.gate_mode = GateMode::Fixed(1);
        let mut model = AdaMoGe::new(c, 23).unwrap();
        let mut r = rng(24);
        let w = random(&[1, 16, 2], &mut r);
        let target = random(&[1, 8, 2], &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(w);
        let (y, tr) = model.forward_on(&model.store, &mut tape, x).unwrap();
        let loss = tape.mse(y, &target).unwrap();
        let g = tape.backward(loss).unwrap();
        tape.accumulate_into(&g, &mut model.store).unwrap();
        for e in 0..3 {
            let selected = tr[0].weights.data()[e] != 0.0;
            for p in model.store.iter().filter(|p| p.name.starts_with(&format!("blocks.0.experts.{e}."))) {
                let nonzero = p.grad.data().iter().any(|&v| v != 0.0);
                if !selected {
                    assert!(!nonzero, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn parameter_count_examples() {
        // 56 gate inputs: L = 96 gives F = 49, plus V = 7.
        let mut c = LayerConfig::new(96, 96, 7, 7);
        c.feature_dim = 16;
        let m = AdaMoGe::new(c.clone(), 0).unwrap();
        let gate: usize = m
            .store
            .iter()
            .filter(|p| p.name.contains(".gate."))
            .map(|p| p.value.len())
            .sum();
        assert_eq!(gate, 929 + 399);
        let filters = 2 * 7;
        let experts = 7 * 2 * (49 * 49 + 49);
        assert_eq!(m.parameter_count(), gate + filters + experts);
        assert!(m.parameter_count() <= 300_000);

        let mut fixed = c.clone();
        fixed.gate_mode = GateMode::Fixed(4);
        fixed.bandwidth.mode = FilterMode::Rect;
        let m = AdaMoGe::new(fixed, 0).unwrap();
        assert_eq!(m.parameter_count(), 399 + experts);
    }

    #[test]
    fn deeper_stack_runs_and_keeps_shape() {
        let mut c = small_config();
        c.depth = 3;
        let m = AdaMoGe::new(c, 5).unwrap();
        let mut r = rng(7);
        let (y, tr) = m.forecast_traced(&random(&[2, 16, 2], &mut r)).unwrap();
        assert_eq!(y.shape(), &[2, 8, 2]);
        assert_eq!(tr.len(), 3);
        assert!(y.all_finite());
    }

    #[test]
    fn window_gate_runs() {
        let mut c = small_config();
        c.gate_features = GateFeatures::Window;
        let m = AdaMoGe::new(c, 5).unwrap();
        let mut r = rng(8);
        let (y, tr) = m.forecast_traced(&random(&[2, 16, 2], &mut r)).unwrap();
        assert_eq!(y.shape(), &[2, 8, 2]);
        assert!(tr[0].mu.is_none());
    }

    #[test]
    fn route_probability_gradient() {
        // k-head frozen: the selection is locally constant so the check is exact.
        let mut store = ParameterStore::new();
        let lid = store
            .insert("logits", Tensor::new(vec![2, 4], vec![0.3, -0.2, 1.1, 0.5, -0.9, 0.4, 0.05, 0.7]).unwrap(), true)
            .unwrap();
        let g = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.2, 0.1, -1.0, 2.0]).unwrap();
        let r = grad_check(&mut store, 1e-6, |s| {
            let mut t = Tape::new();
            let l = t.param(s, lid);
            let p = t.softmax(l)?;
            let k = t.constant(Tensor::new(vec![2, 1], vec![2.2, 2.9]).unwrap());
            let w = route(&mut t, p, k, 4)?;
            let gw = t.constant(g.clone());
            let m = t.mul(w, gw)?;
            let loss = t.sum(m)?;
            Ok((t, loss))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn route_count_gradient_targets_marginal_rank() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::new(vec![1, 3], vec![0.5, 0.3, 0.2]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1], vec![1.3]).unwrap());
        let w = route(&mut t, p, k, 3).unwrap();
        assert_eq!(t.real(w).unwrap().data(), &[1.0, 0.0, 0.0]);
        let gw = t.constant(Tensor::new(vec![1, 3], vec![0.0, -1.0, 0.0]).unwrap());
        let m = t.mul(w, gw).unwrap();
        let loss = t.sum(m).unwrap();
        let g = t.backward(loss).unwrap();
        // adding rank 1 would lower the loss, so d loss / d k_hat < 0
        let gk = g.get(k).unwrap().real().unwrap().data()[0];
        assert!((gk - (0.3 / 0.5) * (-1.0 - 0.0)).abs() < 1e-12, "{gk}");
    }

    fn layer_grad_check(c: LayerConfig) -> f64 {
        let mut r = rng(31);
        for seed in 0..50 {
            let mut model = AdaMoGe::new(c.clone(), seed).unwrap();
            for p in model.store.iter_mut().filter(|p| p.name.contains(".filters.")) {
                p.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
            }
            let w = random(&[2, c.lookback, c.variables], &mut r);
            let target = random(&[2, c.horizon, c.variables], &mut r);
            if model.decision_margin(&w).unwrap() < 1e-3 {
                continue;
            }
            model.store.set_trainable("blocks.", true);
            for d in 0..c.depth {
                for n in ["w1", "b1", "w2", "b2"] {
                    model.store.set_trainable(&format!("blocks.{d}.gate.{n}"), false);
                }
            }
            let frozen = model.clone();
            let report = grad_check(&mut model.store, 1e-3, |s| {
                let mut t = Tape::new();
                let x = t.constant(w.clone());
                let (y, _) = frozen.forward_on(s, &mut t, x)?;
                let l = t.mse(y, &target)?;
                Ok((t, l))
            })
            .unwrap();
            return report.max_rel_error;
        }
        panic!("no test point away from decision boundaries");
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let err = layer_grad_check(small_config());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn stacked_layer_gradients_match_finite_differences() {
        let mut c = small_config();
        c.depth = 2;
        // An adaptive count would send its straight-through signal into the
        // first block through the second block's gate features.
        c.gate_mode = GateMode::Fixed(2);
        let err = layer_grad_check(c.clone());
        assert!(err < 1e-4, "{err}");
        c.bandwidth.mode = FilterMode::AbsDog;
        let err = layer_grad_check(c);
        assert!(err < 1e-4, "{err}");
    }
}
