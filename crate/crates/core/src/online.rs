//! Layer-local online gradient approximations.
//!
//! Every algorithm here keeps a per-layer trace updated once per time-step and,
//! when the loss derivative for that step arrives, sends it down the stack
//! within the current step only (`spatial_backward`). They differ in what the
//! trace remembers:
//!
//! | algorithm   | trace                        | elements per layer      |
//! |-------------|------------------------------|-------------------------|
//! | OTTT        | `â`                          | `n_in`                  |
//! | OSTL        | `P`, `E`                     | `2·n_out·n_in`          |
//! | OTPE        | `P`, `R̂`                     | `2·n_out·n_in`          |
//! | Approx OTPE | `â`, `ẑ`, `ḡ`, `W`           | `2·n_in + n_out + 1`    |
//!
//! `P` is the diagonal of `∂U_t/∂θ` for the layer's own weights, `E` the
//! matching `∂s_t/∂θ`. `R̂ = Σ λ^{T−t} E_t` carries a layer's earlier spikes
//! into the membrane of the layer above. `ẑ` and `ḡ` replace `R̂` by the
//! outer product of a twice-filtered input and an averaged surrogate.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Algorithm, GradientRecord, OnlineGradient, ResetMode};
use crate::snn::{Network, StepRecord};

/// Surrogate factor applied when the spatial gradient passes through a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialFactor {
    /// `g_t` of the current step.
    Current,
    /// Leak-weighted running average `ḡ`.
    Averaged,
}

impl std::str::FromStr for SpatialFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(SpatialFactor::Current),
            "averaged" => Ok(SpatialFactor::Averaged),
            other => Err(Error::config(format!("unknown spatial factor `{other}`"))),
        }
    }
}

impl std::fmt::Display for SpatialFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialFactor::Current => "current",
            SpatialFactor::Averaged => "averaged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineOptions {
    /// Reset convention inside the own-layer `P` recursion (OSTL, OTPE).
    pub reset: ResetMode,
    /// Factor for the OTPE family; `None` picks the algorithm's default.
    /// OSTL and OTTT always use the current surrogate.
    pub spatial_factor: Option<SpatialFactor>,
    /// Leak of the output accumulator seen by F-variants. `None` = network λ.
    pub output_leak: Option<f64>,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            reset: ResetMode::Surrogate,
            spatial_factor: None,
            output_leak: None,
        }
    }
}

impl OnlineOptions {
    pub fn spatial_factor_for(&self, algorithm: Algorithm) -> SpatialFactor {
        match algorithm {
            Algorithm::Ostl | Algorithm::Ottt | Algorithm::Bptt | Algorithm::Rtrl => SpatialFactor::Current,
            Algorithm::ApproxOtpe | Algorithm::FApproxOtpe => self.spatial_factor.unwrap_or(SpatialFactor::Averaged),
            Algorithm::Otpe | Algorithm::FOtpe => self.spatial_factor.unwrap_or(SpatialFactor::Current),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OstlTrace {
    pub p: Array2<f64>,
    pub e: Array2<f64>,
}

impl OstlTrace {
    pub fn new(n_out: usize, n_in: usize) -> Self {
        Self {
            p: Array2::zeros((n_out, n_in)),
            e: Array2::zeros((n_out, n_in)),
        }
    }

    /// `A = λP + s_pre`, `E = g·A`, `P = (∂U/∂x)·A`.
    pub fn update(
        &mut self,
        pre_spikes: ArrayView1<f64>,
        surrogate: &[f64],
        leak: f64,
        threshold: f64,
        reset: ResetMode,
    ) {
        let s = pre_spikes.to_vec();
        let n_in = s.len();
        let p = self.p.as_slice_mut().expect("contiguous");
        let e = self.e.as_slice_mut().expect("contiguous");
        for (i, &g) in surrogate.iter().enumerate() {
            let keep = reset.membrane_factor(g, threshold);
            let row = i * n_in..(i + 1) * n_in;
            for ((pv, ev), &sj) in p[row.clone()].iter_mut().zip(&mut e[row]).zip(&s) {
                let a = leak * *pv + sj;
                *ev = g * a;
                *pv = keep * a;
            }
        }
    }

    pub fn elements(&self) -> usize {
        self.p.len() + self.e.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtttTrace {
    pub a_hat: Array1<f64>,
}

impl OtttTrace {
    pub fn new(n_in: usize) -> Self {
        Self {
            a_hat: Array1::zeros(n_in),
        }
    }

    /// `â = λ·â + s_pre`
    pub fn update(&mut self, pre_spikes: ArrayView1<f64>, leak: f64) {
        self.a_hat.zip_mut_with(&pre_spikes, |a, &s| *a = leak * *a + s);
    }

    pub fn elements(&self) -> usize {
        self.a_hat.len()
    }
}

/// Leak-weighted running average `ḡ = Σ λ^{T−t} g_t / Σ λ^{T−t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateAverage {
    pub g_bar: Array1<f64>,
    /// Normalizer `W = Σ λ^{T−t}`.
    pub weight: f64,
}

impl SurrogateAverage {
    pub fn new(n: usize) -> Self {
        Self {
            g_bar: Array1::zeros(n),
            weight: 0.0,
        }
    }

    pub fn update(&mut self, surrogate: &[f64], leak: f64) {
        let carried = leak * self.weight;
        let weight = carried + 1.0;
        for (gb, &g) in self.g_bar.iter_mut().zip(surrogate) {
            *gb = (carried * *gb + g) / weight;
        }
        self.weight = weight;
    }

    pub fn reset(&mut self) {
        self.g_bar.fill(0.0);
        self.weight = 0.0;
    }

    pub fn elements(&self) -> usize {
        self.g_bar.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtpeTrace {
    pub p: Array2<f64>,
    pub r_hat: Array2<f64>,
    /// Present only when the spatial pass uses `ḡ`.
    pub average: Option<SurrogateAverage>,
    /// `E_t` of the latest step; scratch, not carried across steps.
    e: Array2<f64>,
}

impl OtpeTrace {
    pub fn new(n_out: usize, n_in: usize, averaged: bool) -> Self {
        Self {
            p: Array2::zeros((n_out, n_in)),
            r_hat: Array2::zeros((n_out, n_in)),
            average: averaged.then(|| SurrogateAverage::new(n_out)),
            e: Array2::zeros((n_out, n_in)),
        }
    }

    /// OSTL's own-layer step followed by `R̂ = λ_post·R̂ + E`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        pre_spikes: ArrayView1<f64>,
        surrogate: &[f64],
        leak: f64,
        post_leak: f64,
        threshold: f64,
        reset: ResetMode,
    ) {
        let s = pre_spikes.to_vec();
        let n_in = s.len();
        let p = self.p.as_slice_mut().expect("contiguous");
        let r = self.r_hat.as_slice_mut().expect("contiguous");
        let e = self.e.as_slice_mut().expect("contiguous");
        for (i, &g) in surrogate.iter().enumerate() {
            let keep = reset.membrane_factor(g, threshold);
            let row = i * n_in..(i + 1) * n_in;
            for (((pv, rv), ev), &sj) in p[row.clone()]
                .iter_mut()
                .zip(&mut r[row.clone()])
                .zip(&mut e[row])
                .zip(&s)
            {
                let a = leak * *pv + sj;
                let de = g * a;
                *ev = de;
                *pv = keep * a;
                *rv = post_leak * *rv + de;
            }
        }
        if let Some(avg) = &mut self.average {
            avg.update(surrogate, post_leak);
        }
    }

    /// `∂s_t/∂θ` from the latest update.
    pub fn e(&self) -> &Array2<f64> {
        &self.e
    }

    pub fn elements(&self) -> usize {
        self.p.len() + self.r_hat.len() + self.average.as_ref().map_or(0, SurrogateAverage::elements)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxOtpeTrace {
    pub a_hat: Array1<f64>,
    pub z_hat: Array1<f64>,
    pub average: SurrogateAverage,
}

impl ApproxOtpeTrace {
    pub fn new(n_out: usize, n_in: usize) -> Self {
        Self {
            a_hat: Array1::zeros(n_in),
            z_hat: Array1::zeros(n_in),
            average: SurrogateAverage::new(n_out),
        }
    }

    /// `â = λ·â + s_pre`, then `ẑ = λ_post·ẑ + â` and the `ḡ` average.
    pub fn update(&mut self, pre_spikes: ArrayView1<f64>, surrogate: &[f64], leak: f64, post_leak: f64) {
        self.a_hat.zip_mut_with(&pre_spikes, |a, &s| *a = leak * *a + s);
        self.z_hat.zip_mut_with(&self.a_hat, |z, &a| *z = post_leak * *z + a);
        self.average.update(surrogate, post_leak);
    }

    pub fn g_bar(&self) -> &Array1<f64> {
        &self.average.g_bar
    }

    pub fn elements(&self) -> usize {
        self.a_hat.len() + self.z_hat.len() + self.average.elements()
    }
}

/// Algorithm-tagged per-layer trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceBundle {
    Ottt(OtttTrace),
    Ostl(OstlTrace),
    Otpe(OtpeTrace),
    ApproxOtpe(ApproxOtpeTrace),
}

impl TraceBundle {
    pub fn elements(&self) -> usize {
        match self {
            TraceBundle::Ottt(t) => t.elements(),
            TraceBundle::Ostl(t) => t.elements(),
            TraceBundle::Otpe(t) => t.elements(),
            TraceBundle::ApproxOtpe(t) => t.elements(),
        }
    }
}

/// `grad_ij += d_i · E_ij`
pub fn ostl_layer_grad(grad: &mut Array2<f64>, d: ArrayView1<f64>, e: &Array2<f64>) {
    row_scaled_add(grad, d, e);
}

/// `grad_ij += d_i · g_i · â_j`
pub fn ottt_layer_grad(grad: &mut Array2<f64>, d: ArrayView1<f64>, surrogate: &[f64], a_hat: &Array1<f64>) {
    let scaled: Array1<f64> = d.iter().zip(surrogate).map(|(&di, &g)| di * g).collect();
    crate::exact::add_outer(grad, scaled.view(), a_hat.view());
}

/// `grad_ij += d_i · R̂_ij`
pub fn otpe_layer_grad(grad: &mut Array2<f64>, d: ArrayView1<f64>, r_hat: &Array2<f64>) {
    row_scaled_add(grad, d, r_hat);
}

/// `grad_ij += d_raw_i · ḡ_i · ẑ_j`
pub fn approx_otpe_layer_grad(grad: &mut Array2<f64>, d_raw: ArrayView1<f64>, trace: &ApproxOtpeTrace) {
    let scaled: Array1<f64> = d_raw
        .iter()
        .zip(trace.g_bar())
        .map(|(&d, &g)| d * g)
        .collect();
    crate::exact::add_outer(grad, scaled.view(), trace.z_hat.view());
}

fn row_scaled_add(grad: &mut Array2<f64>, d: ArrayView1<f64>, m: &Array2<f64>) {
    let n_in = m.ncols();
    let g = grad.as_slice_mut().expect("contiguous");
    let m = m.as_slice().expect("contiguous");
    for (i, &di) in d.iter().enumerate() {
        if di == 0.0 {
            continue;
        }
        let row = i * n_in..(i + 1) * n_in;
        for (gv, &mv) in g[row.clone()].iter_mut().zip(&m[row]) {
            *gv += di * mv;
        }
    }
}

/// Within-step backward pass: `d^{l−1} = θ^{l⊤}·(d^l ⊙ factor^l)` starting
/// from `d^L = delta_out`. Returns `d^l` for every layer, input side first.
pub fn spatial_backward(
    net: &Network,
    delta_out: ArrayView1<f64>,
    factors: &[&Array1<f64>],
) -> Result<Vec<Array1<f64>>> {
    Error::check_dim("spatial_backward factors", net.depth(), factors.len())?;
    Error::check_dim("spatial_backward delta", net.n_outputs(), delta_out.len())?;
    let depth = net.depth();
    let mut out = vec![Array1::zeros(0); depth];
    out[depth - 1] = delta_out.to_owned();
    for l in (1..depth).rev() {
        let scaled = &out[l] * factors[l];
        out[l - 1] = net.layers()[l].weights.t().dot(&scaled);
    }
    Ok(out)
}

/// One of the layer-local online algorithms over a whole network.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    algorithm: Algorithm,
    options: OnlineOptions,
    factor: SpatialFactor,
    traces: Vec<TraceBundle>,
    surrogates: Vec<Array1<f64>>,
    grads: GradientRecord,
}

impl OnlineLearner {
    pub fn new(net: &Network, algorithm: Algorithm, options: OnlineOptions) -> Result<Self> {
        if matches!(algorithm, Algorithm::Bptt | Algorithm::Rtrl) {
            return Err(Error::config(format!(
                "{algorithm} is not a layer-local online algorithm"
            )));
        }
        if let Some(leak) = options.output_leak {
            if !(0.0..=1.0).contains(&leak) {
                return Err(Error::config(format!("output leak must lie in [0, 1], got {leak}")));
            }
        }
        let factor = options.spatial_factor_for(algorithm);
        let traces = net
            .layers()
            .iter()
            .map(|layer| {
                let (n_out, n_in) = (layer.n_out(), layer.n_in());
                match algorithm {
                    Algorithm::Ottt => TraceBundle::Ottt(OtttTrace::new(n_in)),
                    Algorithm::Ostl => TraceBundle::Ostl(OstlTrace::new(n_out, n_in)),
                    Algorithm::Otpe | Algorithm::FOtpe => TraceBundle::Otpe(OtpeTrace::new(
                        n_out,
                        n_in,
                        factor == SpatialFactor::Averaged,
                    )),
                    _ => TraceBundle::ApproxOtpe(ApproxOtpeTrace::new(n_out, n_in)),
                }
            })
            .collect();
        Ok(Self {
            algorithm,
            options,
            factor,
            traces,
            surrogates: net.layers().iter().map(|l| Array1::zeros(l.n_out())).collect(),
            grads: GradientRecord::zeros(net),
        })
    }

    pub fn traces(&self) -> &[TraceBundle] {
        &self.traces
    }

    pub fn spatial_factor(&self) -> SpatialFactor {
        self.factor
    }

    /// Leak applied to the postsynaptic filters of `layer`.
    fn post_leak(&self, net: &Network, layer: usize) -> f64 {
        if self.algorithm.is_f_variant() && layer + 1 == net.depth() {
            self.options.output_leak.unwrap_or(net.lif().leak)
        } else {
            net.lif().leak
        }
    }

    fn factor(&self, layer: usize) -> &Array1<f64> {
        if self.factor == SpatialFactor::Averaged {
            match &self.traces[layer] {
                TraceBundle::Otpe(OtpeTrace { average: Some(a), .. }) => return &a.g_bar,
                TraceBundle::ApproxOtpe(t) => return &t.average.g_bar,
                _ => {}
            }
        }
        &self.surrogates[layer]
    }
}

impl OnlineGradient for OnlineLearner {
    fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    fn observe(&mut self, net: &Network, records: &[StepRecord]) -> Result<()> {
        Error::check_dim("online records", net.depth(), records.len())?;
        let lif = *net.lif();
        for (l, rec) in records.iter().enumerate() {
            let post_leak = self.post_leak(net, l);
            let g = &mut self.surrogates[l];
            g.zip_mut_with(&rec.pre_activation, |g, &x| *g = net.spike_derivative(x));
            let g = g.as_slice().expect("contiguous");
            let pre = rec.pre_spikes.view();
            match &mut self.traces[l] {
                TraceBundle::Ottt(t) => t.update(pre, lif.leak),
                TraceBundle::Ostl(t) => t.update(pre, g, lif.leak, lif.threshold, self.options.reset),
                TraceBundle::Otpe(t) => {
                    t.update(pre, g, lif.leak, post_leak, lif.threshold, self.options.reset)
                }
                TraceBundle::ApproxOtpe(t) => t.update(pre, g, lif.leak, post_leak),
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, net: &Network, delta: ArrayView1<f64>) -> Result<()> {
        let factors: Vec<&Array1<f64>> = (0..net.depth()).map(|l| self.factor(l)).collect();
        let ds = spatial_backward(net, delta, &factors)?;
        let last = net.depth() - 1;
        let f_variant = self.algorithm.is_f_variant();
        for (l, d) in ds.iter().enumerate() {
            let grad = &mut self.grads.layers[l];
            let own_step_only = l == last && !f_variant;
            match &self.traces[l] {
                TraceBundle::Ostl(t) => ostl_layer_grad(grad, d.view(), &t.e),
                TraceBundle::Ottt(t) => {
                    ottt_layer_grad(grad, d.view(), self.surrogates[l].as_slice().unwrap(), &t.a_hat)
                }
                TraceBundle::Otpe(t) if own_step_only => ostl_layer_grad(grad, d.view(), t.e()),
                TraceBundle::Otpe(t) => otpe_layer_grad(grad, d.view(), &t.r_hat),
                TraceBundle::ApproxOtpe(t) if own_step_only => {
                    ottt_layer_grad(grad, d.view(), self.surrogates[l].as_slice().unwrap(), &t.a_hat)
                }
                TraceBundle::ApproxOtpe(t) => approx_otpe_layer_grad(grad, d.view(), t),
            }
        }
        Ok(())
    }

    fn gradients(&self) -> &GradientRecord {
        &self.grads
    }

    fn take_gradients(&mut self) -> GradientRecord {
        let out = self.grads.clone();
        self.grads.fill_zero();
        out
    }

    fn reset_traces(&mut self) {
        for t in &mut self.traces {
            match t {
                TraceBundle::Ottt(t) => t.a_hat.fill(0.0),
                TraceBundle::Ostl(t) => {
                    t.p.fill(0.0);
                    t.e.fill(0.0);
                }
                TraceBundle::Otpe(t) => {
                    t.p.fill(0.0);
                    t.r_hat.fill(0.0);
                    t.e.fill(0.0);
                    if let Some(a) = &mut t.average {
                        a.reset();
                    }
                }
                TraceBundle::ApproxOtpe(t) => {
                    t.a_hat.fill(0.0);
                    t.z_hat.fill(0.0);
                    t.average.reset();
                }
            }
        }
        self.surrogates.iter_mut().for_each(|g| g.fill(0.0));
    }

    fn trace_elements(&self) -> Vec<usize> {
        self.traces.iter().map(TraceBundle::elements).collect()
    }
}

/// Leaky sum of output spikes, `o_t = λ_o·o_{t−1} + s^L_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputAccumulator {
    pub sum: Array1<f64>,
    pub leak: f64,
}

impl OutputAccumulator {
    pub fn new(n: usize, leak: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&leak) {
            return Err(Error::config(format!("output leak must lie in [0, 1], got {leak}")));
        }
        Ok(Self {
            sum: Array1::zeros(n),
            leak,
        })
    }

    pub fn accumulate(&mut self, spikes: ArrayView1<f64>) {
        let leak = self.leak;
        self.sum.zip_mut_with(&spikes, |o, &s| *o = leak * *o + s);
    }

    pub fn reset(&mut self) {
        self.sum.fill(0.0);
    }
}
