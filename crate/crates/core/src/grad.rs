//! Shared gradient containers and the interface every forward-mode engine
//! implements.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{Network, StepRecord, Trajectory};

/// How the subtraction reset enters `∂U_t/∂U_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Reset treated as a constant: `∂U_t/∂U_{t-1} = λ`.
    Detach,
    /// Reset differentiated through the surrogate: `λ·(1 − V_th·g_t)`.
    #[default]
    Surrogate,
}

impl ResetMode {
    /// `∂U_t/∂x_t` for a neuron with surrogate value `g`.
    #[inline]
    pub fn membrane_factor(self, g: f64, threshold: f64) -> f64 {
        match self {
            ResetMode::Detach => 1.0,
            ResetMode::Surrogate => 1.0 - threshold * g,
        }
    }
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResetMode::Detach => "detach",
            ResetMode::Surrogate => "surrogate",
        })
    }
}

impl FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detach" => Ok(ResetMode::Detach),
            "surrogate" => Ok(ResetMode::Surrogate),
            other => Err(Error::config(format!("unknown reset mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Bptt,
    Rtrl,
    Ostl,
    Ottt,
    Otpe,
    ApproxOtpe,
    FOtpe,
    FApproxOtpe,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Bptt,
        Algorithm::Rtrl,
        Algorithm::Ostl,
        Algorithm::Ottt,
        Algorithm::Otpe,
        Algorithm::ApproxOtpe,
        Algorithm::FOtpe,
        Algorithm::FApproxOtpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bptt => "bptt",
            Algorithm::Rtrl => "rtrl",
            Algorithm::Ostl => "ostl",
            Algorithm::Ottt => "ottt",
            Algorithm::Otpe => "otpe",
            Algorithm::ApproxOtpe => "approx_otpe",
            Algorithm::FOtpe => "f_otpe",
            Algorithm::FApproxOtpe => "f_approx_otpe",
        }
    }

    /// F-variants apply the postsynaptic trace to a leaky sum of the outputs.
    pub fn is_f_variant(self) -> bool {
        matches!(self, Algorithm::FOtpe | Algorithm::FApproxOtpe)
    }

    /// Everything except BPTT can run without storing the unroll.
    pub fn supports_online(self) -> bool {
        self != Algorithm::Bptt
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

/// Per-layer `∂L/∂θ^l`, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub layers: Vec<Array2<f64>>,
}

impl GradientRecord {
    pub fn zeros(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn add_assign(&mut self, other: &GradientRecord) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.layers {
            *a *= factor;
        }
    }

    pub fn fill_zero(&mut self) {
        for a in &mut self.layers {
            a.fill(0.0);
        }
    }

    /// All layers concatenated in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &GradientRecord) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// A gradient engine that runs forward in time alongside the network.
///
/// Per step the caller first hands over the forward records (`observe`), then
/// the loss derivative at the output for that same step (`accumulate`).
pub trait OnlineGradient {
    fn algorithm(&self) -> Algorithm;

    fn observe(&mut self, net: &Network, records: &[StepRecord]) -> Result<()>;

    /// `delta` is `∂L_t/∂s^L_t`, or `∂L_t/∂o_t` for F-variants.
    fn accumulate(&mut self, net: &Network, delta: ArrayView1<f64>) -> Result<()>;

    fn gradients(&self) -> &GradientRecord;

    /// Return the accumulated gradient and start a fresh accumulation.
    fn take_gradients(&mut self) -> GradientRecord;

    /// Zero every trace; called at example boundaries.
    fn reset_traces(&mut self);

    /// Persistent trace elements held per layer.
    fn trace_elements(&self) -> Vec<usize>;
}

/// Drive an engine over a stored unroll with precomputed per-step deltas.
pub fn gradients_for_sequence<G: OnlineGradient + ?Sized>(
    engine: &mut G,
    net: &Network,
    trajectory: &Trajectory,
    deltas: &[Array1<f64>],
) -> Result<GradientRecord> {
    Error::check_dim("per-step deltas", trajectory.len(), deltas.len())?;
    engine.reset_traces();
    engine.take_gradients();
    for (records, delta) in trajectory.steps.iter().zip(deltas) {
        engine.observe(net, records)?;
        engine.accumulate(net, delta.view())?;
    }
    Ok(engine.take_gradients())
}
