//! Feed-forward networks of leaky integrate-and-fire neurons.
//!
//! Each dense layer integrates the spikes of the layer below:
//!
//! ```text
//! x_t = λ·U_{t-1} + θ·s_pre_t − V_th
//! s_t = H(x_t)
//! U_t = λ·U_{t-1} + θ·s_pre_t − V_th·s_t
//! ```
//!
//! The spike nonlinearity has zero derivative almost everywhere, so every
//! gradient engine uses the fast-sigmoid derivative `1/(1 + k|x|)²` in its
//! place. Input spikes enter directly as `s_pre` of the first layer.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fast-sigmoid derivative evaluated at the pre-threshold argument `x`.
#[inline]
pub fn surrogate(x: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * x.abs();
    1.0 / (d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Per-step membrane decay, shared by every layer.
    pub leak: f64,
    pub threshold: f64,
    /// Fast-sigmoid slope used by the surrogate derivative.
    pub slope: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            leak: 0.9,
            threshold: 1.0,
            slope: 25.0,
        }
    }
}

impl LifParams {
    pub fn new(leak: f64, threshold: f64, slope: f64) -> Result<Self> {
        let p = Self {
            leak,
            threshold,
            slope,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::config(format!("leak must lie in [0, 1), got {}", self.leak)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(Error::config(format!("surrogate slope must be > 0, got {}", self.slope)));
        }
        Ok(())
    }
}

/// Spike nonlinearity used by the forward pass.
///
/// `Sigmoid` replaces the step by `σ(k·x)` so the loss becomes differentiable;
/// it exists for finite-difference probes of the chain-rule machinery and is
/// never used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpikeFunction {
    #[default]
    Heaviside,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[n_out × n_in]`
    pub weights: Array2<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("layer weights must be finite"));
        }
        Ok(Self { weights })
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    lif: LifParams,
    spike_fn: SpikeFunction,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>, lif: LifParams) -> Result<Self> {
        lif.validate()?;
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            Error::check_dim("layer chaining", pair[0].n_out(), pair[1].n_in())?;
        }
        Ok(Self {
            layers,
            lif,
            spike_fn: SpikeFunction::Heaviside,
        })
    }

    /// Random network with widths `[n_input, h_1, …, n_output]`.
    ///
    /// Weights are drawn uniformly from `±gain/√n_in`.
    pub fn init(widths: &[usize], lif: LifParams, gain: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("widths must name the input and at least one layer"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = gain / (n_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-1.0..1.0) * bound);
                DenseLayer { weights }
            })
            .collect();
        Self::new(layers, lif)
    }

    /// Copy of this network whose forward pass uses `σ(k·x)` spikes.
    pub fn smoothed(&self) -> Self {
        Self {
            spike_fn: SpikeFunction::Sigmoid,
            ..self.clone()
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn lif(&self) -> &LifParams {
        &self.lif
    }

    pub fn spike_fn(&self) -> SpikeFunction {
        self.spike_fn
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[n_input, h_1, …, n_output]`
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].n_in())
            .chain(self.layers.iter().map(DenseLayer::n_out))
            .collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// All weights concatenated layer by layer, row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        Error::check_dim("flat parameters", self.num_parameters(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("parameters must be finite"));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (head, tail) = rest.split_at(layer.weights.len());
            layer.weights.iter_mut().zip(head).for_each(|(w, &p)| *w = p);
            rest = tail;
        }
        Ok(())
    }

    pub fn fresh_states(&self) -> Vec<LayerState> {
        self.layers.iter().map(|l| LayerState::new(l.n_out())).collect()
    }

    /// Spike value for pre-activation `x`.
    #[inline]
    pub fn spike(&self, x: f64) -> f64 {
        match self.spike_fn {
            SpikeFunction::Heaviside => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFunction::Sigmoid => 1.0 / (1.0 + (-self.lif.slope * x).exp()),
        }
    }

    /// `∂s/∂x` as seen by the gradient engines: the fast-sigmoid surrogate for
    /// step spikes, the true derivative for sigmoid spikes.
    #[inline]
    pub fn spike_derivative(&self, x: f64) -> f64 {
        match self.spike_fn {
            SpikeFunction::Heaviside => surrogate(x, self.lif.slope),
            SpikeFunction::Sigmoid => {
                let s = 1.0 / (1.0 + (-self.lif.slope * x).exp());
                self.lif.slope * s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub membrane: Array1<f64>,
    pub spikes: Array1<f64>,
}

impl LayerState {
    pub fn new(n: usize) -> Self {
        Self {
            membrane: Array1::zeros(n),
            spikes: Array1::zeros(n),
        }
    }

    pub fn reset(&mut self) {
        self.membrane.fill(0.0);
        self.spikes.fill(0.0);
    }
}

/// Everything a gradient engine needs about one layer at one time-step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Input spikes `s_pre_t` seen by the layer.
    pub pre_spikes: Array1<f64>,
    /// Pre-threshold argument `x_t = λU_{t-1} + I_t − V_th`.
    pub pre_activation: Array1<f64>,
    pub spikes: Array1<f64>,
}

/// Advance one layer by one step given its already-computed input current.
///
/// Returns the new state and the pre-activation `x_t`.
pub fn lif_step(
    state: &LayerState,
    current: ArrayView1<f64>,
    lif: &LifParams,
) -> Result<(LayerState, Array1<f64>)> {
    lif_step_with(state, current, lif, |x| if x >= 0.0 { 1.0 } else { 0.0 })
}

fn lif_step_with(
    state: &LayerState,
    current: ArrayView1<f64>,
    lif: &LifParams,
    spike: impl Fn(f64) -> f64,
) -> Result<(LayerState, Array1<f64>)> {
    Error::check_dim("lif_step input current", state.membrane.len(), current.len())?;
    let x: Array1<f64> = state.membrane.iter().zip(current.iter()).map(|(&u, &i)| lif.leak * u + i - lif.threshold).collect();
    let spikes = x.mapv(&spike);
    let membrane = (&x + lif.threshold) - &spikes * lif.threshold;
    Ok((LayerState { membrane, spikes }, x))
}

/// Run every layer for one time-step, updating `states` in place.
pub fn forward_step(
    net: &Network,
    input: ArrayView1<f64>,
    states: &mut [LayerState],
) -> Result<Vec<StepRecord>> {
    Error::check_dim("forward_step states", net.depth(), states.len())?;
    Error::check_dim("forward_step input", net.n_inputs(), input.len())?;
    let mut pre = input.to_owned();
    let mut records = Vec::with_capacity(net.depth());
    for (layer, state) in net.layers.iter().zip(states.iter_mut()) {
        let current = layer.weights.dot(&pre);
        let (next, x) = lif_step_with(state, current.view(), &net.lif, |x| net.spike(x))?;
        *state = next;
        records.push(StepRecord {
            pre_spikes: pre,
            pre_activation: x,
            spikes: state.spikes.clone(),
        });
        pre = state.spikes.clone();
    }
    Ok(records)
}

/// Stored unroll of one example: `steps[t][layer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Vec<StepRecord>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Array1<f64>> + '_ {
        self.steps.iter().map(|s| &s.last().expect("non-empty network").spikes)
    }

    /// Number of stored reals across all steps and layers.
    pub fn stored_elements(&self) -> usize {
        self.steps
            .iter()
            .flatten()
            .map(|r| r.pre_spikes.len() + r.pre_activation.len() + r.spikes.len())
            .sum()
    }
}

/// Unroll `net` over an example of shape `[T × channels]` from fresh state.
pub fn forward_sequence(net: &Network, example: ArrayView2<f64>) -> Result<Trajectory> {
    if example.nrows() == 0 {
        return Err(Error::config("an example needs at least one time-step"));
    }
    let mut states = net.fresh_states();
    let steps = example
        .rows()
        .into_iter()
        .map(|row| forward_step(net, row, &mut states))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { steps })
}

/// Batch of binary spike trains `[batch × T × channels]` with class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeRaster {
    pub spikes: Array3<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SpikeRaster {
    pub fn new(spikes: Array3<u8>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Error::check_dim("raster labels", spikes.shape()[0], labels.len())?;
        if let Some(&bad) = spikes.iter().find(|&&v| v > 1) {
            return Err(Error::config(format!("raster entries must be 0 or 1, found {bad}")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Self {
            spikes,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn time_steps(&self) -> usize {
        self.spikes.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.spikes.shape()[2]
    }

    /// Example `i` as a real-valued `[T × channels]` matrix.
    pub fn example(&self, i: usize) -> Array2<f64> {
        self.spikes
            .index_axis(ndarray::Axis(0), i)
            .mapv(f64::from)
    }

    /// New raster holding the listed examples, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let spikes = self.spikes.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            spikes,
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn state(u: f64) -> LayerState {
        LayerState {
            membrane: array![u],
            spikes: array![0.0],
        }
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate(0.0, 25.0), 1.0);
        assert_abs_diff_eq!(surrogate(0.04, 25.0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(surrogate(-0.04, 25.0), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn lif_step_examples() {
        let lif = LifParams::new(0.9, 1.0, 25.0).unwrap();
        let (s, x) = lif_step(&state(0.5), array![0.8].view(), &lif).unwrap();
        assert_eq!(s.spikes[0], 1.0);
        assert_abs_diff_eq!(s.membrane[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(x[0], 0.25, epsilon = 1e-12);

        let (s, _) = lif_step(&state(0.0), array![0.0].view(), &lif).unwrap();
        assert_eq!((s.spikes[0], s.membrane[0]), (0.0, 0.0));

        // x = 0 exactly counts as a spike
        let (s, x) = lif_step(&state(0.0), array![1.0].view(), &lif).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!((s.spikes[0], s.membrane[0]), (1.0, 0.0));
    }

    #[test]
    fn lif_step_rejects_mismatch() {
        let lif = LifParams::default();
        let err = lif_step(&state(0.0), array![1.0, 2.0].view(), &lif).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn lif_params_validation() {
        assert!(LifParams::new(1.0, 1.0, 25.0).is_err());
        assert!(LifParams::new(-0.1, 1.0, 25.0).is_err());
        assert!(LifParams::new(0.5, 0.0, 25.0).is_err());
        assert!(LifParams::new(0.5, 1.0, 0.0).is_err());
        assert!(LifParams::new(0.0, 1.0, 25.0).is_ok());
    }

    #[test]
    fn network_rejects_unchained_layers() {
        let a = DenseLayer::new(Array2::zeros((3, 2))).unwrap();
        let b = DenseLayer::new(Array2::zeros((2, 4))).unwrap();
        assert!(Network::new(vec![a, b], LifParams::default()).is_err());
        assert!(Network::new(vec![], LifParams::default()).is_err());
    }

    #[test]
    fn identity_layer_with_silent_input_is_silent() {
        let net = Network::new(
            vec![DenseLayer::new(Array2::eye(4)).unwrap()],
            LifParams::default(),
        )
        .unwrap();
        let mut states = net.fresh_states();
        let rec = forward_step(&net, Array1::zeros(4).view(), &mut states).unwrap();
        assert!(rec[0].spikes.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn silent_input_keeps_two_layer_net_at_rest() {
        let net = Network::init(&[5, 4, 3], LifParams::default(), 3.0, 1).unwrap();
        let traj = forward_sequence(&net, Array2::zeros((20, 5)).view()).unwrap();
        for step in &traj.steps {
            for r in step {
                assert!(r.spikes.iter().all(|&s| s == 0.0));
                assert!(r.pre_activation.iter().all(|&x| x == -1.0));
            }
        }
    }

    #[test]
    fn single_step_sequence_matches_forward_step() {
        let net = Network::init(&[6, 5, 3], LifParams::default(), 4.0, 3).unwrap();
        let input = array![[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]];
        let traj = forward_sequence(&net, input.view()).unwrap();
        let mut states = net.fresh_states();
        let rec = forward_step(&net, input.row(0), &mut states).unwrap();
        assert_eq!(traj.steps[0], rec);
    }

    #[test]
    fn trajectory_storage_is_linear_in_time() {
        let net = Network::init(&[4, 6, 2], LifParams::default(), 2.0, 9).unwrap();
        let sizes: Vec<usize> = [5, 10, 20, 40]
            .iter()
            .map(|&t| {
                forward_sequence(&net, Array2::ones((t, 4)).view())
                    .unwrap()
                    .stored_elements()
            })
            .collect();
        let per_step = sizes[0] / 5;
        for (t, s) in [5, 10, 20, 40].iter().zip(&sizes) {
            assert_eq!(*s, per_step * t);
        }
    }

    #[test]
    fn raster_rejects_bad_labels_and_values() {
        let spikes = Array3::<u8>::zeros((2, 3, 4));
        assert!(matches!(
            SpikeRaster::new(spikes.clone(), vec![0, 5], 3),
            Err(Error::Label { label: 5, .. })
        ));
        let mut bad = spikes.clone();
        bad[[0, 0, 0]] = 2;
        assert!(SpikeRaster::new(bad, vec![0, 1], 3).is_err());
        assert!(SpikeRaster::new(spikes, vec![0], 3).is_err());
    }
}
