//! Exact gradient engines: reverse-mode through the stored unroll (BPTT) and
//! forward-mode influence tracking (RTRL).

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::grad::{Algorithm, GradientRecord, OnlineGradient, ResetMode};
use crate::snn::{Network, StepRecord, Trajectory};

/// Default cap on RTRL influence-tensor elements (≈ 400 MB of `f64`).
pub const DEFAULT_RTRL_CAP: usize = 50_000_000;

/// Reverse-mode gradients of a loss whose derivative at the output spikes is
/// `deltas[t]` for every step.
pub fn bptt_gradients(
    net: &Network,
    trajectory: &Trajectory,
    deltas: &[Array1<f64>],
    reset: ResetMode,
) -> Result<GradientRecord> {
    Error::check_dim("bptt deltas", trajectory.len(), deltas.len())?;
    let lif = net.lif();
    let depth = net.depth();
    let mut grads = GradientRecord::zeros(net);
    // adjoint of U^l_t, carried backwards from step t+1
    let mut membrane_adj: Vec<Array1<f64>> = net
        .layers()
        .iter()
        .map(|l| Array1::zeros(l.n_out()))
        .collect();

    for (records, delta) in trajectory.steps.iter().zip(deltas).rev() {
        Error::check_dim("bptt delta width", net.n_outputs(), delta.len())?;
        let mut spike_adj = delta.clone();
        for l in (0..depth).rev() {
            let rec = &records[l];
            let x_adj: Array1<f64> = rec
                .pre_activation
                .iter()
                .zip(spike_adj.iter())
                .zip(membrane_adj[l].iter())
                .map(|((&x, &ds), &du)| {
                    let g = net.spike_derivative(x);
                    ds * g + du * reset.membrane_factor(g, lif.threshold)
                })
                .collect();
            add_outer(&mut grads.layers[l], x_adj.view(), rec.pre_spikes.view());
            if l > 0 {
                spike_adj = net.layers()[l].weights.t().dot(&x_adj);
            }
            membrane_adj[l] = x_adj * lif.leak;
        }
    }
    Ok(grads)
}

/// `grad += a ⊗ b`
pub(crate) fn add_outer(grad: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    let n_in = b.len();
    let b = b.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| b.to_vec());
    let g = grad.as_slice_mut().expect("gradients are contiguous");
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut g[i * n_in..(i + 1) * n_in];
        for (r, &bj) in row.iter_mut().zip(&b) {
            *r += ai * bj;
        }
    }
}

/// Influence tensors `∂U^l/∂θ^m` for every state layer `l` and parameter
/// layer `m ≤ l`, each shaped `[n_l × n_m × n_{m,in}]`.
#[derive(Debug, Clone)]
pub struct InfluenceTensor {
    blocks: Vec<Vec<Array3<f64>>>,
}

impl InfluenceTensor {
    pub fn element_count(widths: &[usize]) -> usize {
        let depth = widths.len() - 1;
        (0..depth)
            .map(|l| {
                (0..=l)
                    .map(|m| widths[l + 1] * widths[m + 1] * widths[m])
                    .sum::<usize>()
            })
            .sum()
    }

    fn zeros(net: &Network) -> Self {
        let widths = net.widths();
        let blocks = (0..net.depth())
            .map(|l| {
                (0..=l)
                    .map(|m| Array3::zeros((widths[l + 1], widths[m + 1], widths[m])))
                    .collect()
            })
            .collect();
        Self { blocks }
    }

    /// `∂U^l/∂θ^m`
    pub fn block(&self, state_layer: usize, param_layer: usize) -> &Array3<f64> {
        &self.blocks[state_layer][param_layer]
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().flatten().map(Array3::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    fn fill_zero(&mut self) {
        self.blocks.iter_mut().flatten().for_each(|b| b.fill(0.0));
    }
}

/// Real-time recurrent learning over the full feed-forward stack.
#[derive(Debug, Clone)]
pub struct Rtrl {
    reset: ResetMode,
    influence: InfluenceTensor,
    /// `∂s^L_t/∂θ^m` for the current step.
    output_sensitivity: Vec<Array3<f64>>,
    grads: GradientRecord,
}

impl Rtrl {
    /// Refuses networks whose influence tensor exceeds `cap` elements.
    pub fn new(net: &Network, reset: ResetMode, cap: usize) -> Result<Self> {
        let required = InfluenceTensor::element_count(&net.widths());
        if required > cap {
            return Err(Error::ResourceCap {
                what: "RTRL influence tensor",
                required,
                cap,
            });
        }
        let influence = InfluenceTensor::zeros(net);
        let output_sensitivity = influence.blocks[net.depth() - 1].clone();
        Ok(Self {
            reset,
            influence,
            output_sensitivity,
            grads: GradientRecord::zeros(net),
        })
    }

    pub fn influence(&self) -> &InfluenceTensor {
        &self.influence
    }
}

impl OnlineGradient for Rtrl {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Rtrl
    }

    fn observe(&mut self, net: &Network, records: &[StepRecord]) -> Result<()> {
        Error::check_dim("rtrl records", net.depth(), records.len())?;
        let lif = net.lif();
        // ∂s^{l-1}_t/∂θ^m for m < l, carried up the stack within this step
        let mut below: Vec<Array3<f64>> = Vec::new();
        for (l, rec) in records.iter().enumerate() {
            let g: Vec<f64> = rec
                .pre_activation
                .iter()
                .map(|&x| net.spike_derivative(x))
                .collect();
            let theta = &net.layers()[l].weights;
            let mut spikes_wrt = Vec::with_capacity(l + 1);
            for m in 0..=l {
                let block = &mut self.influence.blocks[l][m];
                let (n_l, n_m, n_min) = block.dim();
                // ∂x^l_t/∂θ^m
                let mut dx = block.mapv(|v| v * lif.leak);
                if m < l {
                    let flat = below[m]
                        .view()
                        .into_shape_with_order((theta.ncols(), n_m * n_min))
                        .expect("contiguous sensitivity");
                    let spatial = theta.dot(&flat);
                    dx += &spatial
                        .into_shape_with_order((n_l, n_m, n_min))
                        .expect("reshape");
                } else {
                    for i in 0..n_l {
                        for (j, &s) in rec.pre_spikes.iter().enumerate() {
                            dx[[i, i, j]] += s;
                        }
                    }
                }
                let mut ds = dx.clone();
                for (i, &gi) in g.iter().enumerate() {
                    ds.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * gi);
                    let keep = self.reset.membrane_factor(gi, lif.threshold);
                    dx.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * keep);
                }
                *block = dx;
                spikes_wrt.push(ds);
            }
            below = spikes_wrt;
        }
        self.output_sensitivity = below;
        Ok(())
    }

    fn accumulate(&mut self, net: &Network, delta: ArrayView1<f64>) -> Result<()> {
        Error::check_dim("rtrl delta", net.n_outputs(), delta.len())?;
        for (grad, sens) in self.grads.layers.iter_mut().zip(&self.output_sensitivity) {
            for (i, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    grad.scaled_add(d, &sens.index_axis(Axis(0), i));
                }
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
        self.influence.fill_zero();
        self.output_sensitivity.iter_mut().for_each(|b| b.fill(0.0));
    }

    fn trace_elements(&self) -> Vec<usize> {
        self.influence
            .blocks
            .iter()
            .map(|row| row.iter().map(Array3::len).sum())
            .collect()
    }
}

/// Convenience wrapper running RTRL over a whole example.
pub fn rtrl_gradients(
    net: &Network,
    example: ndarray::ArrayView2<f64>,
    deltas: &[Array1<f64>],
    reset: ResetMode,
    cap: usize,
) -> Result<GradientRecord> {
    Error::check_dim("rtrl deltas", example.nrows(), deltas.len())?;
    let mut engine = Rtrl::new(net, reset, cap)?;
    let mut states = net.fresh_states();
    for (row, delta) in example.rows().into_iter().zip(deltas) {
        let records = crate::snn::forward_step(net, row, &mut states)?;
        engine.observe(net, &records)?;
        engine.accumulate(net, delta.view())?;
    }
    Ok(engine.take_gradients())
}
