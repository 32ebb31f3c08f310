use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on each step's output spikes, summed over time.
    PerStepCe,
    /// Cross-entropy on the `λ_o`-weighted sum of all output spikes.
    SequenceCeOnSum,
    /// Cross-entropy on the running leaky sum `o_t`, at every step.
    LeakySumCe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::PerStepCe => "per_step_ce",
            LossKind::SequenceCeOnSum => "sequence_ce_on_sum",
            LossKind::LeakySumCe => "leaky_sum_ce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [LossKind::PerStepCe, LossKind::SequenceCeOnSum, LossKind::LeakySumCe]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// `λ_o` of the output accumulator (unused by `PerStepCe`).
    pub output_leak: f64,
    pub num_classes: usize,
}

/// Softmax cross-entropy and its gradient `softmax(z) − onehot(label)`.
pub fn softmax_cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            num_classes: logits.len(),
        });
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    let loss = total.ln() + max - logits[label];
    let mut grad = exp / total;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

impl LossSpec {
    pub fn new(kind: LossKind, output_leak: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&output_leak) {
            return Err(Error::config(format!("output leak must lie in [0, 1], got {output_leak}")));
        }
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(Self {
            kind,
            output_leak,
            num_classes,
        })
    }

    fn check_width(&self, n: usize) -> Result<()> {
        Error::check_dim("loss output width", self.num_classes, n)
    }

    /// Loss of a whole output sequence and `∂L/∂s_t` for every step.
    pub fn sequence_loss(&self, outputs: &[Array1<f64>], label: usize) -> Result<(f64, Vec<Array1<f64>>)> {
        let n = self.num_classes;
        if let Some(o) = outputs.first() {
            self.check_width(o.len())?;
        }
        match self.kind {
            LossKind::PerStepCe => {
                let mut total = 0.0;
                let mut deltas = Vec::with_capacity(outputs.len());
                for o in outputs {
                    let (l, d) = softmax_cross_entropy(o.view(), label)?;
                    total += l;
                    deltas.push(d);
                }
                Ok((total, deltas))
            }
            LossKind::SequenceCeOnSum => {
                let sum = self.leaky_sum(outputs);
                let (loss, grad) = softmax_cross_entropy(sum.view(), label)?;
                let mut deltas = vec![Array1::zeros(n); outputs.len()];
                let mut w = 1.0;
                for d in deltas.iter_mut().rev() {
                    *d = &grad * w;
                    w *= self.output_leak;
                }
                Ok((loss, deltas))
            }
            LossKind::LeakySumCe => {
                let mut acc = Array1::zeros(n);
                let mut grads = Vec::with_capacity(outputs.len());
                let mut total = 0.0;
                for o in outputs {
                    acc = acc * self.output_leak + o;
                    let (l, g) = softmax_cross_entropy(acc.view(), label)?;
                    total += l;
                    grads.push(g);
                }
                // ∂L/∂s_t = Σ_{t' ≥ t} λ_o^{t'−t} ∂L_{t'}/∂o_{t'}
                let mut carry: Array1<f64> = Array1::zeros(n);
                let mut deltas = vec![Array1::zeros(n); outputs.len()];
                for (d, g) in deltas.iter_mut().zip(&grads).rev() {
                    carry = carry * self.output_leak + g;
                    *d = carry.clone();
                }
                Ok((total, deltas))
            }
        }
    }

    /// `∂L/∂o_t` through the direct path only, for engines that carry the
    /// output accumulator in their own traces.
    pub fn accumulator_deltas(&self, outputs: &[Array1<f64>], label: usize) -> Result<(f64, Vec<Array1<f64>>)> {
        let n = self.num_classes;
        if let Some(o) = outputs.first() {
            self.check_width(o.len())?;
        }
        match self.kind {
            LossKind::PerStepCe => Err(Error::config(
                "per_step_ce has no accumulator form; F-variants need sequence_ce_on_sum or leaky_sum_ce",
            )),
            LossKind::SequenceCeOnSum => {
                let sum = self.leaky_sum(outputs);
                let (loss, grad) = softmax_cross_entropy(sum.view(), label)?;
                let mut deltas = vec![Array1::zeros(n); outputs.len()];
                if let Some(last) = deltas.last_mut() {
                    *last = grad;
                }
                Ok((loss, deltas))
            }
            LossKind::LeakySumCe => {
                let mut acc = Array1::zeros(n);
                let mut total = 0.0;
                let mut deltas = Vec::with_capacity(outputs.len());
                for o in outputs {
                    acc = acc * self.output_leak + o;
                    let (l, g) = softmax_cross_entropy(acc.view(), label)?;
                    total += l;
                    deltas.push(g);
                }
                Ok((total, deltas))
            }
        }
    }

    /// Instantaneous loss for online learning.
    ///
    /// `accumulated` is the leaky output sum including this step's spikes.
    /// The returned derivative is taken with respect to this step's spikes
    /// (`PerStepCe`) or to the accumulator (`LeakySumCe`); both coincide on
    /// the direct path since `∂o_t/∂s_t = 1`.
    pub fn step_loss(
        &self,
        spikes: ArrayView1<f64>,
        accumulated: ArrayView1<f64>,
        label: usize,
    ) -> Result<(f64, Array1<f64>)> {
        self.check_width(spikes.len())?;
        match self.kind {
            LossKind::PerStepCe => softmax_cross_entropy(spikes, label),
            LossKind::LeakySumCe => softmax_cross_entropy(accumulated, label),
            LossKind::SequenceCeOnSum => Err(Error::config(
                "sequence_ce_on_sum has no per-step form; use per_step_ce or leaky_sum_ce online",
            )),
        }
    }

    /// `Σ_t λ_o^{T−t} s_t`, or the plain sum for `PerStepCe`.
    pub fn leaky_sum(&self, outputs: &[Array1<f64>]) -> Array1<f64> {
        let leak = match self.kind {
            LossKind::PerStepCe => 1.0,
            _ => self.output_leak,
        };
        let mut acc = Array1::zeros(self.num_classes);
        for o in outputs {
            acc = acc * leak + o;
        }
        acc
    }

    /// Predicted class: argmax of the accumulated outputs, lowest index on ties.
    pub fn predict(&self, outputs: &[Array1<f64>]) -> usize {
        argmax(self.leaky_sum(outputs).view())
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (l, _) = softmax_cross_entropy(Array1::zeros(10).view(), 3).unwrap();
        assert_abs_diff_eq!(l, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let (l, g) = softmax_cross_entropy(array![0.0, 200.0, 0.0].view(), 1).unwrap();
        assert!(l < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(array![0.0, 1.0].view(), 2),
            Err(Error::Label { label: 2, .. })
        ));
    }

    #[test]
    fn sequence_sum_delta_closed_form() {
        let spec = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 3).unwrap();
        let outputs = vec![array![1.0, 0.0, 0.0], array![1.0, 1.0, 0.0], array![0.0, 1.0, 1.0]];
        let (loss, deltas) = spec.sequence_loss(&outputs, 2).unwrap();
        // summed outputs [2, 2, 1]
        let z = [2f64, 2.0, 1.0];
        let norm: f64 = z.iter().map(|v| v.exp()).sum();
        assert_abs_diff_eq!(loss, norm.ln() - 1.0, epsilon = 1e-12);
        let expect = [2f64.exp() / norm, 2f64.exp() / norm, 1f64.exp() / norm - 1.0];
        for d in &deltas {
            for k in 0..3 {
                assert_abs_diff_eq!(d[k], expect[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn leaky_sum_deltas_match_finite_differences() {
        let spec = LossSpec::new(LossKind::LeakySumCe, 0.8, 3).unwrap();
        let outputs = vec![array![0.3, 0.1, 0.0], array![1.0, 0.2, 0.5], array![0.0, 0.7, 0.1]];
        let (_, deltas) = spec.sequence_loss(&outputs, 1).unwrap();
        let h = 1e-6;
        for t in 0..3 {
            for k in 0..3 {
                let mut up = outputs.clone();
                up[t][k] += h;
                let mut down = outputs.clone();
                down[t][k] -= h;
                let fd = (spec.sequence_loss(&up, 1).unwrap().0 - spec.sequence_loss(&down, 1).unwrap().0)
                    / (2.0 * h);
                assert_abs_diff_eq!(deltas[t][k], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn online_sequence_loss_is_rejected() {
        let spec = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 2).unwrap();
        let z = array![0.0, 1.0];
        assert!(spec.step_loss(z.view(), z.view(), 0).is_err());
    }

    #[test]
    fn prediction_breaks_ties_low() {
        let spec = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 3).unwrap();
        assert_eq!(spec.predict(&[array![0.0, 0.0, 0.0]]), 0);
        assert_eq!(spec.predict(&[array![0.0, 1.0, 1.0], array![0.0, 0.0, 1.0]]), 2);
    }
}
