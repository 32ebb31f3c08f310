//! Random-manifold spiking classification tasks.
//!
//! Each class owns a smooth map from intrinsic coordinates `u ∈ [0,1]^D` to
//! `N` firing values in `[0,1]`. Coordinate `i` of the map is a sum over the
//! `D` intrinsic dimensions of a `K`-harmonic sine series whose amplitudes
//! decay as `k^{−α}`, min-max normalized. An example draws a fresh `u`,
//! evaluates the map of its class and encodes the values as spikes: one
//! spike per neuron at a value-dependent time (time encoding), or a
//! value-dependent number of spikes at shuffled times (rate encoding).

use std::f64::consts::TAU;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::SpikeRaster;

/// Grid resolution used to find each 1-D series' extrema.
const NORMALIZATION_GRID: usize = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One spike per neuron; the value sets the spike time.
    Time,
    /// The value sets the spike count; times are shuffled.
    Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandmanSpec {
    /// Intrinsic manifold dimension `D`.
    pub dim: usize,
    pub num_classes: usize,
    /// Embedding neurons `N` (input channels).
    pub neurons: usize,
    /// Smoothness `α`: harmonic `k` is scaled by `k^{−α}`.
    pub alpha: f64,
    pub harmonics: usize,
    pub time_steps: usize,
    /// Spike count for a value of 1 under rate encoding; `None` = `time_steps`.
    pub max_spikes: Option<usize>,
    pub encoding: Encoding,
    pub seed: u64,
}

impl Default for RandmanSpec {
    fn default() -> Self {
        Self {
            dim: 3,
            num_classes: 10,
            neurons: 50,
            alpha: 1.0,
            harmonics: 4,
            time_steps: 50,
            max_spikes: None,
            encoding: Encoding::Time,
            seed: 0,
        }
    }
}

impl RandmanSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("randman dim must be ≥ 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("randman needs at least two classes"));
        }
        if self.neurons == 0 || self.time_steps == 0 || self.harmonics == 0 {
            return Err(Error::config("randman neurons, time_steps and harmonics must be ≥ 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("randman alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn max_spikes(&self) -> usize {
        self.max_spikes.unwrap_or(self.time_steps)
    }
}

/// Smooth map `[0,1]^D → [0,1]^N` for one class.
#[derive(Debug, Clone)]
pub struct Manifold {
    dim: usize,
    harmonics: usize,
    /// `[neuron][dim][harmonic]`, already scaled by `k^{−α}`.
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
    offset: Vec<f64>,
    range: Vec<f64>,
}

impl Manifold {
    /// Deterministic in `(spec.alpha, spec shape, seed, class_id)`.
    pub fn new(spec: &RandmanSpec, class_id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        let n = spec.neurons * spec.dim * spec.harmonics;
        let mut amplitudes = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for _ in 0..spec.neurons * spec.dim {
            for k in 1..=spec.harmonics {
                amplitudes.push(rng.random::<f64>() * (k as f64).powf(-spec.alpha));
                phases.push(rng.random::<f64>() * TAU);
            }
        }
        let mut m = Self {
            dim: spec.dim,
            harmonics: spec.harmonics,
            amplitudes,
            phases,
            offset: vec![0.0; spec.neurons],
            range: vec![1.0; spec.neurons],
        };
        // The map is additive over dimensions, so its extrema are sums of
        // per-dimension extrema.
        for i in 0..spec.neurons {
            let (mut lo, mut hi) = (0.0, 0.0);
            for d in 0..spec.dim {
                let (a, b) = (0..NORMALIZATION_GRID)
                    .map(|g| m.series(i, d, g as f64 / (NORMALIZATION_GRID - 1) as f64))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                lo += a;
                hi += b;
            }
            m.offset[i] = lo;
            m.range[i] = if hi > lo { hi - lo } else { 1.0 };
        }
        m
    }

    fn series(&self, neuron: usize, dim: usize, u: f64) -> f64 {
        let base = (neuron * self.dim + dim) * self.harmonics;
        (0..self.harmonics)
            .map(|k| {
                let amp = self.amplitudes[base + k];
                amp * (TAU * (k + 1) as f64 * u + self.phases[base + k]).sin()
            })
            .sum()
    }

    pub fn neurons(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        (0..self.neurons())
            .map(|i| {
                let raw: f64 = u.iter().enumerate().map(|(d, &ud)| self.series(i, d, ud)).sum();
                ((raw - self.offset[i]) / self.range[i]).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// One spike per neuron at step `floor(x·(T−1))`.
pub fn time_encode(values: &[f64], time_steps: usize) -> Array2<u8> {
    let mut out = Array2::zeros((time_steps, values.len()));
    for (i, &x) in values.iter().enumerate() {
        let t = ((x.clamp(0.0, 1.0) * (time_steps - 1) as f64).floor() as usize).min(time_steps - 1);
        out[[t, i]] = 1;
    }
    out
}

/// `round(x·max_spikes)` spikes per neuron at distinct shuffled steps.
///
/// Returns the raster and how many neurons had their count clamped to `T`.
pub fn rate_encode<R: Rng + ?Sized>(
    values: &[f64],
    time_steps: usize,
    max_spikes: usize,
    rng: &mut R,
) -> (Array2<u8>, usize) {
    let mut out = Array2::zeros((time_steps, values.len()));
    let mut clamped = 0;
    let mut slots: Vec<usize> = (0..time_steps).collect();
    for (i, &x) in values.iter().enumerate() {
        let mut count = (x.clamp(0.0, 1.0) * max_spikes as f64).round() as usize;
        if count > time_steps {
            clamped += 1;
            count = time_steps;
        }
        slots.shuffle(rng);
        for &t in &slots[..count] {
            out[[t, i]] = 1;
        }
    }
    (out, clamped)
}

/// Generator holding every class manifold.
#[derive(Debug, Clone)]
pub struct Randman {
    spec: RandmanSpec,
    manifolds: Vec<Manifold>,
}

impl Randman {
    pub fn new(spec: RandmanSpec) -> Result<Self> {
        spec.validate()?;
        let manifolds = (0..spec.num_classes)
            .map(|c| Manifold::new(&spec, c, spec.seed))
            .collect();
        Ok(Self { spec, manifolds })
    }

    pub fn spec(&self) -> &RandmanSpec {
        &self.spec
    }

    pub fn manifold(&self, class_id: usize) -> &Manifold {
        &self.manifolds[class_id]
    }

    /// Fresh examples with uniformly drawn labels and coordinates, seeded by
    /// `(spec.seed, batch_index)`.
    pub fn sample_batch(&self, size: usize, batch_index: u64) -> SpikeRaster {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream((1 << 32) + batch_index);
        let mut spikes = Array3::zeros((size, spec.time_steps, spec.neurons));
        let mut labels = Vec::with_capacity(size);
        let mut clamped = 0;
        for mut example in spikes.axis_iter_mut(Axis(0)) {
            let label = rng.random_range(0..spec.num_classes);
            let u: Vec<f64> = (0..spec.dim).map(|_| rng.random::<f64>()).collect();
            let values = self.manifolds[label].eval(&u);
            let raster = match spec.encoding {
                Encoding::Time => time_encode(&values, spec.time_steps),
                Encoding::Rate => {
                    let (r, c) = rate_encode(&values, spec.time_steps, spec.max_spikes(), &mut rng);
                    clamped += c;
                    r
                }
            };
            example.assign(&raster);
            labels.push(label);
        }
        if clamped > 0 {
            log::warn!(
                "rate encoding clamped {clamped} spike counts to {} steps",
                spec.time_steps
            );
        }
        SpikeRaster {
            spikes,
            labels,
            num_classes: spec.num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_variation(m: &Manifold, grid: usize) -> f64 {
        // along the diagonal u_d = s for every dim
        let mut tv = 0.0;
        let mut prev = m.eval(&vec![0.0; m.dim]);
        for g in 1..=grid {
            let s = g as f64 / grid as f64;
            let cur = m.eval(&vec![s; m.dim]);
            tv += prev.iter().zip(&cur).map(|(a, b)| (a - b).abs()).sum::<f64>();
            prev = cur;
        }
        tv
    }

    #[test]
    fn manifold_is_deterministic() {
        let spec = RandmanSpec::default();
        let a = Manifold::new(&spec, 3, 42);
        let b = Manifold::new(&spec, 3, 42);
        let c = Manifold::new(&spec, 4, 42);
        let u = [0.1, 0.7, 0.33];
        assert_eq!(a.eval(&u), b.eval(&u));
        assert_ne!(a.eval(&u), c.eval(&u));
    }

    #[test]
    fn manifold_output_is_in_unit_interval() {
        let spec = RandmanSpec::default();
        let m = Manifold::new(&spec, 0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let u: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            assert!(m.eval(&u).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn smoothness_orders_total_variation() {
        let tvs: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&alpha| {
                let spec = RandmanSpec {
                    alpha,
                    ..RandmanSpec::default()
                };
                total_variation(&Manifold::new(&spec, 0, 11), 400)
            })
            .collect();
        for w in tvs.windows(2) {
            assert!(w[0] > w[1], "{tvs:?}");
        }
    }

    #[test]
    fn time_encoding_boundaries() {
        let r = time_encode(&[0.0, 1.0, 0.5], 50);
        assert_eq!(r[[0, 0]], 1);
        assert_eq!(r[[49, 1]], 1);
        assert_eq!(r[[24, 2]], 1);
        for col in r.columns() {
            assert_eq!(col.iter().map(|&v| v as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn rate_encoding_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, clamped) = rate_encode(&[0.0, 1.0, 0.5], 20, 20, &mut rng);
        assert_eq!(clamped, 0);
        let counts: Vec<usize> = r
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|&v| v as usize).sum())
            .collect();
        assert_eq!(counts, vec![0, 20, 10]);

        let (r, clamped) = rate_encode(&[1.0], 10, 25, &mut rng);
        assert_eq!(clamped, 1);
        assert_eq!(r.iter().map(|&v| v as usize).sum::<usize>(), 10);
    }

    #[test]
    fn batches_are_reproducible_and_fresh() {
        let gen = Randman::new(RandmanSpec::default()).unwrap();
        let a = gen.sample_batch(16, 0);
        assert_eq!(a, gen.sample_batch(16, 0));
        assert_ne!(a, gen.sample_batch(16, 1));
        for e in a.spikes.axis_iter(Axis(0)) {
            assert_eq!(e.iter().map(|&v| v as usize).sum::<usize>(), 50);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = RandmanSpec {
            alpha: 0.0,
            ..RandmanSpec::default()
        };
        assert!(Randman::new(bad).is_err());
        let bad = RandmanSpec {
            dim: 0,
            ..RandmanSpec::default()
        };
        assert!(Randman::new(bad).is_err());
    }
}
