//! Two-dimensional loss landscapes `f(α, β) = L(θ* + α·δ + β·ν)` and the
//! projection of training checkpoints onto the `(δ, ν)` plane.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::snn::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSpec {
    pub center: Vec<f64>,
    pub delta: Vec<f64>,
    pub nu: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LandscapeSpec {
    /// Directions are raw parameter differences `initial − center` and
    /// `final − center`.
    pub fn from_models(
        center: &[f64],
        initial: &[f64],
        final_: &[f64],
        alphas: Vec<f64>,
        betas: Vec<f64>,
    ) -> Result<Self> {
        Error::check_dim("landscape initial model", center.len(), initial.len())?;
        Error::check_dim("landscape final model", center.len(), final_.len())?;
        let spec = Self {
            center: center.to_vec(),
            delta: initial.iter().zip(center).map(|(a, c)| a - c).collect(),
            nu: final_.iter().zip(center).map(|(a, c)| a - c).collect(),
            alphas,
            betas,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim("landscape delta", self.center.len(), self.delta.len())?;
        Error::check_dim("landscape nu", self.center.len(), self.nu.len())?;
        let (dd, nn, dn) = (dot(&self.delta, &self.delta), dot(&self.nu, &self.nu), dot(&self.delta, &self.nu));
        if dd == 0.0 || nn == 0.0 {
            return Err(Error::config("landscape directions must be nonzero"));
        }
        // |sin| of the angle between the directions
        let det = dd * nn - dn * dn;
        if det <= 1e-12 * dd * nn {
            return Err(Error::config("landscape directions are linearly dependent"));
        }
        Ok(())
    }

    pub fn point(&self, alpha: f64, beta: f64) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.delta)
            .zip(&self.nu)
            .map(|((c, d), n)| c + alpha * d + beta * n)
            .collect()
    }
}

/// Loss at every `(alphas[i], betas[j])`, shaped `[alphas × betas]`.
pub fn landscape_grid(
    spec: &LandscapeSpec,
    template: &Network,
    mut loss: impl FnMut(&Network) -> Result<f64>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut net = template.clone();
    let mut grid = Array2::zeros((spec.alphas.len(), spec.betas.len()));
    for (i, &a) in spec.alphas.iter().enumerate() {
        for (j, &b) in spec.betas.iter().enumerate() {
            net.set_flat_params(&spec.point(a, b))?;
            grid[[i, j]] = loss(&net)?;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Projection {
    pub alpha: f64,
    pub beta: f64,
    /// Norm of the component of `θ − θ*` outside the `(δ, ν)` plane.
    pub residual: f64,
}

/// Least-squares coordinates of each checkpoint in the `(δ, ν)` plane.
pub fn trajectory_project(checkpoints: &[Vec<f64>], spec: &LandscapeSpec) -> Result<Vec<Projection>> {
    spec.validate()?;
    let (dd, nn, dn) = (dot(&spec.delta, &spec.delta), dot(&spec.nu, &spec.nu), dot(&spec.delta, &spec.nu));
    let det = dd * nn - dn * dn;
    checkpoints
        .iter()
        .map(|theta| {
            Error::check_dim("checkpoint parameters", spec.center.len(), theta.len())?;
            let diff: Vec<f64> = theta.iter().zip(&spec.center).map(|(t, c)| t - c).collect();
            let (pd, pn) = (dot(&diff, &spec.delta), dot(&diff, &spec.nu));
            let alpha = (nn * pd - dn * pn) / det;
            let beta = (dd * pn - dn * pd) / det;
            let residual = diff
                .iter()
                .zip(&spec.delta)
                .zip(&spec.nu)
                .map(|((x, d), n)| {
                    let r = x - alpha * d - beta * n;
                    r * r
                })
                .sum::<f64>()
                .sqrt();
            Ok(Projection { alpha, beta, residual })
        })
        .collect()
}
