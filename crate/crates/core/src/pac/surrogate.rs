use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PacError;

/// Diagonal normal `p(ξ | ν)` over policy parameters, stored as mean and
/// log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Surrogate {
    pub fn new(mean: Vec<f64>, var: &[f64]) -> Self {
        assert_eq!(mean.len(), var.len());
        Self { mean, log_var: var.iter().map(|v| v.ln()).collect() }
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let n = mean.len();
        Self { mean, log_var: vec![var.ln(); n] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self, d: usize) -> f64 {
        self.log_var[d].exp()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| {
                let z: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * z
            })
            .collect()
    }

    pub fn log_density(&self, xi: &[f64]) -> f64 {
        debug_assert_eq!(xi.len(), self.dim());
        -0.5 * xi
            .iter()
            .zip(self.mean.iter().zip(&self.log_var))
            .map(|(x, (m, lv))| LN_2PI + lv + (x - m).powi(2) * (-lv).exp())
            .sum::<f64>()
    }

    /// Adds `∂ log p(ξ|ν) / ∂(mean, log_var)` scaled by `scale` into the
    /// gradient buffers.
    pub fn accumulate_log_density_grad(&self, xi: &[f64], scale: f64, g_mean: &mut [f64], g_log_var: &mut [f64]) {
        for d in 0..self.dim() {
            let inv = (-self.log_var[d]).exp();
            let e = xi[d] - self.mean[d];
            g_mean[d] += scale * e * inv;
            g_log_var[d] += scale * 0.5 * (e * e * inv - 1.0);
        }
    }

    /// Summary used in logs: mean and variance ranges.
    pub fn summary(&self) -> SurrogateSummary {
        let vars = self.variances();
        let fold = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        SurrogateSummary {
            mean_abs_max: self.mean.iter().fold(0.0, |m, v| m.max(v.abs())),
            var_range: fold(&mut vars.iter().copied()),
            mean: self.mean.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub mean_abs_max: f64,
    pub var_range: (f64, f64),
    pub mean: Vec<f64>,
}

/// Rényi divergence of order 2 between diagonal normals, `D₂(new ‖ old)`,
/// with its gradient with respect to `new`'s mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Renyi2 {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

/// `D₂(new ‖ old)`. Requires `2σ_old² − σ_new² > 0` in every dimension.
pub fn renyi2_diag_gauss(new: &Surrogate, old: &Surrogate) -> Result<f64, PacError> {
    renyi2_with_grad(new, old).map(|r| r.value)
}

pub fn renyi2_with_grad(new: &Surrogate, old: &Surrogate) -> Result<Renyi2, PacError> {
    assert_eq!(new.dim(), old.dim());
    let n = new.dim();
    let mut out = Renyi2 { value: 0.0, d_mean: vec![0.0; n], d_log_var: vec![0.0; n] };
    for d in 0..n {
        let v = new.var(d);
        let v_old = old.var(d);
        let star = 2.0 * v_old - v;
        if !(star > 0.0) {
            return Err(PacError::InfeasibleDivergence { dim: d, var_new: v, var_old: v_old });
        }
        let delta = new.mean[d] - old.mean[d];
        out.value += 0.5 * (2.0 * v_old.ln() - v.ln() - star.ln()) + delta * delta / star;
        out.d_mean[d] = 2.0 * delta / star;
        let d_v = -0.5 / v + 0.5 / star + delta * delta / (star * star);
        out.d_log_var[d] = v * d_v;
    }
    Ok(out)
}
