use serde::{Deserialize, Serialize};

use super::surrogate::{renyi2_with_grad, Surrogate};
use super::PacError;

/// Samples drawn from one surrogate during one optimisation iteration.
#[derive(Debug, Clone)]
pub struct ArchiveIteration {
    pub source: Surrogate,
    pub samples: Vec<Vec<f64>>,
    /// Raw (unshifted) trajectory costs.
    pub costs: Vec<f64>,
    pub violations: Vec<bool>,
    /// `ln p(ξ_ij | ν_i)`, cached at insertion.
    log_source: Vec<f64>,
}

impl ArchiveIteration {
    pub fn new(source: Surrogate, samples: Vec<Vec<f64>>, costs: Vec<f64>, violations: Vec<bool>) -> Self {
        assert_eq!(samples.len(), costs.len());
        assert_eq!(samples.len(), violations.len());
        let log_source = samples.iter().map(|x| source.log_density(x)).collect();
        Self { source, samples, costs, violations, log_source }
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// All samples of the current planning interval. Bounds are computed on
/// `J − shift`, which must be non-negative.
#[derive(Debug, Clone, Default)]
pub struct SampleArchive {
    pub iterations: Vec<ArchiveIteration>,
    pub shift: f64,
}

impl SampleArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, it: ArchiveIteration) {
        self.iterations.push(it);
    }

    pub fn num_samples(&self) -> usize {
        self.iterations.iter().map(|i| i.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples() == 0
    }

    pub fn min_cost(&self) -> f64 {
        self.iterations.iter().flat_map(|i| i.costs.iter()).fold(f64::INFINITY, |m, &c| m.min(c))
    }

    /// Sets `shift = min J − ε` so every shifted cost is at least `ε`.
    pub fn shift_to_min(&mut self, eps: f64) {
        self.shift = self.min_cost() - eps;
    }

    pub fn shifted(&self, cost: f64) -> f64 {
        cost - self.shift
    }

    /// Archive-wide mean shifted cost: the normalisation constant `w`.
    pub fn mean_shifted_cost(&self) -> f64 {
        let n = self.num_samples();
        self.iterations.iter().flat_map(|i| i.costs.iter()).map(|&c| c - self.shift).sum::<f64>() / n as f64
    }

    pub fn violation_rate(&self) -> f64 {
        let n = self.num_samples();
        self.iterations.iter().flat_map(|i| i.violations.iter()).filter(|&&v| v).count() as f64 / n as f64
    }
}

/// Closed-form minimiser of `α·d + ln(1/δ)/(α N)`, clamped to `range`.
pub fn optimal_alpha(d: f64, n: usize, delta: f64, range: [f64; 2]) -> f64 {
    let a = if d > 0.0 { ((1.0 / delta).ln() / (n as f64 * d)).sqrt() } else { range[1] };
    a.clamp(range[0], range[1])
}

/// Components of one bound, in the units of the quantity bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub alpha: f64,
    /// Importance-weighted empirical mean.
    pub estimate: f64,
    /// `α·d(ν)`
    pub divergence_term: f64,
    /// `Φ_α(δ)`
    pub confidence_term: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BoundWithGrad {
    pub bound: BoundValue,
    pub d_mean: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

/// Generic bound on normalised per-sample values `v_ij ∈ [0, b_i]`,
/// returned in normalised units together with its gradient.
fn bound_core(
    archive: &SampleArchive,
    nu: &Surrogate,
    value: impl Fn(&ArchiveIteration, usize) -> f64,
    b: &[f64],
    delta: f64,
    alpha_range: [f64; 2],
    want_grad: bool,
) -> Result<BoundWithGrad, PacError> {
    if archive.is_empty() {
        return Err(PacError::EmptyArchive);
    }
    let n = archive.num_samples();
    let l = archive.iterations.len() as f64;
    let dim = nu.dim();
    let mut g_est_mean = vec![0.0; dim];
    let mut g_est_lv = vec![0.0; dim];
    let mut g_d_mean = vec![0.0; dim];
    let mut g_d_lv = vec![0.0; dim];
    let mut est = 0.0;
    let mut d = 0.0;
    for (it, &bi) in archive.iterations.iter().zip(b) {
        let div = renyi2_with_grad(nu, &it.source)?;
        let term = bi * bi * div.value.exp() / (2.0 * l);
        d += term;
        if want_grad {
            for k in 0..dim {
                g_d_mean[k] += term * div.d_mean[k];
                g_d_lv[k] += term * div.d_log_var[k];
            }
        }
        for j in 0..it.len() {
            let v = value(it, j);
            if v == 0.0 {
                continue;
            }
            let rho = (nu.log_density(&it.samples[j]) - it.log_source[j]).exp();
            let contrib = rho * v / n as f64;
            est += contrib;
            if want_grad {
                nu.accumulate_log_density_grad(&it.samples[j], contrib, &mut g_est_mean, &mut g_est_lv);
            }
        }
    }
    let alpha = optimal_alpha(d, n, delta, alpha_range);
    let divergence_term = alpha * d;
    let confidence_term = (1.0 / delta).ln() / (alpha * n as f64);
    let value = est + divergence_term + confidence_term;
    if !value.is_finite() {
        return Err(PacError::NonFinite(format!("bound {value} (estimate {est}, d {d})")));
    }
    let (d_mean, d_log_var) = if want_grad {
        (
            g_est_mean.iter().zip(&g_d_mean).map(|(a, b)| a + alpha * b).collect(),
            g_est_lv.iter().zip(&g_d_lv).map(|(a, b)| a + alpha * b).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(BoundWithGrad {
        bound: BoundValue { value, alpha, estimate: est, divergence_term, confidence_term },
        d_mean,
        d_log_var,
    })
}

fn scale(mut g: BoundWithGrad, w: f64) -> BoundWithGrad {
    g.bound.value *= w;
    g.bound.estimate *= w;
    g.bound.divergence_term *= w;
    g.bound.confidence_term *= w;
    g.d_mean.iter_mut().for_each(|v| *v *= w);
    g.d_log_var.iter_mut().for_each(|v| *v *= w);
    g
}

pub(crate) fn cost_bound_grad(
    archive: &SampleArchive,
    nu: &Surrogate,
    w: f64,
    delta: f64,
    alpha_range: [f64; 2],
    want_grad: bool,
) -> Result<BoundWithGrad, PacError> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(PacError::BadNormaliser(w));
    }
    let shift = archive.shift;
    let b: Vec<f64> = archive
        .iterations
        .iter()
        .map(|it| it.costs.iter().fold(0.0_f64, |m, &c| m.max((c - shift) / w)))
        .collect();
    if archive.iterations.iter().flat_map(|i| i.costs.iter()).any(|&c| c - shift < 0.0) {
        return Err(PacError::NegativeCost);
    }
    let g = bound_core(archive, nu, |it, j| (it.costs[j] - shift) / w, &b, delta, alpha_range, want_grad)?;
    Ok(scale(g, w))
}

pub(crate) fn constraint_bound_grad(
    archive: &SampleArchive,
    nu: &Surrogate,
    delta: f64,
    alpha_range: [f64; 2],
    want_grad: bool,
) -> Result<BoundWithGrad, PacError> {
    let b = vec![1.0; archive.iterations.len()];
    let mut g = bound_core(archive, nu, |it, j| if it.violations[j] { 1.0 } else { 0.0 }, &b, delta, alpha_range, want_grad)?;
    if g.bound.value > 1.0 {
        g.bound.value = 1.0;
        g.d_mean.iter_mut().for_each(|v| *v = 0.0);
        g.d_log_var.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(g)
}

/// `J⁺_{α*,w}(ν)` on the shifted archive costs, with normalisation constant `w`.
pub fn pac_cost_bound(
    archive: &SampleArchive,
    nu: &Surrogate,
    w: f64,
    delta: f64,
    alpha_range: [f64; 2],
) -> Result<BoundValue, PacError> {
    cost_bound_grad(archive, nu, w, delta, alpha_range, false).map(|g| g.bound)
}

/// `C⁺_{α*}(ν)` on the violation indicators, clamped to `[0, 1]`.
pub fn pac_constraint_bound(
    archive: &SampleArchive,
    nu: &Surrogate,
    delta: f64,
    alpha_range: [f64; 2],
) -> Result<BoundValue, PacError> {
    constraint_bound_grad(archive, nu, delta, alpha_range, false).map(|g| g.bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RANGE: [f64; 2] = [1e-3, 1e3];

    fn constant_archive(c: f64, violated: bool, m: usize) -> (SampleArchive, Surrogate) {
        let nu = Surrogate::isotropic(vec![0.0; 3], 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..m).map(|_| nu.sample(&mut rng)).collect();
        let mut a = SampleArchive::new();
        a.push(ArchiveIteration::new(nu.clone(), samples, vec![c; m], vec![violated; m]));
        (a, nu)
    }

    #[test]
    fn worked_example_cost() {
        let c = 7.5;
        let (a, nu) = constant_archive(c, false, 1024);
        let b = pac_cost_bound(&a, &nu, c, 0.05, RANGE).unwrap();
        let alpha = (2.0 * 20f64.ln() / 1024.0).sqrt();
        assert!((b.alpha - alpha).abs() < 1e-12);
        assert!((b.alpha - 0.0765).abs() < 5e-5);
        assert!((b.value - c * (1.0 + alpha)).abs() < 1e-9);
        assert!((b.value / c - 1.0765).abs() < 5e-5);
    }

    #[test]
    fn worked_example_constraint() {
        let (a, nu) = constant_archive(1.0, false, 1024);
        let b = pac_constraint_bound(&a, &nu, 0.05, RANGE).unwrap();
        let alpha = (2.0 * 20f64.ln() / 1024.0).sqrt();
        assert_eq!(b.estimate, 0.0);
        assert!((b.value - (alpha / 2.0 + 20f64.ln() / (alpha * 1024.0))).abs() < 1e-12);
        assert!((b.value - 0.0765).abs() < 5e-5);
        let (a, nu) = constant_archive(1.0, true, 1024);
        assert_eq!(pac_constraint_bound(&a, &nu, 0.05, RANGE).unwrap().value, 1.0);
    }

    #[test]
    fn importance_weights_are_one_at_source() {
        let (mut a, nu) = constant_archive(1.0, false, 64);
        a.iterations[0].costs = (0..64).map(|j| j as f64).collect();
        let b = pac_cost_bound(&a, &nu, 1.0, 0.05, RANGE).unwrap();
        let mean = (0..64).sum::<usize>() as f64 / 64.0;
        assert!((b.estimate - mean).abs() < 1e-9);
    }

    #[test]
    fn bound_dominates_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let nu0 = Surrogate::isotropic(vec![0.0; 4], 0.05);
            let samples: Vec<Vec<f64>> = (0..128).map(|_| nu0.sample(&mut rng)).collect();
            let costs = (0..128).map(|_| rng.gen_range(0.0..10.0)).collect();
            let mut a = SampleArchive::new();
            a.push(ArchiveIteration::new(nu0, samples, costs, vec![false; 128]));
            let nu = Surrogate::isotropic((0..4).map(|_| rng.gen_range(-0.1..0.1)).collect(), 0.04);
            let w = a.mean_shifted_cost();
            let b = pac_cost_bound(&a, &nu, w, 0.05, RANGE).unwrap();
            assert!(b.value > b.estimate);
        }
    }

    #[test]
    fn alpha_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d: f64 = rng.gen_range(0.01..50.0);
            let n = rng.gen_range(100..10_000);
            let f = |a: f64| a * d + 20f64.ln() / (a * n as f64);
            let a_star = optimal_alpha(d, n, 0.05, RANGE);
            let grid: Vec<f64> = (0..1000).map(|k| a_star * (0.5 + k as f64 / 999.0)).collect();
            let best = grid.iter().copied().fold(f64::INFINITY, |m, a| m.min(f(a)));
            let step = a_star / 999.0;
            assert!(f(a_star) <= best + 1e-12);
            let grid_arg = grid.iter().copied().min_by(|x, y| f(*x).total_cmp(&f(*y))).unwrap();
            assert!((grid_arg - a_star).abs() <= step);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = SampleArchive::new();
        let mut src = Surrogate::isotropic(vec![0.0; 3], 0.05);
        for _ in 0..3 {
            let samples: Vec<Vec<f64>> = (0..200).map(|_| src.sample(&mut rng)).collect();
            let costs = samples.iter().map(|x| x.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>() + 1.0).collect();
            let viol = samples.iter().map(|x| x[0] > 0.2).collect();
            a.push(ArchiveIteration::new(src.clone(), samples, costs, viol));
            src.mean.iter_mut().for_each(|m| *m += 0.05);
            src.log_var.iter_mut().for_each(|l| *l += 0.1);
        }
        a.shift_to_min(1e-3);
        let w = a.mean_shifted_cost();
        let nu = Surrogate::new(vec![0.08, 0.12, 0.05], &[0.05, 0.06, 0.055]);
        let g = cost_bound_grad(&a, &nu, w, 0.05, RANGE, true).unwrap();
        let gc = constraint_bound_grad(&a, &nu, 0.05, RANGE, true).unwrap();
        let f = |s: &Surrogate| pac_cost_bound(&a, s, w, 0.05, RANGE).unwrap().value;
        let fc = |s: &Surrogate| pac_constraint_bound(&a, s, 0.05, RANGE).unwrap().value;
        let h = 1e-6;
        for d in 0..3 {
            for (which, grad, gradc) in [(0, &g.d_mean, &gc.d_mean), (1, &g.d_log_var, &gc.d_log_var)] {
                let mut p = nu.clone();
                let mut m = nu.clone();
                let field = |s: &mut Surrogate| if which == 0 { &mut s.mean[d] as *mut f64 } else { &mut s.log_var[d] as *mut f64 };
                unsafe {
                    *field(&mut p) += h;
                    *field(&mut m) -= h;
                }
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - grad[d]).abs() < 1e-5 * (1.0 + fd.abs()), "cost dim {d}: {fd} vs {}", grad[d]);
                let fd = (fc(&p) - fc(&m)) / (2.0 * h);
                assert!((fd - gradc[d]).abs() < 1e-5 * (1.0 + fd.abs()), "constraint dim {d}: {fd} vs {}", gradc[d]);
            }
        }
    }

    #[test]
    fn rejects_negative_costs() {
        let (mut a, nu) = constant_archive(1.0, false, 8);
        a.iterations[0].costs[3] = -0.5;
        assert!(matches!(pac_cost_bound(&a, &nu, 1.0, 0.05, RANGE), Err(PacError::NegativeCost)));
        a.shift_to_min(1e-3);
        assert!(pac_cost_bound(&a, &nu, 1.0, 0.05, RANGE).is_ok());
    }
}
