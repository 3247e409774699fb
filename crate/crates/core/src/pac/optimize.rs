use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bound::{constraint_bound_grad, cost_bound_grad, ArchiveIteration, SampleArchive};
use super::surrogate::{Surrogate, SurrogateSummary};
use super::PacError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacConfig {
    /// Sampling iterations per optimisation (`L`).
    pub iterations: usize,
    /// Samples per iteration (`M`).
    pub samples: usize,
    pub delta: f64,
    /// Weight on the constraint bound.
    pub gamma: f64,
    /// Gradient steps on `ν` after each sampling iteration.
    pub gradient_steps: usize,
    pub lr_mean: f64,
    pub lr_log_var: f64,
    pub grad_clip: f64,
    pub init_var: f64,
    pub var_floor: f64,
    /// Variances are kept below `var_factor · min_i σ_i²` so that every
    /// divergence against the archive stays finite.
    pub var_factor: f64,
    pub alpha_range: [f64; 2],
    pub cost_eps: f64,
    /// Fresh samples drawn from `ν*` for the Monte Carlo check; 0 skips it.
    pub mc_samples: usize,
}

impl Default for PacConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            samples: 1024,
            delta: 0.05,
            gamma: 2.0,
            gradient_steps: 10,
            lr_mean: 0.05,
            lr_log_var: 0.01,
            grad_clip: 10.0,
            init_var: 0.05,
            var_floor: 1e-6,
            var_factor: 1.9,
            alpha_range: [1e-3, 1e3],
            cost_eps: 1e-3,
            mc_samples: 1024,
        }
    }
}

impl PacConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 || self.samples == 0 {
            return Err("pac iterations and samples must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err("pac delta must lie in (0, 1)".into());
        }
        if !(self.var_factor > 1.0 && self.var_factor < 2.0) {
            return Err("pac var_factor must lie in (1, 2)".into());
        }
        if !(self.alpha_range[0] > 0.0 && self.alpha_range[0] <= self.alpha_range[1]) {
            return Err("pac alpha_range must be positive and ordered".into());
        }
        if !(self.init_var > self.var_floor) {
            return Err("pac init_var must exceed var_floor".into());
        }
        Ok(())
    }
}

/// Maps policy parameter samples to `(cost, violated)`. `seeds[j]` seeds
/// every random draw made for sample `j`.
pub trait SampleEvaluator {
    fn evaluate(&self, samples: &[Vec<f64>], seeds: &[u64]) -> Vec<(f64, bool)>;
}

impl<F: Fn(&[f64], u64) -> (f64, bool)> SampleEvaluator for F {
    fn evaluate(&self, samples: &[Vec<f64>], seeds: &[u64]) -> Vec<(f64, bool)> {
        samples.iter().zip(seeds).map(|(x, &s)| self(x, s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacBoundReport {
    pub jplus: f64,
    pub cplus: f64,
    pub alpha_cost: f64,
    pub alpha_constraint: f64,
    pub w: f64,
    /// Subtracted from raw costs before bounding; `jplus` and `mc_cost` are
    /// in shifted units.
    pub shift: f64,
    pub mc_cost: Option<f64>,
    pub mc_violation: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub objective: f64,
    pub jplus: f64,
    pub cplus: f64,
    pub w: f64,
    pub sample_mean_cost: f64,
    pub sample_violation_rate: f64,
    pub mean_only_steps: usize,
}

#[derive(Debug, Clone)]
pub struct PacOutcome {
    pub surrogate: Surrogate,
    pub report: PacBoundReport,
    pub archive: SampleArchive,
    pub iterations: Vec<IterationLog>,
}

impl PacOutcome {
    pub fn summary(&self) -> SurrogateSummary {
        self.surrogate.summary()
    }
}

struct Objective {
    value: f64,
    jplus: f64,
    cplus: f64,
    alpha_cost: f64,
    alpha_constraint: f64,
    d_mean: Vec<f64>,
    d_log_var: Vec<f64>,
}

fn objective(archive: &SampleArchive, nu: &Surrogate, w: f64, cfg: &PacConfig) -> Result<Objective, PacError> {
    let j = cost_bound_grad(archive, nu, w, cfg.delta, cfg.alpha_range, true)?;
    let c = constraint_bound_grad(archive, nu, cfg.delta, cfg.alpha_range, true)?;
    let g = cfg.gamma;
    Ok(Objective {
        value: j.bound.value + g * c.bound.value,
        jplus: j.bound.value,
        cplus: c.bound.value,
        alpha_cost: j.bound.alpha,
        alpha_constraint: c.bound.alpha,
        d_mean: j.d_mean.iter().zip(&c.d_mean).map(|(a, b)| a + g * b).collect(),
        d_log_var: j.d_log_var.iter().zip(&c.d_log_var).map(|(a, b)| a + g * b).collect(),
    })
}

/// Adam moments over the concatenated `(mean, log_var)` parameters.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(k, &g)| {
                self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
                self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
                (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// Upper variance limit per dimension, or `None` when it falls below the
/// floor and only the mean may move.
fn variance_ceiling(archive: &SampleArchive, cfg: &PacConfig) -> Option<Vec<f64>> {
    let dim = archive.iterations[0].source.dim();
    let ceil: Vec<f64> = (0..dim)
        .map(|d| cfg.var_factor * archive.iterations.iter().map(|it| it.source.var(d)).fold(f64::INFINITY, f64::min))
        .collect();
    ceil.iter().all(|&c| c > cfg.var_floor).then_some(ceil)
}

fn evaluate_batch<E: SampleEvaluator + ?Sized, R: Rng + ?Sized>(
    evaluator: &E,
    nu: &Surrogate,
    n: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
    let samples: Vec<Vec<f64>> = (0..n).map(|_| nu.sample(rng)).collect();
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let results = evaluator.evaluate(&samples, &seeds);
    let (costs, violations) = results.into_iter().unzip();
    (samples, costs, violations)
}

/// Fresh Monte Carlo estimate of the shifted mean cost and violation rate.
pub fn monte_carlo<E: SampleEvaluator + ?Sized, R: Rng + ?Sized>(
    evaluator: &E,
    nu: &Surrogate,
    n: usize,
    shift: f64,
    rng: &mut R,
) -> (f64, f64) {
    let (_, costs, violations) = evaluate_batch(evaluator, nu, n, rng);
    let mean = costs.iter().map(|c| c - shift).sum::<f64>() / n as f64;
    let rate = violations.iter().filter(|&&v| v).count() as f64 / n as f64;
    (mean, rate)
}

/// Minimises `J⁺ + γ C⁺` over the surrogate, resampling `L` times.
///
/// After each sampling round `ν` takes `G` adaptive gradient steps; the
/// best `ν` visited (by objective) seeds the next round.
pub fn optimize_policy<E: SampleEvaluator + ?Sized, R: Rng + ?Sized>(
    evaluator: &E,
    init: Surrogate,
    cfg: &PacConfig,
    rng: &mut R,
) -> Result<PacOutcome, PacError> {
    let dim = init.dim();
    let mut nu = init;
    let mut archive = SampleArchive::new();
    let mut logs = Vec::with_capacity(cfg.iterations);
    let mut last = None;
    for _ in 0..cfg.iterations {
        let (samples, costs, violations) = evaluate_batch(evaluator, &nu, cfg.samples, rng);
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(PacError::NonFinite("sample cost".into()));
        }
        let sample_mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
        let sample_violation_rate = violations.iter().filter(|&&v| v).count() as f64 / violations.len() as f64;
        archive.push(ArchiveIteration::new(nu.clone(), samples, costs, violations));
        archive.shift_to_min(cfg.cost_eps);
        let w = archive.mean_shifted_cost();
        let ceiling = variance_ceiling(&archive, cfg);

        let mut moments = Moments::new(2 * dim);
        let mut obj = objective(&archive, &nu, w, cfg)?;
        let mut best = (obj.value, nu.clone(), obj.jplus, obj.cplus, obj.alpha_cost, obj.alpha_constraint);
        let mut mean_only_steps = 0;
        for _ in 0..cfg.gradient_steps {
            let mut grad: Vec<f64> = obj.d_mean.iter().chain(&obj.d_log_var).copied().collect();
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                break;
            }
            if norm > cfg.grad_clip {
                grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
            }
            let step = moments.step(&grad);
            for d in 0..dim {
                nu.mean[d] -= cfg.lr_mean * step[d];
            }
            match &ceiling {
                Some(ceil) => {
                    for d in 0..dim {
                        let lv = nu.log_var[d] - cfg.lr_log_var * step[dim + d];
                        nu.log_var[d] = lv.clamp(cfg.var_floor.ln(), ceil[d].ln());
                    }
                }
                None => mean_only_steps += 1,
            }
            obj = objective(&archive, &nu, w, cfg)?;
            if obj.value < best.0 {
                best = (obj.value, nu.clone(), obj.jplus, obj.cplus, obj.alpha_cost, obj.alpha_constraint);
            }
        }
        nu = best.1;
        logs.push(IterationLog {
            objective: best.0,
            jplus: best.2,
            cplus: best.3,
            w,
            sample_mean_cost,
            sample_violation_rate,
            mean_only_steps,
        });
        last = Some((best.2, best.3, best.4, best.5, w));
    }
    let (jplus, cplus, alpha_cost, alpha_constraint, w) = last.ok_or(PacError::EmptyArchive)?;
    let (mc_cost, mc_violation) = if cfg.mc_samples > 0 {
        let (c, v) = monte_carlo(evaluator, &nu, cfg.mc_samples, archive.shift, rng);
        (Some(c), Some(v))
    } else {
        (None, None)
    };
    let report = PacBoundReport {
        jplus,
        cplus,
        alpha_cost,
        alpha_constraint,
        w,
        shift: archive.shift,
        mc_cost,
        mc_violation,
        delta: cfg.delta,
    };
    Ok(PacOutcome { surrogate: nu, report, archive, iterations: logs })
}
