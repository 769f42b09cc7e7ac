use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::hawkes::{event_loglik_with, event_times_checked};
use super::mbp::{ic_loglik_with, interval_counts};
use super::real::{Dual, Real};
use super::{Family, KernelKind, KernelParams, ParametricModel};
use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop once the gradient norm (log-parameter space) drops below this.
    pub grad_tol: f64,
    /// Seeds the re-draws of a non-finite initial point.
    pub seed: u64,
    /// MBP grid step; defaults to `horizon / 2048`.
    pub grid_step: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 2000,
            grad_tol: 1e-6,
            seed: 0,
            grid_step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: ParametricModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

type D = Dual<4>;

const MU: usize = 0;
const KAPPA: usize = 1;
const THETA: usize = 2;
const C: usize = 3;

enum Data {
    Events(Vec<(Vec<f64>, f64)>),
    Intervals {
        n: usize,
        step: f64,
        cascades: Vec<Vec<(f64, f64, u64)>>,
    },
}

struct Objective<'a> {
    init: &'a ParametricModel,
    free: Vec<usize>,
    data: Data,
}

impl Objective<'_> {
    fn base(&self) -> [f64; 4] {
        let k = &self.init.kernel;
        [self.init.mu, k.kappa, k.theta, k.c]
    }

    fn model_at(&self, u: &[f64]) -> ParametricModel {
        let mut p = self.base();
        for (&slot, &x) in self.free.iter().zip(u) {
            p[slot] = x.exp();
        }
        let mut m = *self.init;
        m.mu = p[MU];
        m.kernel.kappa = p[KAPPA];
        m.kernel.theta = p[THETA];
        m.kernel.c = p[C];
        m
    }

    /// Log-likelihood and its gradient with respect to the free log-parameters.
    fn eval(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        let base = self.base();
        let mut p: [D; 4] = base.map(D::cst);
        for (&slot, &x) in self.free.iter().zip(u) {
            let v = x.exp();
            if !v.is_finite() || v <= 0.0 {
                return None;
            }
            let mut d = D::cst(v);
            d.d[slot] = v;
            p[slot] = d;
        }
        let k = KernelParams {
            kind: self.init.kernel.kind,
            kappa: p[KAPPA],
            theta: p[THETA],
            c: p[C],
        };
        let ll = match &self.data {
            Data::Events(cascades) => {
                let mut acc = D::cst(0.0);
                for (times, horizon) in cascades {
                    acc += event_loglik_with(self.init, p[MU], &k, times, *horizon)?;
                }
                acc
            }
            Data::Intervals { n, step, cascades } => {
                ic_loglik_with(p[MU], &k, self.init.immigrant, *n, *step, cascades)?
            }
        };
        if !ll.v.is_finite() {
            return None;
        }
        let grad: Vec<f64> = self.free.iter().map(|&s| ll.d[s]).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((ll.v, grad))
    }
}

fn free_slots(init: &ParametricModel) -> Vec<usize> {
    let mut free = Vec::new();
    if init.mu > 0.0 && init.family != Family::HawkesN {
        free.push(MU);
    }
    if init.kernel.kappa > 0.0 {
        free.push(KAPPA);
        free.push(THETA);
        if init.kernel.kind == KernelKind::PowerLaw {
            free.push(C);
        }
    }
    free
}

/// Maximum-likelihood fit by BFGS on log-transformed parameters.
///
/// Parameters whose initial value is zero stay fixed (κ = 0 also fixes θ
/// and c); the HawkesN population size is held at its initial value.
/// Hawkes and HawkesN use the event likelihood, MBP the interval-censored
/// one on a grid shared by all cascades.
pub fn fit(cascades: &[Cascade], init: &ParametricModel, config: &FitConfig) -> Result<FitReport> {
    init.check()?;
    if cascades.is_empty() {
        return Err(Error::invalid("fit requires at least one cascade"));
    }
    let data = match init.family {
        Family::Hawkes | Family::HawkesN => Data::Events(
            cascades
                .iter()
                .map(|c| Ok((event_times_checked(c)?, c.horizon)))
                .collect::<Result<_>>()?,
        ),
        Family::Mbp => {
            let horizon = cascades.iter().map(|c| c.horizon).fold(0.0, f64::max);
            let step = config.grid_step.unwrap_or(horizon / 2048.0);
            if !(step > 0.0) {
                return Err(Error::invalid("grid step must be > 0"));
            }
            let n = (horizon / step).ceil().max(1.0) as usize;
            Data::Intervals {
                n,
                step: horizon / n as f64,
                cascades: cascades.iter().map(interval_counts).collect::<Result<_>>()?,
            }
        }
    };
    let obj = Objective {
        init,
        free: free_slots(init),
        data,
    };
    let base = obj.base();
    let mut u: Vec<f64> = obj.free.iter().map(|&s| base[s].ln()).collect();

    let mut start = obj.eval(&u);
    if start.is_none() {
        let mut rng = rng::seeded(config.seed);
        let jitter = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..10 {
            let cand: Vec<f64> = u.iter().map(|x| x + jitter.sample(&mut rng)).collect();
            if let Some(s) = obj.eval(&cand) {
                u = cand;
                start = Some(s);
                break;
            }
        }
    }
    let (mut ll, mut grad) =
        start.ok_or_else(|| Error::NonFinite("log-likelihood at the initial parameters".into()))?;

    let dim = u.len();
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut hinv = identity(dim);
    let mut iterations = 0;
    let mut converged = norm(&grad) < config.grad_tol;

    while !converged && iterations < config.max_iter {
        iterations += 1;
        // ascent direction for the log-likelihood
        let mut dir: Vec<f64> = (0..dim)
            .map(|i| (0..dim).map(|j| hinv[i][j] * grad[j]).sum())
            .collect();
        let mut slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(slope > 0.0) {
            hinv = identity(dim);
            dir = grad.clone();
            slope = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        }
        let longest = dir.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        let mut step = if longest > 2.0 { 2.0 / longest } else { 1.0 };

        let mut accepted = None;
        while step > 1e-16 {
            let cand: Vec<f64> = u.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            if let Some((l, g)) = obj.eval(&cand) {
                if l >= ll + 1e-4 * step * slope {
                    accepted = Some((cand, l, g));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, l, g)) = accepted else {
            break;
        };

        let s: Vec<f64> = cand.iter().zip(&u).map(|(a, b)| a - b).collect();
        // BFGS on f = -LL: y = ∇f_new − ∇f_old = −(g − grad)
        let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| -(a - b)).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        u = cand;
        ll = l;
        grad = g;
        converged = norm(&grad) < config.grad_tol;
    }

    Ok(FitReport {
        model: obj.model_at(&u),
        log_likelihood: ll,
        iterations,
        converged,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{event_loglik, simulate, Kernel, SimulateOptions};
    use super::*;

    #[test]
    fn poisson_rate_matches_closed_form() {
        let truth = ParametricModel::hawkes(1.0, Kernel::exponential(0.0, 1.0));
        let cascades: Vec<Cascade> = (0..10)
            .map(|s| simulate(&truth, 10.0, s, &SimulateOptions::default()).unwrap())
            .collect();
        let total: usize = cascades.iter().map(Cascade::len).sum();
        let init = ParametricModel::hawkes(0.3, Kernel::exponential(0.0, 1.0));
        let rep = fit(&cascades, &init, &FitConfig::default()).unwrap();
        assert!(rep.converged);
        let mle = total as f64 / 100.0;
        assert!((rep.model.mu - mle).abs() < 1e-6, "{} vs {mle}", rep.model.mu);
    }

    #[test]
    fn fitted_likelihood_beats_truth() {
        let truth = ParametricModel::hawkes(0.0, Kernel::exponential(0.5, 1.0)).with_immigrant(true);
        let cascades: Vec<Cascade> = (0..100)
            .map(|s| simulate(&truth, 20.0, s, &SimulateOptions::default()).unwrap())
            .collect();
        let init = ParametricModel::hawkes(0.0, Kernel::exponential(0.2, 3.0)).with_immigrant(true);
        let rep = fit(&cascades, &init, &FitConfig::default()).unwrap();
        let at_truth: f64 = cascades
            .iter()
            .map(|c| event_loglik(&truth, c).unwrap().value)
            .sum();
        assert!(rep.converged);
        assert!(rep.log_likelihood >= at_truth);
    }

    #[test]
    fn rejects_empty_input() {
        let init = ParametricModel::hawkes(1.0, Kernel::exponential(0.0, 1.0));
        assert!(fit(&[], &init, &FitConfig::default()).is_err());
    }
}
