use super::real::Real;
use super::{Family, KernelParams, ParametricModel};
use crate::cascade::{ensure_canonical, Cascade, CascadeRecord};
use crate::error::{Error, Result};

/// Lower bound applied to a compensator before taking its log.
pub const XI_FLOOR: f64 = 1e-12;

/// Mean intensity ξ sampled on a uniform grid over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MbpGrid {
    pub step: f64,
    pub values: Vec<f64>,
}

impl MbpGrid {
    fn from_values(step: f64, values: Vec<f64>) -> Self {
        MbpGrid { step, values }
    }

    pub fn horizon(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    /// Times of the grid nodes.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| i as f64 * self.step)
    }
}

fn interpolate<R: Real>(step: f64, values: &[R], x: f64) -> R {
    let k = ((x / step).floor().max(0.0) as usize).min(values.len() - 2);
    let frac = (x / step - k as f64).clamp(0.0, 1.0);
    values[k] + (values[k + 1] - values[k]).scale(frac)
}

/// `∫_a^b` of the piecewise-linear interpolant through the grid values,
/// integrated cell by cell so that short intervals keep full precision.
fn interval_integral<R: Real>(step: f64, values: &[R], a: f64, b: f64) -> R {
    if !(b > a) {
        return R::cst(0.0);
    }
    let top = values.len() - 2;
    let ka = ((a / step).floor().max(0.0) as usize).min(top);
    let kb = (((b / step).ceil() as usize).saturating_sub(1)).clamp(ka, top);
    if ka == kb {
        return (interpolate(step, values, a) + interpolate(step, values, b)).scale(0.5 * (b - a));
    }
    let mut acc = (interpolate(step, values, a) + values[ka + 1]).scale(0.5 * ((ka + 1) as f64 * step - a));
    let mut carry = R::cst(0.0);
    for i in ka + 1..kb {
        let y = (values[i] + values[i + 1]).scale(0.5 * step) - carry;
        let t = acc + y;
        carry = (t - acc) - y;
        acc = t;
    }
    acc + (values[kb] + interpolate(step, values, b)).scale(0.5 * (b - kb as f64 * step))
}

fn grid_size(grid_step: f64, horizon: f64) -> Result<(usize, f64)> {
    if !(grid_step.is_finite() && grid_step > 0.0) {
        return Err(Error::invalid(format!("grid step {grid_step} must be > 0")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid(format!("horizon {horizon} must be > 0")));
    }
    let n = (horizon / grid_step).ceil().max(1.0) as usize;
    Ok((n, horizon / n as f64))
}

/// Solves `ξ(t) = μ + ∫_0^t ξ(τ)φ(t−τ)dτ` (plus `φ(t)` in immigrant mode)
/// by forward trapezoidal discretisation. The step is shrunk so that the
/// grid ends exactly at `horizon`.
pub fn mbp_xi(model: &ParametricModel, grid_step: f64, horizon: f64) -> Result<MbpGrid> {
    model.check()?;
    let (n, step) = grid_size(grid_step, horizon)?;
    let k = model.kernel.params::<f64>();
    let values = solve_volterra(model.mu, &k, model.immigrant, n, step)
        .ok_or_else(|| Error::invalid("grid step too coarse for the kernel: 1 - hφ(0)/2 <= 0"))?;
    Ok(MbpGrid::from_values(step, values))
}

pub(crate) fn solve_volterra<R: Real>(
    mu: R,
    k: &KernelParams<R>,
    immigrant: bool,
    n: usize,
    step: f64,
) -> Option<Vec<R>> {
    let phi: Vec<R> = (0..=n).map(|i| k.value(i as f64 * step)).collect();
    let denom = R::cst(1.0) - phi[0].scale(0.5 * step);
    if !(denom.val() > 0.0) {
        return None;
    }
    let mut xi: Vec<R> = Vec::with_capacity(n + 1);
    xi.push(if immigrant { mu + phi[0] } else { mu });
    for i in 1..=n {
        let mut conv = (xi[0] * phi[i]).scale(0.5);
        for m in 1..i {
            conv += xi[m] * phi[i - m];
        }
        let mut rhs = mu + conv.scale(step);
        if immigrant {
            rhs += phi[i];
        }
        xi.push(rhs / denom);
    }
    Some(xi)
}

/// Expected count `Ξ(a, b)`: the integral of the linearly interpolated
/// grid over `[a, b]`.
pub fn mbp_compensator(grid: &MbpGrid, a: f64, b: f64) -> Result<f64> {
    let h = grid.horizon();
    let tol = 1e-9 * h.max(1.0);
    if !(a >= 0.0 && a <= b && b <= h + tol) {
        return Err(Error::invalid(format!(
            "interval [{a}, {b}] outside the grid [0, {h}]"
        )));
    }
    let b = b.min(h);
    let a = a.min(b);
    let v = interval_integral(grid.step, &grid.values, a, b);
    Ok(v.max(0.0))
}

pub(crate) fn interval_counts(cascade: &Cascade) -> Result<Vec<(f64, f64, u64)>> {
    if cascade.has_events() {
        return Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: "interval-censored likelihood requires censored intervals only".into(),
        });
    }
    ensure_canonical(cascade)?;
    Ok(cascade
        .records
        .iter()
        .filter_map(|r| match *r {
            CascadeRecord::Censored {
                start,
                duration,
                count,
            } => Some((start, start + duration, count)),
            _ => None,
        })
        .collect())
}

/// `Σ c_i log Ξ_i − Σ Ξ_i` over the censored intervals of `cascade`.
/// `grid_step` defaults to `horizon / 2048`.
pub fn mbp_ic_loglik(
    model: &ParametricModel,
    cascade: &Cascade,
    grid_step: Option<f64>,
) -> Result<f64> {
    if model.family != Family::Mbp {
        return Err(Error::invalid("interval-censored likelihood requires an MBP model"));
    }
    model.check()?;
    let intervals = interval_counts(cascade)?;
    let step = grid_step.unwrap_or(cascade.horizon / 2048.0);
    let (n, step) = grid_size(step, cascade.horizon)?;
    let k = model.kernel.params::<f64>();
    ic_loglik_with(f64::cst(model.mu), &k, model.immigrant, n, step, &[intervals])
        .ok_or_else(|| Error::invalid("grid step too coarse for the kernel"))
}

/// Summed interval-censored likelihood over several cascades that share one
/// grid.
pub(crate) fn ic_loglik_with<R: Real>(
    mu: R,
    k: &KernelParams<R>,
    immigrant: bool,
    n: usize,
    step: f64,
    cascades: &[Vec<(f64, f64, u64)>],
) -> Option<R> {
    let xi = solve_volterra(mu, k, immigrant, n, step)?;
    let horizon = step * n as f64;
    let mut ll = R::cst(0.0);
    for intervals in cascades {
        for &(a, b, c) in intervals {
            let b = b.min(horizon);
            let a = a.min(b);
            let comp = interval_integral(step, &xi, a, b);
            if c > 0 {
                let clamped = if comp.val() < XI_FLOOR {
                    R::cst(XI_FLOOR)
                } else {
                    comp
                };
                ll += clamped.ln().scale(c as f64);
            }
            ll = ll - comp;
        }
    }
    Some(ll)
}
