use rand::Rng as _;
use rand_distr::{Distribution, Exp};

use super::real::Real;
use super::{Family, KernelParams, ParametricModel};
use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::rng;

fn check_history(history: &[f64]) -> Result<()> {
    for (i, &t) in history.iter().enumerate() {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::invalid(format!("event time {t} must be finite and >= 0")));
        }
        if i > 0 && t < history[i - 1] {
            return Err(Error::invalid("event history must be sorted"));
        }
    }
    Ok(())
}

/// Conditional intensity at `t` given the events of `history` strictly
/// before `t`.
pub fn intensity(model: &ParametricModel, history: &[f64], t: f64) -> Result<f64> {
    model.check()?;
    check_history(history)?;
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("time {t} must be >= 0")));
    }
    let k = model.kernel.params::<f64>();
    let past = history.partition_point(|&s| s < t);
    let excitation: f64 = history[..past].iter().map(|&s| k.value(t - s)).sum();
    match model.family {
        Family::Hawkes => Ok(model.mu + excitation),
        Family::HawkesN => {
            let n = model.population_f64();
            if past as f64 > n {
                return Err(Error::invalid(format!(
                    "{past} events exceed the population size {n}"
                )));
            }
            Ok((n - past as f64) / n * excitation)
        }
        Family::Mbp => Err(Error::invalid(
            "MBP intensity is deterministic; use mbp_xi",
        )),
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Stop once this many events have been generated.
    pub max_events: Option<usize>,
}

/// Draws one cascade on `[0, horizon]` by Ogata thinning.
///
/// Both kernels are non-increasing, so the intensity just after the latest
/// event (or candidate) bounds the intensity until the next event. MBP
/// models are simulated through their Hawkes counterpart.
pub fn simulate(
    model: &ParametricModel,
    horizon: f64,
    seed: u64,
    options: &SimulateOptions,
) -> Result<Cascade> {
    let mut rng = rng::seeded(seed);
    let times = simulate_times(model, horizon, &mut rng, options)?;
    Cascade::from_event_times(format!("sim-{seed}"), horizon, &times)
}

pub(crate) fn simulate_times(
    model: &ParametricModel,
    horizon: f64,
    rng: &mut rng::Rng,
    options: &SimulateOptions,
) -> Result<Vec<f64>> {
    model.check()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid(format!("horizon {horizon} must be > 0")));
    }
    let k = model.kernel.params::<f64>();
    let finite = model.family == Family::HawkesN;
    let n_pop = model.population_f64();
    let mu = if finite { 0.0 } else { model.mu };
    let cap = options.max_events.unwrap_or(usize::MAX);

    let rate = |events: &[f64], t: f64| -> f64 {
        let exc: f64 = events.iter().map(|&s| k.value(t - s)).sum();
        if finite {
            ((n_pop - events.len() as f64) / n_pop).max(0.0) * exc
        } else {
            mu + exc
        }
    };

    let mut events = Vec::new();
    if model.immigrant {
        events.push(0.0);
    }
    let mut t = 0.0;
    loop {
        if events.len() >= cap || (finite && events.len() as f64 >= n_pop) {
            break;
        }
        let bound = rate(&events, t);
        if !(bound > 0.0) {
            break;
        }
        if !bound.is_finite() {
            return Err(Error::NonFinite("thinning bound".into()));
        }
        t += Exp::new(bound).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        let lambda = rate(&events, t);
        if rng.gen::<f64>() * bound <= lambda {
            events.push(t);
        }
    }
    Ok(events)
}

/// Log-likelihood of an event-only cascade, with its degenerate flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventLogLik {
    /// `Σ log λ(t_i) − ∫ λ`; `-inf` when `degenerate`.
    pub value: f64,
    /// Some event had zero intensity.
    pub degenerate: bool,
}

/// `Σ_i log λ(t_i) − ∫_0^T λ(τ)dτ` with the compensator in closed form.
/// In immigrant mode the first event is conditioned on: it contributes no
/// intensity term and integration starts at its time.
pub fn event_loglik(model: &ParametricModel, cascade: &Cascade) -> Result<EventLogLik> {
    model.check()?;
    if model.family == Family::Mbp {
        return Err(Error::invalid("MBP models are fit on interval counts; use mbp_ic_loglik"));
    }
    let times = event_times_checked(cascade)?;
    let k = model.kernel.params::<f64>();
    Ok(match event_loglik_with(model, f64::cst(model.mu), &k, &times, cascade.horizon) {
        Some(value) => EventLogLik {
            value,
            degenerate: false,
        },
        None => EventLogLik {
            value: f64::NEG_INFINITY,
            degenerate: true,
        },
    })
}

pub(crate) fn event_times_checked(cascade: &Cascade) -> Result<Vec<f64>> {
    if cascade.has_intervals() {
        return Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: "event likelihood requires point events only".into(),
        });
    }
    let times = cascade.event_times();
    check_history(&times)?;
    if times.last().is_some_and(|&t| t > cascade.horizon) {
        return Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: "event after horizon".into(),
        });
    }
    Ok(times)
}

/// Generic event likelihood; `None` when an intensity term is not positive.
pub(crate) fn event_loglik_with<R: Real>(
    model: &ParametricModel,
    mu: R,
    k: &KernelParams<R>,
    times: &[f64],
    horizon: f64,
) -> Option<R> {
    let (first, t_start) = if model.immigrant {
        match times.first() {
            Some(&t0) => (1, t0),
            None => return Some(R::cst(0.0)),
        }
    } else {
        (0, 0.0)
    };
    let finite = model.family == Family::HawkesN;
    let n_pop = model.population_f64();

    let mut ll = R::cst(0.0);
    for i in first..times.len() {
        let t = times[i];
        let past = times[..i].partition_point(|&s| s < t);
        let mut exc = R::cst(0.0);
        for &s in &times[..past] {
            exc += k.value(t - s);
        }
        let lambda = if finite {
            let left = n_pop - past as f64;
            if left <= 0.0 {
                return None;
            }
            exc.scale(left / n_pop)
        } else {
            mu + exc
        };
        if !(lambda.val() > 0.0) {
            return None;
        }
        ll += lambda.ln();
    }

    let mut comp = R::cst(0.0);
    if finite {
        // The unaffected fraction is piecewise constant between events.
        let mut i = 0;
        while i < times.len() {
            let left = times[i];
            let mut j = i;
            while j < times.len() && times[j] == left {
                j += 1;
            }
            let right = if j < times.len() { times[j] } else { horizon };
            let frac = ((n_pop - j as f64) / n_pop).max(0.0);
            if frac > 0.0 && right > left {
                let mut m = R::cst(0.0);
                for &s in &times[..j] {
                    m += k.mass(left - s, right - s);
                }
                comp += m.scale(frac);
            }
            i = j;
        }
    } else {
        comp += mu.scale(horizon - t_start);
        for &s in times {
            comp += k.mass(0.0, horizon - s);
        }
    }
    Some(ll - comp)
}

#[cfg(test)]
mod tests {
    use super::super::Kernel;
    use super::*;

    #[test]
    fn background_only_intensity() {
        let m = ParametricModel::hawkes(0.5, Kernel::exponential(0.0, 1.0));
        assert_eq!(intensity(&m, &[], 3.0).unwrap(), 0.5);
    }

    #[test]
    fn exhausted_population_has_zero_intensity() {
        let m = ParametricModel::hawkes_n(3, Kernel::exponential(0.8, 1.0));
        assert_eq!(intensity(&m, &[0.0, 1.0, 2.0], 2.5).unwrap(), 0.0);
        assert!(intensity(&m, &[0.0, 1.0, 2.0, 2.1], 2.5).is_err());
    }

    #[test]
    fn single_exponential_excitation() {
        let m = ParametricModel::hawkes(0.0, Kernel::exponential(1.0, 2.0));
        let v = intensity(&m, &[0.0], 0.5).unwrap();
        assert!((v - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        // left limit: an event does not excite itself
        assert_eq!(intensity(&m, &[0.0, 0.5], 0.5).unwrap(), v);
    }

    #[test]
    fn poisson_log_likelihoods() {
        let m = ParametricModel::hawkes(1.0, Kernel::exponential(0.0, 1.0));
        let c = Cascade::from_event_times("p", 2.0, &[0.5, 1.5]).unwrap();
        assert_eq!(event_loglik(&m, &c).unwrap().value, -2.0);
        let empty = Cascade::from_event_times("e", 3.0, &[]).unwrap();
        assert_eq!(event_loglik(&m, &empty).unwrap().value, -3.0);
    }

    #[test]
    fn zero_intensity_is_flagged() {
        let m = ParametricModel::hawkes(0.0, Kernel::exponential(0.5, 1.0));
        let c = Cascade::from_event_times("z", 2.0, &[0.5]).unwrap();
        let ll = event_loglik(&m, &c).unwrap();
        assert!(ll.degenerate && ll.value == f64::NEG_INFINITY);
    }

    #[test]
    fn simulation_is_reproducible_and_bounded() {
        let m = ParametricModel::hawkes_n(10, Kernel::exponential(0.95, 2.0));
        for seed in 0..200 {
            let c = simulate(&m, 100.0, seed, &SimulateOptions::default()).unwrap();
            assert!(c.len() <= 10);
            assert_eq!(c, simulate(&m, 100.0, seed, &SimulateOptions::default()).unwrap());
        }
        assert!(simulate(&m, 0.0, 1, &SimulateOptions::default()).is_err());
    }
}
