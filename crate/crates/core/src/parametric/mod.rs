//! Parametric self-exciting models: Hawkes, HawkesN and Mean Behavior
//! Poisson (MBP).
//!
//! Kernels are the exponential `κθ·exp(-θτ)` and the power law
//! `κ(τ + c)^-(1+θ)`. Hawkes intensities follow the left-limit convention:
//! an event never excites itself. In "immigrant" mode a cascade is
//! conditioned on its first event (the original post) and the background
//! rate is usually zero.

mod fit;
mod hawkes;
mod mbp;
pub mod real;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fit::{fit, FitConfig, FitReport};
pub use hawkes::{event_loglik, intensity, simulate, EventLogLik, SimulateOptions};
pub use mbp::{mbp_compensator, mbp_ic_loglik, mbp_xi, MbpGrid};

use crate::error::{Error, Result};
use crate::json;
use real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Exponential,
    PowerLaw,
}

/// Excitation kernel φ. `c` is only used by the power law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub kind: KernelKind,
    pub kappa: f64,
    pub theta: f64,
    pub c: f64,
}

impl Kernel {
    pub fn exponential(kappa: f64, theta: f64) -> Self {
        Kernel {
            kind: KernelKind::Exponential,
            kappa,
            theta,
            c: 1.0,
        }
    }

    pub fn power_law(kappa: f64, theta: f64, c: f64) -> Self {
        Kernel {
            kind: KernelKind::PowerLaw,
            kappa,
            theta,
            c,
        }
    }

    /// Power-law kernel whose total mass (branching factor) is `mass`.
    pub fn power_law_with_mass(mass: f64, theta: f64, c: f64) -> Self {
        Kernel::power_law(mass * theta * c.powf(theta), theta, c)
    }

    /// κ may be zero (no excitation); θ and c must be positive.
    pub fn check(&self) -> Result<()> {
        let ok = self.kappa.is_finite()
            && self.kappa >= 0.0
            && self.theta.is_finite()
            && self.theta > 0.0
            && (self.kind == KernelKind::Exponential || (self.c.is_finite() && self.c > 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kernel parameters {self:?}")))
        }
    }

    /// Expected number of direct offspring per event, `∫₀^∞ φ`.
    pub fn branching_factor(&self) -> f64 {
        match self.kind {
            KernelKind::Exponential => self.kappa,
            KernelKind::PowerLaw => self.kappa * self.c.powf(-self.theta) / self.theta,
        }
    }

    pub(crate) fn params<R: Real>(&self) -> KernelParams<R> {
        KernelParams {
            kind: self.kind,
            kappa: R::cst(self.kappa),
            theta: R::cst(self.theta),
            c: R::cst(self.c),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct KernelParams<R> {
    pub kind: KernelKind,
    pub kappa: R,
    pub theta: R,
    pub c: R,
}

impl<R: Real> KernelParams<R> {
    pub fn value(&self, tau: f64) -> R {
        match self.kind {
            KernelKind::Exponential => self.kappa * self.theta * (-(self.theta.scale(tau))).exp(),
            KernelKind::PowerLaw => {
                self.kappa * (self.c + R::cst(tau)).powf(-(self.theta + R::cst(1.0)))
            }
        }
    }

    /// `∫_a^b φ`, with `b = ∞` allowed.
    pub fn mass(&self, a: f64, b: f64) -> R {
        match self.kind {
            KernelKind::Exponential => {
                let head = (-(self.theta.scale(a))).exp();
                let tail = if b.is_infinite() {
                    R::cst(0.0)
                } else {
                    (-(self.theta.scale(b))).exp()
                };
                self.kappa * (head - tail)
            }
            KernelKind::PowerLaw => {
                let head = (self.c + R::cst(a)).powf(-self.theta);
                let tail = if b.is_infinite() {
                    R::cst(0.0)
                } else {
                    (self.c + R::cst(b)).powf(-self.theta)
                };
                self.kappa / self.theta * (head - tail)
            }
        }
    }
}

/// φ(τ).
pub fn kernel_value(kernel: &Kernel, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("kernel lag {tau} must be >= 0")));
    }
    kernel.check()?;
    Ok(kernel.params::<f64>().value(tau))
}

/// `∫_a^b φ(τ)dτ` in closed form; `b` may be `f64::INFINITY`.
pub fn kernel_mass(kernel: &Kernel, a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && a <= b) {
        return Err(Error::invalid(format!("kernel mass bounds [{a}, {b}] invalid")));
    }
    kernel.check()?;
    Ok(kernel.params::<f64>().mass(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Hawkes,
    #[serde(rename = "hawkesn")]
    HawkesN,
    Mbp,
}

/// A parametric cascade model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParametricModel {
    pub family: Family,
    pub kernel: Kernel,
    /// Background intensity (events per second). Ignored by HawkesN.
    pub mu: f64,
    /// Population size, HawkesN only.
    pub population: Option<u64>,
    /// Condition on an immigrant event at the start of each cascade.
    pub immigrant: bool,
}

impl ParametricModel {
    pub fn hawkes(mu: f64, kernel: Kernel) -> Self {
        ParametricModel {
            family: Family::Hawkes,
            kernel,
            mu,
            population: None,
            immigrant: false,
        }
    }

    pub fn hawkes_n(population: u64, kernel: Kernel) -> Self {
        ParametricModel {
            family: Family::HawkesN,
            kernel,
            mu: 0.0,
            population: Some(population),
            immigrant: true,
        }
    }

    pub fn mbp(mu: f64, kernel: Kernel) -> Self {
        ParametricModel {
            family: Family::Mbp,
            kernel,
            mu,
            population: None,
            immigrant: false,
        }
    }

    pub fn with_immigrant(mut self, immigrant: bool) -> Self {
        self.immigrant = immigrant;
        self
    }

    pub fn check(&self) -> Result<()> {
        self.kernel.check()?;
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::invalid(format!("background rate {} must be >= 0", self.mu)));
        }
        if self.family == Family::HawkesN && !matches!(self.population, Some(n) if n >= 1) {
            return Err(Error::invalid("HawkesN requires a population size N >= 1"));
        }
        Ok(())
    }

    pub(crate) fn population_f64(&self) -> f64 {
        self.population.unwrap_or(u64::MAX) as f64
    }
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub family: Family,
    pub kernel: KernelKind,
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub c: Option<f64>,
    #[serde(rename = "N")]
    pub n: Option<u64>,
    pub fit_ll: Option<f64>,
    #[serde(default)]
    pub immigrant: bool,
}

impl ModelFile {
    pub fn new(model: &ParametricModel, fit_ll: Option<f64>) -> Self {
        ModelFile {
            family: model.family,
            kernel: model.kernel.kind,
            mu: model.mu,
            kappa: model.kernel.kappa,
            theta: model.kernel.theta,
            c: (model.kernel.kind == KernelKind::PowerLaw).then_some(model.kernel.c),
            n: model.population,
            fit_ll: fit_ll.filter(|v| v.is_finite()),
            immigrant: model.immigrant,
        }
    }

    pub fn model(&self) -> Result<ParametricModel> {
        let kernel = match self.kernel {
            KernelKind::Exponential => Kernel::exponential(self.kappa, self.theta),
            KernelKind::PowerLaw => Kernel::power_law(
                self.kappa,
                self.theta,
                self.c
                    .ok_or_else(|| Error::invalid("power-law kernel requires `c`"))?,
            ),
        };
        let model = ParametricModel {
            family: self.family,
            kernel,
            mu: self.mu,
            population: self.n,
            immigrant: self.immigrant,
        };
        model.check()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_line(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&json::read_to_string(path)?)
    }
}
