//! Exponential-dispersion-family primitives.
//!
//! A family is described by its cumulant `κ`, the canonical link `h = (κ′)⁻¹`
//! and a dispersion `φ`. The density is `exp{(yθ − κ(θ))/φ + ξ(y; φ)}`; the
//! normalizer `ξ` does not depend on `θ` and is dropped from every likelihood
//! computed here, so reported losses are comparable only within one family.
//!
//! Two layers of API are exposed. The checked operations (`cumulant`, `link`,
//! `nll`, ...) validate their inputs and return [`Result`]. The `kappa*` and
//! `h*` methods are the unchecked hot-path versions used inside training
//! loops, where the caller has already clamped the mean.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower (and, for Bernoulli, upper) margin used to clamp fitted means before
/// any link or link-derivative evaluation.
pub const EPS_MEAN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Bernoulli,
    Poisson,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
}

fn default_dispersion() -> f64 {
    1.0
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl FamilySpec {
    pub fn bernoulli() -> Self {
        FamilySpec { kind: FamilyKind::Bernoulli, dispersion: 1.0 }
    }

    pub fn poisson() -> Self {
        FamilySpec { kind: FamilyKind::Poisson, dispersion: 1.0 }
    }

    pub fn gaussian(dispersion: f64) -> Result<Self> {
        let f = FamilySpec { kind: FamilyKind::Gaussian, dispersion };
        f.validate()?;
        Ok(f)
    }

    pub fn new(kind: FamilyKind) -> Self {
        FamilySpec { kind, dispersion: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(Error::Config(format!(
                "dispersion must be positive and finite, got {}",
                self.dispersion
            )));
        }
        if self.kind != FamilyKind::Gaussian && self.dispersion != 1.0 {
            return Err(Error::Config(format!(
                "{:?} dispersion is fixed at 1, got {}",
                self.kind, self.dispersion
            )));
        }
        Ok(())
    }

    // ---- unchecked hot-path primitives ----

    #[inline]
    pub fn kappa(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => softplus(theta),
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Gaussian => 0.5 * theta * theta,
        }
    }

    #[inline]
    pub fn kappa_prime(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => sigmoid(theta),
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Gaussian => theta,
        }
    }

    #[inline]
    pub fn kappa_second(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => {
                let s = sigmoid(theta);
                s * (1.0 - s)
            }
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Gaussian => 1.0,
        }
    }

    #[inline]
    pub fn h(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => (mu / (1.0 - mu)).ln(),
            FamilyKind::Poisson => mu.ln(),
            FamilyKind::Gaussian => mu,
        }
    }

    #[inline]
    pub fn h_prime(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => 1.0 / (mu * (1.0 - mu)),
            FamilyKind::Poisson => 1.0 / mu,
            FamilyKind::Gaussian => 1.0,
        }
    }

    #[inline]
    pub fn h_second(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => {
                let v = mu * (1.0 - mu);
                (2.0 * mu - 1.0) / (v * v)
            }
            FamilyKind::Poisson => -1.0 / (mu * mu),
            FamilyKind::Gaussian => 0.0,
        }
    }

    /// Clamp a mean into `[EPS_MEAN, 1 − EPS_MEAN]` (Bernoulli) or
    /// `[EPS_MEAN, ∞)` (Poisson). Gaussian means pass through.
    #[inline]
    pub fn clamp_mean(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => mu.clamp(EPS_MEAN, 1.0 - EPS_MEAN),
            FamilyKind::Poisson => mu.max(EPS_MEAN),
            FamilyKind::Gaussian => mu,
        }
    }

    /// Whether `clamp_mean` would move `mu`.
    #[inline]
    pub fn mean_is_clamped(&self, mu: f64) -> bool {
        match self.kind {
            FamilyKind::Bernoulli => !(EPS_MEAN..=1.0 - EPS_MEAN).contains(&mu),
            FamilyKind::Poisson => mu < EPS_MEAN,
            FamilyKind::Gaussian => false,
        }
    }

    // ---- checked operations ----

    pub fn cumulant(&self, theta: f64) -> Result<f64> {
        finite_theta(theta)?;
        Ok(self.kappa(theta))
    }

    pub fn mean_from_theta(&self, theta: f64) -> Result<f64> {
        finite_theta(theta)?;
        Ok(self.kappa_prime(theta))
    }

    pub fn variance_from_theta(&self, theta: f64) -> Result<f64> {
        finite_theta(theta)?;
        Ok(self.kappa_second(theta))
    }

    pub fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Bernoulli => mu > 0.0 && mu < 1.0,
            FamilyKind::Poisson => mu > 0.0 && mu.is_finite(),
            FamilyKind::Gaussian => mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("mean {mu} outside the open {:?} mean domain", self.kind)))
        }
    }

    pub fn link(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(self.h(mu))
    }

    pub fn link_prime(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(self.h_prime(mu))
    }

    pub fn link_second(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(self.h_second(mu))
    }

    pub fn check_outcome(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y >= 0.0 && y.is_finite() && y.fract() == 0.0,
            FamilyKind::Gaussian => y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("outcome {y} outside the {:?} support", self.kind)))
        }
    }

    /// Negative log-likelihood `(−y·h(μ) + κ(h(μ)))/φ` with `ξ(y; φ)` dropped.
    pub fn nll(&self, y: f64, mu: f64) -> Result<f64> {
        self.check_outcome(y)?;
        self.check_mean(mu)?;
        Ok(self.nll_theta(y, self.h(mu)))
    }

    /// Negative log-likelihood on the canonical scale, unchecked.
    #[inline]
    pub fn nll_theta(&self, y: f64, theta: f64) -> f64 {
        (-y * theta + self.kappa(theta)) / self.dispersion
    }

    /// Draw one outcome with mean `mu`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> f64 {
        match self.kind {
            FamilyKind::Bernoulli => {
                if rng.random::<f64>() < mu {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::Poisson => {
                if mu <= 0.0 || !mu.is_finite() {
                    0.0
                } else {
                    Poisson::new(mu).map(|d| d.sample(rng)).unwrap_or(0.0)
                }
            }
            FamilyKind::Gaussian => {
                let sd = self.dispersion.sqrt();
                Normal::new(mu, sd).map(|d| d.sample(rng)).unwrap_or(mu)
            }
        }
    }
}

fn finite_theta(theta: f64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("canonical parameter {theta} is not finite")))
    }
}
