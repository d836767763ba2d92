//! Score-driven filtering of a time-varying mean and variance.
//!
//! Each observation moves the predicted moments along the scaled score of the
//! conditional log-density,
//!
//! ```text
//! θ_{t|t}   = θ_{t|t-1} + γ/(1-γ) · α · S_t · ∇ log p(y_t | θ_{t|t-1})
//! θ_{t+1|t} = ω + β · θ_{t|t}
//! ```
//!
//! with `S_t` the per-channel scaling (inverse Fisher information for the
//! Gaussian, `νσ²/(ν+1)` and `2σ⁴` for Student's t). The two channels never
//! interact through `S_t` because the score covariance is zero for both
//! families.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower bound applied to every variance the filter produces.
pub const VARIANCE_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    #[default]
    StudentT,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "student_t" => Ok(Family::StudentT),
            other => Err(Error::Argument(format!("unknown family {other:?}"))),
        }
    }
}

/// Static parameters of one feature's filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasParams {
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub beta_mu: f64,
    pub beta_sigma: f64,
    pub omega_mu: f64,
    pub omega_sigma: f64,
    /// Degrees of freedom; ignored by the Gaussian family.
    pub nu: f64,
    /// Normalization strength in `[0, 1)`.
    pub gamma: f64,
    pub mu0: f64,
    pub sigma2_0: f64,
    pub family: Family,
}

impl GasParams {
    /// A filter parked at `(mean, var)`: β = 1, ω = 0, so with γ = 0 the
    /// moments never move.
    pub fn stationary(family: Family, nu: f64, gamma: f64, mean: f64, var: f64) -> Self {
        Self {
            alpha_mu: 0.0,
            alpha_sigma: 0.0,
            beta_mu: 1.0,
            beta_sigma: 1.0,
            omega_mu: 0.0,
            omega_sigma: 0.0,
            nu,
            gamma,
            mu0: mean,
            sigma2_0: var.max(VARIANCE_FLOOR),
            family,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha_mu,
            self.alpha_sigma,
            self.beta_mu,
            self.beta_sigma,
            self.omega_mu,
            self.omega_sigma,
            self.gamma,
            self.mu0,
            self.sigma2_0,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("non-finite filter parameter".into()));
        }
        if self.alpha_mu < 0.0 || self.alpha_sigma < 0.0 {
            return Err(Error::Domain("learning rates must be non-negative".into()));
        }
        // β = 1 (random-walk level) is admitted; the fit never proposes it.
        if self.beta_mu.abs() > 1.0 || self.beta_sigma.abs() > 1.0 {
            return Err(Error::Domain("|beta| must not exceed 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.sigma2_0 <= 0.0 {
            return Err(Error::Domain("initial variance must be positive".into()));
        }
        if self.family == Family::StudentT && !(self.nu > 2.0) {
            return Err(Error::Domain(format!(
                "Student's t needs nu > 2, got {}",
                self.nu
            )));
        }
        Ok(())
    }

    /// `γ / (1 - γ)`
    pub fn strength(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }

    pub fn initial(&self) -> Moments {
        Moments::new(self.mu0, self.sigma2_0)
    }
}

/// A (mean, variance) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: f64,
    pub sigma2: f64,
}

impl Moments {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self { mu, sigma2 }
    }

    pub fn std(&self) -> f64 {
        self.sigma2.max(VARIANCE_FLOOR).sqrt()
    }
}

/// Predicted (`θ_{t|t-1}`) and filtered (`θ_{t|t}`) moments for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub mu_pred: f64,
    pub sigma2_pred: f64,
    pub mu_filt: f64,
    pub sigma2_filt: f64,
}

impl FilterState {
    pub fn predicted(&self) -> Moments {
        Moments::new(self.mu_pred, self.sigma2_pred)
    }

    pub fn filtered(&self) -> Moments {
        Moments::new(self.mu_filt, self.sigma2_filt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub states: Vec<FilterState>,
    /// `Σ_t log p(y_t | θ_{t|t-1})`
    pub loglik: f64,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&FilterState> {
        self.states.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreFim {
    pub score_mu: f64,
    pub score_sigma2: f64,
    pub fim_mu: f64,
    pub fim_sigma2: f64,
}

fn check_density_args(family: Family, sigma2: f64, nu: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Domain(format!("variance must be positive, got {sigma2}")));
    }
    if family == Family::StudentT && !(nu > 2.0) {
        return Err(Error::Domain(format!("Student's t needs nu > 2, got {nu}")));
    }
    Ok(())
}

/// Gradient of `log p(y | μ, σ²)` in `(μ, σ²)` and the diagonal of its Fisher
/// information.
pub fn score_and_fim(family: Family, y: f64, mu: f64, sigma2: f64, nu: f64) -> Result<ScoreFim> {
    check_density_args(family, sigma2, nu)?;
    let e = y - mu;
    let e2 = e * e;
    Ok(match family {
        Family::Gaussian => ScoreFim {
            score_mu: e / sigma2,
            score_sigma2: 0.5 * (e2 / (sigma2 * sigma2) - 1.0 / sigma2),
            fim_mu: 1.0 / sigma2,
            fim_sigma2: 1.0 / (2.0 * sigma2 * sigma2),
        },
        Family::StudentT => ScoreFim {
            score_mu: (nu + 1.0) * e / (nu * sigma2 + e2),
            score_sigma2: 0.5 * ((nu + 1.0) * e2 / (nu * sigma2 * sigma2 + sigma2 * e2) - 1.0 / sigma2),
            fim_mu: (nu + 1.0) / ((nu + 3.0) * sigma2),
            fim_sigma2: nu / (2.0 * (nu + 3.0) * sigma2 * sigma2),
        },
    })
}

/// Per-channel score scaling `S_t`.
pub fn score_scaling(family: Family, sigma2: f64, nu: f64) -> (f64, f64) {
    match family {
        Family::Gaussian => (sigma2, 2.0 * sigma2 * sigma2),
        Family::StudentT => (nu * sigma2 / (nu + 1.0), 2.0 * sigma2 * sigma2),
    }
}

pub fn log_density(family: Family, y: f64, mu: f64, sigma2: f64, nu: f64) -> Result<f64> {
    check_density_args(family, sigma2, nu)?;
    Ok(log_density_unchecked(family, normalizing_constant(family, nu), y, mu, sigma2, nu))
}

/// The σ-free part of the log-density, so loops pay for `ln Γ` once.
fn normalizing_constant(family: Family, nu: f64) -> f64 {
    match family {
        Family::Gaussian => -0.5 * LN_2PI,
        Family::StudentT => {
            ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (std::f64::consts::PI * nu).ln()
        }
    }
}

fn log_density_unchecked(family: Family, constant: f64, y: f64, mu: f64, sigma2: f64, nu: f64) -> f64 {
    let e2 = (y - mu).powi(2);
    match family {
        Family::Gaussian => constant - 0.5 * sigma2.ln() - 0.5 * e2 / sigma2,
        Family::StudentT => {
            constant - 0.5 * sigma2.ln() - 0.5 * (nu + 1.0) * (e2 / (nu * sigma2)).ln_1p()
        }
    }
}

/// Incorporates `y` into the prediction `predicted = θ_{t|t-1}`.
///
/// The returned state carries both the prediction it started from and the
/// filtered moments. Use [`predict`] for `θ_{t+1|t}`.
pub fn update(params: &GasParams, predicted: Moments, y: f64) -> Result<FilterState> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("observation {y} is not finite")));
    }
    let sigma2 = predicted.sigma2.max(VARIANCE_FLOOR);
    let s = score_and_fim(params.family, y, predicted.mu, sigma2, params.nu)?;
    let (scale_mu, scale_sigma2) = score_scaling(params.family, sigma2, params.nu);
    let k = params.strength();
    let mu_filt = predicted.mu + k * params.alpha_mu * scale_mu * s.score_mu;
    let sigma2_filt = (sigma2 + k * params.alpha_sigma * scale_sigma2 * s.score_sigma2).max(VARIANCE_FLOOR);
    if !mu_filt.is_finite() || !sigma2_filt.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            message: format!("update produced ({mu_filt}, {sigma2_filt})"),
        });
    }
    Ok(FilterState {
        mu_pred: predicted.mu,
        sigma2_pred: sigma2,
        mu_filt,
        sigma2_filt,
    })
}

/// `θ_{t+1|t} = ω + β θ_{t|t}`, variance floored.
pub fn predict(params: &GasParams, filtered: Moments) -> Moments {
    Moments::new(
        params.omega_mu + params.beta_mu * filtered.mu,
        (params.omega_sigma + params.beta_sigma * filtered.sigma2).max(VARIANCE_FLOOR),
    )
}

/// Runs the filter over `ys` starting from `(mu0, sigma2_0)` as the first
/// prediction.
pub fn filter_series(params: &GasParams, ys: &[f64]) -> Result<FilterTrace> {
    filter_from(params, params.initial(), ys)
}

/// Same as [`filter_series`] with an explicit first prediction.
pub fn filter_from(params: &GasParams, first: Moments, ys: &[f64]) -> Result<FilterTrace> {
    params.validate()?;
    if ys.is_empty() {
        return Err(Error::Argument("cannot filter an empty series".into()));
    }
    let mut states = Vec::with_capacity(ys.len());
    let mut loglik = 0.0;
    let constant = normalizing_constant(params.family, params.nu);
    let mut pred = Moments::new(first.mu, first.sigma2.max(VARIANCE_FLOOR));
    for (t, &y) in ys.iter().enumerate() {
        let state = update(params, pred, y).map_err(|e| e.at_step(t))?;
        loglik += log_density_unchecked(
            params.family,
            constant,
            y,
            state.mu_pred,
            state.sigma2_pred,
            params.nu,
        );
        pred = predict(params, state.filtered());
        if !pred.mu.is_finite() || !pred.sigma2.is_finite() {
            return Err(Error::Numerical {
                step: t,
                message: format!("prediction diverged to ({}, {})", pred.mu, pred.sigma2),
            });
        }
        states.push(state);
    }
    Ok(FilterTrace { states, loglik })
}

/// Iterates the prediction recursion `horizon` times from the filtered
/// moments of `last_state`; element `k` is `θ_{t+k+1|t}`.
pub fn forecast_statistics(params: &GasParams, last_state: &FilterState, horizon: usize) -> Vec<Moments> {
    let mut out = Vec::with_capacity(horizon);
    let mut cur = last_state.filtered();
    for _ in 0..horizon {
        cur = predict(params, cur);
        out.push(cur);
    }
    out
}
