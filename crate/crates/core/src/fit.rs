//! Static-parameter estimation by penalized prediction-error decomposition.
//!
//! The objective is
//!
//! ```text
//! Σ_t  γ · log p(y_t | θ_{t|t-1})  -  (1-γ)/2 · (θ_{t|t} - θ_{t|t-1})ᵀ F_t (θ_{t|t} - θ_{t|t-1})
//! ```
//!
//! where `F_t` is the diagonal Fisher information at the prediction. It is
//! maximized over (α, β, ω) per channel, and optionally ν, with a bounded
//! multi-start simplex search. The initial state stays pinned at the
//! training moments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::{filter_series, score_and_fim, Family, GasParams, VARIANCE_FLOOR};
use crate::optim::{minimize, Bounds, NelderMeadOptions};
use crate::timeseries::{population_moments, SeriesFrame};

/// Shortest series [`fit`] accepts.
pub const MIN_FIT_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub alpha_mu: (f64, f64),
    pub alpha_sigma: (f64, f64),
    pub beta_mu: (f64, f64),
    pub beta_sigma: (f64, f64),
    pub omega_mu: (f64, f64),
    pub omega_sigma: (f64, f64),
    pub nu: (f64, f64),
}

impl ParamBounds {
    /// Default search box for a series with the given moments.
    pub fn for_moments(mean: f64, var: f64) -> Self {
        let m = 10.0 * mean.abs() + 1.0;
        Self {
            alpha_mu: (0.0, 2.0),
            alpha_sigma: (0.0, 2.0),
            beta_mu: (0.0, 0.999),
            beta_sigma: (0.0, 0.999),
            omega_mu: (-m, m),
            omega_sigma: (0.0, 10.0 * var + 1.0),
            nu: (2.1, 1000.0),
        }
    }

    fn to_bounds(self, fit_nu: bool) -> Result<Bounds> {
        let mut pairs = vec![
            self.alpha_mu,
            self.alpha_sigma,
            self.beta_mu,
            self.beta_sigma,
            self.omega_mu,
            self.omega_sigma,
        ];
        if fit_nu {
            pairs.push(self.nu);
        }
        Bounds::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    pub fn validate(&self, family: Family, fit_nu: bool) -> Result<()> {
        let bad = |(lo, hi): (f64, f64)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite();
        if [
            self.alpha_mu,
            self.alpha_sigma,
            self.beta_mu,
            self.beta_sigma,
            self.omega_mu,
            self.omega_sigma,
            self.nu,
        ]
        .into_iter()
        .any(bad)
        {
            return Err(Error::Config("every bound needs finite low <= high".into()));
        }
        if self.alpha_mu.0 < 0.0 || self.alpha_sigma.0 < 0.0 {
            return Err(Error::Config("alpha bounds must be non-negative".into()));
        }
        let beta_ok = |(lo, hi): (f64, f64)| lo >= -1.0 && hi <= 1.0;
        if !beta_ok(self.beta_mu) || !beta_ok(self.beta_sigma) {
            return Err(Error::Config("beta bounds must lie in [-1, 1]".into()));
        }
        if family == Family::StudentT && fit_nu && self.nu.0 <= 2.0 {
            return Err(Error::Config("nu bounds must stay above 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub gamma: f64,
    pub family: Family,
    /// Degrees of freedom, fixed unless `fit_nu`; then the starting value.
    pub nu: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default)]
    pub fit_nu: bool,
    /// `None` derives the default box from the training moments.
    #[serde(default)]
    pub bounds: Option<ParamBounds>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            family: Family::StudentT,
            nu: 100.0,
            max_iters: 400,
            restarts: 3,
            seed: 0,
            fit_nu: false,
            bounds: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::Config("restarts and max_iters must be positive".into()));
        }
        if self.family == Family::StudentT && !(self.nu > 2.0) {
            return Err(Error::Config(format!("nu {} must exceed 2", self.nu)));
        }
        if let Some(b) = &self.bounds {
            b.validate(self.family, self.fit_nu)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: GasParams,
    /// Penalized objective at `params`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective at the deterministic starting point.
    pub initial_objective: f64,
    /// Set when the training variance had to be floored (constant series).
    #[serde(default)]
    pub degenerate: bool,
}

/// Penalized log-likelihood of `ys` under `params`.
pub fn penalized_objective(params: &GasParams, ys: &[f64]) -> Result<f64> {
    let trace = filter_series(params, ys)?;
    let mut penalty = 0.0;
    for s in &trace.states {
        let fim = score_and_fim(params.family, s.mu_pred, s.mu_pred, s.sigma2_pred, params.nu)?;
        let d_mu = s.mu_filt - s.mu_pred;
        let d_s2 = s.sigma2_filt - s.sigma2_pred;
        penalty += fim.fim_mu * d_mu * d_mu + fim.fim_sigma2 * d_s2 * d_s2;
    }
    let value = params.gamma * trace.loglik - 0.5 * (1.0 - params.gamma) * penalty;
    if !value.is_finite() {
        return Err(Error::Numerical {
            step: ys.len(),
            message: "objective is not finite".into(),
        });
    }
    Ok(value)
}

/// The deterministic starting point: α = 0.05, β = 0.95 and ω chosen so the
/// prediction recursion's fixed point is the training moment.
pub fn initial_params(ys: &[f64], config: &FitConfig) -> (GasParams, bool) {
    let (mean, raw_var) = population_moments(ys.iter().copied());
    let degenerate = raw_var < VARIANCE_FLOOR;
    let var = raw_var.max(VARIANCE_FLOOR);
    let beta = 0.95;
    (
        GasParams {
            alpha_mu: 0.05,
            alpha_sigma: 0.05,
            beta_mu: beta,
            beta_sigma: beta,
            omega_mu: (1.0 - beta) * mean,
            omega_sigma: (1.0 - beta) * var,
            nu: config.nu,
            gamma: config.gamma,
            mu0: mean,
            sigma2_0: var,
            family: config.family,
        },
        degenerate,
    )
}

fn to_vector(p: &GasParams, fit_nu: bool) -> Vec<f64> {
    let mut v = vec![
        p.alpha_mu,
        p.alpha_sigma,
        p.beta_mu,
        p.beta_sigma,
        p.omega_mu,
        p.omega_sigma,
    ];
    if fit_nu {
        v.push(p.nu);
    }
    v
}

fn from_vector(template: &GasParams, x: &[f64]) -> GasParams {
    GasParams {
        alpha_mu: x[0],
        alpha_sigma: x[1],
        beta_mu: x[2],
        beta_sigma: x[3],
        omega_mu: x[4],
        omega_sigma: x[5],
        nu: x.get(6).copied().unwrap_or(template.nu),
        ..*template
    }
}

/// Fits one feature's filter on its training observations.
pub fn fit(ys: &[f64], config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if ys.len() < MIN_FIT_LEN {
        return Err(Error::Argument(format!(
            "fit needs at least {MIN_FIT_LEN} observations, got {}",
            ys.len()
        )));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::Argument("fit input contains non-finite values".into()));
    }
    let (init, degenerate) = initial_params(ys, config);
    let fit_nu = config.fit_nu && config.family == Family::StudentT;
    let pbounds = config
        .bounds
        .unwrap_or_else(|| ParamBounds::for_moments(init.mu0, init.sigma2_0));
    let bounds = pbounds.to_bounds(fit_nu)?;
    let mut x0 = to_vector(&init, fit_nu);
    bounds.clip(&mut x0);
    let init = from_vector(&init, &x0);

    let initial_objective = penalized_objective(&init, ys).map_err(|e| {
        Error::Fit(format!("objective undefined at the starting point: {e}"))
    })?;

    let neg_objective = |x: &[f64]| {
        penalized_objective(&from_vector(&init, x), ys)
            .map(|v| -v)
            .unwrap_or(f64::INFINITY)
    };
    let opts = NelderMeadOptions {
        max_iters: config.max_iters,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<crate::optim::Minimum> = None;
    for restart in 0..config.restarts {
        let start: Vec<f64> = if restart == 0 {
            x0.clone()
        } else {
            x0.iter()
                .map(|v| v * (1.0 + rng.random_range(-0.5..0.5)))
                .collect()
        };
        let m = minimize(neg_objective, &start, &bounds, &opts)?;
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.expect("restarts >= 1");
    if !best.value.is_finite() {
        return Err(Error::Fit(format!(
            "all {} restarts failed numerically",
            config.restarts
        )));
    }
    let (params, objective) = if -best.value >= initial_objective {
        (from_vector(&init, &best.x), -best.value)
    } else {
        (init, initial_objective)
    };
    Ok(FitResult {
        params,
        objective,
        iterations: best.iterations,
        converged: best.converged,
        initial_objective,
        degenerate,
    })
}

/// Per-feature fits keyed by feature name. Failures are collected alongside
/// the successes rather than aborting the whole frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameFit {
    pub results: BTreeMap<String, FitResult>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

impl FrameFit {
    /// Parameters in the frame's feature order.
    pub fn params_for(&self, names: &[String]) -> Result<Vec<GasParams>> {
        names
            .iter()
            .map(|n| {
                self.results
                    .get(n)
                    .map(|r| r.params)
                    .ok_or_else(|| Error::Config(format!("no fitted parameters for feature {n:?}")))
            })
            .collect()
    }

    /// `{ feature: { params, objective, converged, iterations, .. } }`
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.results)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(Self {
            results: serde_json::from_str(s)?,
            errors: BTreeMap::new(),
        })
    }
}

/// Fits every feature of `frame` independently, one thread per feature.
pub fn fit_frame(frame: &SeriesFrame, config: &FitConfig) -> Result<FrameFit> {
    if frame.is_empty() || frame.n_features() == 0 {
        return Err(Error::Argument("cannot fit an empty frame".into()));
    }
    let columns: Vec<Vec<f64>> = (0..frame.n_features())
        .map(|j| frame.column(j).to_vec())
        .collect();
    let outcomes: Vec<Result<FitResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = columns
            .iter()
            .map(|col| scope.spawn(move || fit(col, config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fit thread panicked"))
            .collect()
    });
    let mut out = FrameFit::default();
    for (name, outcome) in frame.feature_names().iter().zip(outcomes) {
        match outcome {
            Ok(r) => {
                out.results.insert(name.clone(), r);
            }
            Err(e) => {
                out.errors.insert(name.clone(), e.to_string());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gas::log_density;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn zero_gamma_static_params_give_zero_objective() {
        let p = GasParams::stationary(Family::Gaussian, 0.0, 0.0, 0.0, 1.0);
        let v = penalized_objective(&p, &normals(50, 1)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pinned_params_give_scaled_loglik() {
        let ys = normals(200, 2);
        let gamma = 0.3;
        let p = GasParams::stationary(Family::Gaussian, 0.0, gamma, 0.0, 1.0);
        let direct: f64 = ys
            .iter()
            .map(|y| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * y * y)
            .sum();
        let v = penalized_objective(&p, &ys).unwrap();
        assert!((v - gamma * direct).abs() < 1e-9 * direct.abs(), "{v} vs {}", gamma * direct);
    }

    #[test]
    fn single_observation_objective() {
        let p = GasParams {
            alpha_mu: 0.4,
            alpha_sigma: 0.2,
            ..GasParams::stationary(Family::Gaussian, 0.0, 0.5, 0.0, 1.0)
        };
        let y = 1.5;
        // k = 1: Δμ = 0.4·1.5 = 0.6, Δσ² = 0.2·(2.25 - 1) = 0.25
        let ll = log_density(Family::Gaussian, y, 0.0, 1.0, 0.0).unwrap();
        let expect = 0.5 * ll - 0.25 * (0.6 * 0.6 + 0.5 * 0.25 * 0.25);
        let v = penalized_objective(&p, &[y]).unwrap();
        assert!((v - expect).abs() < 1e-14, "{v} vs {expect}");
    }

    #[test]
    fn fit_improves_on_iid_data_and_stays_in_bounds() {
        let ys = normals(300, 3);
        let cfg = FitConfig {
            family: Family::Gaussian,
            ..Default::default()
        };
        let r = fit(&ys, &cfg).unwrap();
        assert!(r.objective >= r.initial_objective);
        let b = ParamBounds::for_moments(r.params.mu0, r.params.sigma2_0);
        assert!(r.params.alpha_mu <= b.alpha_mu.1 && r.params.alpha_mu >= b.alpha_mu.0);
        assert!(r.params.beta_mu <= b.beta_mu.1 && r.params.beta_sigma <= b.beta_sigma.1);
        // on white noise there is nothing to track
        assert!(r.params.alpha_mu < 0.5, "{:?}", r.params);
    }

    #[test]
    fn fitted_filter_tracks_a_trend_better_than_static() {
        let ys: Vec<f64> = (0..200).map(|t| 0.05 * t as f64 + 0.1 * (t as f64 * 1.3).sin()).collect();
        let cfg = FitConfig {
            family: Family::Gaussian,
            ..Default::default()
        };
        let r = fit(&ys, &cfg).unwrap();
        let mae = |p: &GasParams| {
            let tr = filter_series(p, &ys).unwrap();
            tr.states.iter().zip(&ys).map(|(s, y)| (s.mu_pred - y).abs()).sum::<f64>() / ys.len() as f64
        };
        let static_p = GasParams { gamma: 0.0, ..r.params };
        assert!(mae(&r.params) < mae(&static_p), "{} vs {}", mae(&r.params), mae(&static_p));
    }

    #[test]
    fn fit_is_deterministic() {
        let ys: Vec<f64> = normals(120, 4).iter().enumerate().map(|(t, e)| e + 0.02 * t as f64).collect();
        let cfg = FitConfig {
            restarts: 3,
            seed: 11,
            ..Default::default()
        };
        let a = fit(&ys, &cfg).unwrap();
        let b = fit(&ys, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn fit_nu_moves_within_bounds() {
        let ys = normals(150, 5);
        let cfg = FitConfig {
            fit_nu: true,
            nu: 20.0,
            ..Default::default()
        };
        let r = fit(&ys, &cfg).unwrap();
        assert!((2.1..=1000.0).contains(&r.params.nu));
        assert!(r.objective >= r.initial_objective);
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(fit(&[1.0; 5], &FitConfig::default()), Err(Error::Argument(_))));
        let cfg = FitConfig {
            restarts: 0,
            ..Default::default()
        };
        assert!(fit(&normals(20, 0), &cfg).is_err());
    }

    #[test]
    fn frame_fit_isolates_features() {
        let a = normals(100, 6);
        let mut vals = ndarray::Array2::zeros((100, 3));
        for t in 0..100 {
            vals[[t, 0]] = a[t];
            vals[[t, 1]] = 4.2;
            vals[[t, 2]] = a[t];
        }
        let frame = SeriesFrame::new(vals, vec!["a".into(), "flat".into(), "dup".into()]).unwrap();
        let out = fit_frame(&frame, &FitConfig::default()).unwrap();
        assert_eq!(out.results.len(), 3);
        assert!(out.results["flat"].degenerate);
        assert!(!out.results["a"].degenerate);
        assert_eq!(out.results["a"], out.results["dup"]);

        // single-column fit of the same data is unaffected by its neighbours
        let solo = fit(&a, &FitConfig::default()).unwrap();
        assert_eq!(solo, out.results["a"]);

        let json = out.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["params", "objective", "converged", "iterations"] {
            assert!(v["a"].get(key).is_some());
        }
        assert_eq!(FrameFit::from_json(&json).unwrap().results, out.results);
    }
}
