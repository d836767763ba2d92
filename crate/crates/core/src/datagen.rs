//! Synthetic series for the controlled experiments: AR with seasonality and
//! trend, the Lorenz system, affine shifts, quadratic trends and outliers.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{population_moments, SeriesFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArSpec {
    pub length: usize,
    pub ar_coeffs: Vec<f64>,
    pub noise_std: f64,
    pub season_amplitude: f64,
    pub season_period: usize,
    pub trend_slope: f64,
    pub seed: u64,
    /// Reject AR coefficients whose recursion is not stable.
    #[serde(default)]
    pub require_stationary: bool,
}

impl Default for ArSpec {
    fn default() -> Self {
        Self {
            length: 1000,
            ar_coeffs: vec![0.9],
            noise_std: 1.0,
            season_amplitude: 2.0,
            season_period: 50,
            trend_slope: 0.02,
            seed: 0,
            require_stationary: false,
        }
    }
}

/// `x_t = z_t + A sin(2πt/P) + slope · t` where `z` is the AR recursion
/// `z_t = Σ a_i z_{t-i} + ε_t` started from zeros.
pub fn gen_ar(spec: &ArSpec) -> Result<SeriesFrame> {
    if spec.length == 0 || spec.season_period == 0 {
        return Err(Error::Argument("length and season_period must be positive".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Argument("noise_std must be non-negative".into()));
    }
    if spec.require_stationary && !ar_is_stable(&spec.ar_coeffs) {
        return Err(Error::Argument(format!(
            "AR coefficients {:?} are not stationary",
            spec.ar_coeffs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;
    let p = spec.ar_coeffs.len();
    let mut z = vec![0.0; spec.length];
    let mut out = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let ar: f64 = (0..p.min(t)).map(|i| spec.ar_coeffs[i] * z[t - 1 - i]).sum();
        z[t] = ar + eps;
        let tf = t as f64;
        let season = spec.season_amplitude * (2.0 * PI * tf / spec.season_period as f64).sin();
        out.push(z[t] + season + spec.trend_slope * tf);
    }
    SeriesFrame::univariate("ar", &out)
}

/// Stability of `z_t = Σ a_i z_{t-i}`: spectral radius of the companion
/// matrix below 1, estimated by Gelfand's formula on repeated squarings.
pub fn ar_is_stable(coeffs: &[f64]) -> bool {
    let p = coeffs.len();
    if p == 0 {
        return true;
    }
    let mut m = Array2::<f64>::zeros((p, p));
    for (j, a) in coeffs.iter().enumerate() {
        m[[0, j]] = *a;
    }
    for i in 1..p {
        m[[i, i - 1]] = 1.0;
    }
    // ‖M^k‖^{1/k} → ρ(M); track log-scale to avoid overflow.
    let mut log_scale = 0.0;
    let squarings = 24;
    for _ in 0..squarings {
        m = m.dot(&m);
        let norm = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm == 0.0 {
            return true;
        }
        m /= norm;
        log_scale = 2.0 * log_scale + norm.ln();
    }
    let k = 2f64.powi(squarings);
    let log_rho = log_scale / k;
    log_rho < -1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzSpec {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub steps: usize,
    pub initial: [f64; 3],
    /// Additive Gaussian noise, as a fraction of each coordinate's clean
    /// standard deviation.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for LorenzSpec {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            steps: 5000,
            initial: [1.0, 1.0, 1.0],
            noise_std: 0.005,
            seed: 0,
        }
    }
}

impl LorenzSpec {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(Error::Argument(format!("dt {} outside (0, 0.05]", self.dt)));
        }
        if self.steps == 0 {
            return Err(Error::Argument("steps must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Argument("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    fn derivative(&self, s: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = s;
        [
            self.sigma * (y - x),
            x * (self.rho - z) - y,
            x * y - self.beta * z,
        ]
    }
}

/// One classical fourth-order Runge-Kutta step of the Lorenz system.
pub fn rk4_step(spec: &LorenzSpec, s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = spec.derivative(s);
    let k2 = spec.derivative(add(s, k1, dt / 2.0));
    let k3 = spec.derivative(add(s, k2, dt / 2.0));
    let k4 = spec.derivative(add(s, k3, dt));
    let mut out = s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Noise-free trajectory of `steps` rows, the first being `initial`.
pub fn integrate_lorenz(spec: &LorenzSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut out = Array2::zeros((spec.steps, 3));
    let mut s = spec.initial;
    for t in 0..spec.steps {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                message: format!("Lorenz state diverged to {s:?}"),
            });
        }
        out.row_mut(t).assign(&ndarray::arr1(&s));
        s = rk4_step(spec, s, spec.dt);
    }
    Ok(out)
}

/// Lorenz coordinates `x, y, z` plus seeded observation noise.
pub fn gen_lorenz(spec: &LorenzSpec) -> Result<SeriesFrame> {
    let mut clean = integrate_lorenz(spec)?;
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stds: Vec<f64> = clean
            .axis_iter(Axis(1))
            .map(|c| population_moments(c.iter().copied()).1.sqrt())
            .collect();
        for mut row in clean.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let n: f64 = rand_distr::StandardNormal.sample(&mut rng);
                *v += spec.noise_std * stds[j] * n;
            }
        }
    }
    SeriesFrame::new(clean, vec!["x".into(), "y".into(), "z".into()])
}

/// `x ↦ scale · x + shift` per feature.
pub fn affine_map(frame: &SeriesFrame, shift: &[f64], scale: &[f64]) -> Result<SeriesFrame> {
    let k = frame.n_features();
    if shift.len() != k || scale.len() != k {
        return Err(Error::Argument(format!(
            "affine map needs {k} shifts and scales"
        )));
    }
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Argument("affine scales must be positive".into()));
    }
    let mut v = frame.values().to_owned();
    for (j, mut col) in v.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|x| scale[j] * x + shift[j]);
    }
    frame.with_values(v)
}

/// `x_t ↦ x_t + coeff · t²` with `t` counted from 0 at the first row.
pub fn add_quadratic_trend(frame: &SeriesFrame, coeff: f64) -> Result<SeriesFrame> {
    let mut v = frame.values().to_owned();
    for (t, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
        let bump = coeff * (t as f64).powi(2);
        row.mapv_inplace(|x| x + bump);
    }
    frame.with_values(v)
}

/// Adds `magnitude_in_sigmas` population standard deviations of `feature`
/// (computed over the whole frame) at row `t`.
pub fn inject_outlier(frame: &SeriesFrame, t: usize, feature: usize, magnitude_in_sigmas: f64) -> Result<SeriesFrame> {
    if feature >= frame.n_features() {
        return Err(Error::Argument(format!("feature {feature} out of range")));
    }
    let std = population_moments(frame.column(feature).iter().copied()).1.sqrt();
    inject_outlier_with_std(frame, t, feature, magnitude_in_sigmas, std)
}

/// As [`inject_outlier`] with an explicit reference standard deviation,
/// e.g. one measured on the training segment only.
pub fn inject_outlier_with_std(
    frame: &SeriesFrame,
    t: usize,
    feature: usize,
    magnitude_in_sigmas: f64,
    std: f64,
) -> Result<SeriesFrame> {
    if t >= frame.len() || feature >= frame.n_features() {
        return Err(Error::Argument(format!(
            "outlier position ({t}, {feature}) outside frame of shape ({}, {})",
            frame.len(),
            frame.n_features()
        )));
    }
    let mut v = frame.values().to_owned();
    v[[t, feature]] += magnitude_in_sigmas * std;
    frame.with_values(v)
}

/// Writes the frame as CSV next to a JSON copy of the generator spec.
pub fn write_with_sidecar<S: Serialize>(frame: &SeriesFrame, spec: &S, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    frame.write_csv(csv_path)?;
    std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}
