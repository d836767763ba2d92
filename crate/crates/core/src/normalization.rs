//! Normalize a context window, denormalize a horizon forecast.
//!
//! Every normalizer reduces to the same affine form: a location `mu` and a
//! divisor `scale` per (time, feature). Standardizers use `scale = σ`; mean
//! scaling uses `mu = 0` and `scale = mean`, so one denormalization path
//! (`y = mu + scale · e`) serves all of them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::{filter_from, filter_series, forecast_statistics, FilterTrace, GasParams, Moments, VARIANCE_FLOOR};
use crate::timeseries::{population_moments, write_matrix_csv};

/// Means closer to zero than this fall back to unit scale in mean scaling.
pub const MEAN_SCALE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    GasNorm,
    GlobalNorm,
    LocalNorm,
    MeanScaling,
}

impl NormalizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormalizerKind::GasNorm => "gas_norm",
            NormalizerKind::GlobalNorm => "global_norm",
            NormalizerKind::LocalNorm => "local_norm",
            NormalizerKind::MeanScaling => "mean_scaling",
        }
    }
}

impl std::str::FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gas_norm" | "gas" => Ok(Self::GasNorm),
            "global_norm" | "global" => Ok(Self::GlobalNorm),
            "local_norm" | "local" => Ok(Self::LocalNorm),
            "mean_scaling" | "mean" => Ok(Self::MeanScaling),
            other => Err(Error::Argument(format!("unknown normalizer {other:?}"))),
        }
    }
}

/// Per-(time, feature) location and divisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatPath {
    pub mu: Array2<f64>,
    pub scale: Array2<f64>,
}

impl StatPath {
    fn constant(rows: usize, per_feature: &[(f64, f64)]) -> Self {
        let k = per_feature.len();
        Self {
            mu: Array2::from_shape_fn((rows, k), |(_, j)| per_feature[j].0),
            scale: Array2::from_shape_fn((rows, k), |(_, j)| per_feature[j].1),
        }
    }

    fn from_moments(columns: &[Vec<Moments>]) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        Self {
            mu: Array2::from_shape_fn((rows, columns.len()), |(t, j)| columns[j][t].mu),
            scale: Array2::from_shape_fn((rows, columns.len()), |(t, j)| columns[j][t].std()),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    /// `scale²`
    pub fn sigma2(&self) -> Array2<f64> {
        self.scale.mapv(|s| s * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBatch {
    pub normalized_context: Array2<f64>,
    pub context_stats: StatPath,
    pub horizon_stats: StatPath,
    pub normalizer: NormalizerKind,
    /// Features whose mean-scaling divisor fell back to 1.
    #[serde(default)]
    pub scale_fallback: Vec<bool>,
}

impl NormalizedBatch {
    pub fn horizon(&self) -> usize {
        self.horizon_stats.len()
    }

    pub fn n_features(&self) -> usize {
        self.normalized_context.ncols()
    }

    /// Writes `<prefix>_normalized.csv`, `<prefix>_context_stats.csv`,
    /// `<prefix>_horizon_stats.csv` and a `<prefix>.json` sidecar.
    ///
    /// Stats files carry `<name>_mu,<name>_scale` column pairs; a forecast
    /// residual `e` maps back to `mu + scale · e`.
    pub fn write(
        &self,
        dir: impl AsRef<Path>,
        prefix: &str,
        feature_names: &[String],
        parameters: serde_json::Value,
    ) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        if feature_names.len() != self.n_features() {
            return Err(Error::Argument(format!(
                "{} names for {} features",
                feature_names.len(),
                self.n_features()
            )));
        }
        let normalized = dir.join(format!("{prefix}_normalized.csv"));
        write_matrix_csv(
            std::io::BufWriter::new(fs::File::create(&normalized)?),
            feature_names,
            self.normalized_context.view(),
        )?;
        let mut written = vec![normalized];
        for (label, stats) in [("context", &self.context_stats), ("horizon", &self.horizon_stats)] {
            let path = dir.join(format!("{prefix}_{label}_stats.csv"));
            let header: Vec<String> = feature_names
                .iter()
                .flat_map(|n| [format!("{n}_mu"), format!("{n}_scale")])
                .collect();
            let mut interleaved = Array2::zeros((stats.len(), 2 * self.n_features()));
            for j in 0..self.n_features() {
                interleaved.column_mut(2 * j).assign(&stats.mu.column(j));
                interleaved.column_mut(2 * j + 1).assign(&stats.scale.column(j));
            }
            write_matrix_csv(
                std::io::BufWriter::new(fs::File::create(&path)?),
                &header,
                interleaved.view(),
            )?;
            written.push(path);
        }
        let sidecar = dir.join(format!("{prefix}.json"));
        let meta = serde_json::json!({
            "normalizer": self.normalizer,
            "features": feature_names,
            "context_length": self.normalized_context.nrows(),
            "horizon": self.horizon(),
            "scale_fallback": self.scale_fallback,
            "parameters": parameters,
        });
        fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)?;
        written.push(sidecar);
        Ok(written)
    }
}

/// A normalizer together with whatever it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub kind: NormalizerKind,
    #[serde(default)]
    pub gas_params: Option<Vec<GasParams>>,
    /// Per-feature (mean, variance) of the training segment.
    #[serde(default)]
    pub global_stats: Option<Vec<(f64, f64)>>,
}

impl NormalizerSpec {
    pub fn gas(params: Vec<GasParams>) -> Self {
        Self {
            kind: NormalizerKind::GasNorm,
            gas_params: Some(params),
            global_stats: None,
        }
    }

    pub fn global(stats: Vec<(f64, f64)>) -> Self {
        Self {
            kind: NormalizerKind::GlobalNorm,
            gas_params: None,
            global_stats: Some(stats),
        }
    }

    pub fn local() -> Self {
        Self {
            kind: NormalizerKind::LocalNorm,
            gas_params: None,
            global_stats: None,
        }
    }

    pub fn mean_scaling() -> Self {
        Self {
            kind: NormalizerKind::MeanScaling,
            gas_params: None,
            global_stats: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gas = self.kind == NormalizerKind::GasNorm;
        let global = self.kind == NormalizerKind::GlobalNorm;
        if gas != self.gas_params.is_some() {
            return Err(Error::Config(
                "gas_params must be given exactly when the normalizer is gas_norm".into(),
            ));
        }
        if global != self.global_stats.is_some() {
            return Err(Error::Config(
                "global_stats must be given exactly when the normalizer is global_norm".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, context: ArrayView2<'_, f64>, horizon: usize) -> Result<NormalizedBatch> {
        self.validate()?;
        match self.kind {
            NormalizerKind::GasNorm => {
                gas_normalize(context, self.gas_params.as_deref().unwrap_or_default(), horizon)
            }
            NormalizerKind::GlobalNorm => {
                global_normalize(context, horizon, self.global_stats.as_deref().unwrap_or_default())
            }
            NormalizerKind::LocalNorm => local_normalize(context, horizon),
            NormalizerKind::MeanScaling => mean_scale(context, horizon),
        }
    }
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Argument("horizon must be positive".into()));
    }
    Ok(())
}

fn standardize(context: ArrayView2<'_, f64>, stats: &StatPath) -> Array2<f64> {
    let mut out = context.to_owned();
    ndarray::Zip::from(&mut out)
        .and(&stats.mu)
        .and(&stats.scale)
        .for_each(|x, m, s| *x = (*x - m) / s);
    out
}

/// Filters each feature over the context from its `(mu0, sigma2_0)` and
/// standardizes `x_t` with the one-step prediction `θ_{t|t-1}`.
pub fn gas_normalize(
    context: ArrayView2<'_, f64>,
    params: &[GasParams],
    horizon: usize,
) -> Result<NormalizedBatch> {
    check_horizon(horizon)?;
    if params.len() != context.ncols() {
        return Err(Error::Config(format!(
            "{} parameter sets for {} features",
            params.len(),
            context.ncols()
        )));
    }
    if context.nrows() == 0 {
        return Err(Error::Argument("empty context".into()));
    }
    let traces = params
        .iter()
        .zip(context.axis_iter(Axis(1)))
        .map(|(p, col)| filter_series(p, &col.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_from_traces(context, params, &traces, 0, context.nrows(), horizon))
}

fn batch_from_traces(
    values: ArrayView2<'_, f64>,
    params: &[GasParams],
    traces: &[FilterTrace],
    start: usize,
    context_length: usize,
    horizon: usize,
) -> NormalizedBatch {
    let end = start + context_length;
    let ctx_moments: Vec<Vec<Moments>> = traces
        .iter()
        .map(|tr| tr.states[start..end].iter().map(|s| s.predicted()).collect())
        .collect();
    let hor_moments: Vec<Vec<Moments>> = traces
        .iter()
        .zip(params)
        .map(|(tr, p)| forecast_statistics(p, &tr.states[end - 1], horizon))
        .collect();
    let context_stats = StatPath::from_moments(&ctx_moments);
    let context = values.slice(s![start..end, ..]);
    NormalizedBatch {
        normalized_context: standardize(context, &context_stats),
        context_stats,
        horizon_stats: StatPath::from_moments(&hor_moments),
        normalizer: NormalizerKind::GasNorm,
        scale_fallback: vec![false; values.ncols()],
    }
}

/// Standardizes each window with its own mean and population variance.
pub fn local_normalize(context: ArrayView2<'_, f64>, horizon: usize) -> Result<NormalizedBatch> {
    check_horizon(horizon)?;
    if context.nrows() < 2 {
        return Err(Error::Argument(
            "local normalization needs at least 2 context steps".into(),
        ));
    }
    let stats: Vec<(f64, f64)> = context
        .axis_iter(Axis(1))
        .map(|col| {
            let (m, v) = population_moments(col.iter().copied());
            (m, v.max(VARIANCE_FLOOR).sqrt())
        })
        .collect();
    Ok(constant_batch(context, horizon, &stats, NormalizerKind::LocalNorm))
}

/// Standardizes with fixed per-feature training `(mean, variance)`.
pub fn global_normalize(
    context: ArrayView2<'_, f64>,
    horizon: usize,
    global_stats: &[(f64, f64)],
) -> Result<NormalizedBatch> {
    check_horizon(horizon)?;
    if global_stats.len() != context.ncols() {
        return Err(Error::Config(format!(
            "{} global stats for {} features",
            global_stats.len(),
            context.ncols()
        )));
    }
    let stats: Vec<(f64, f64)> = global_stats
        .iter()
        .map(|&(m, v)| (m, v.max(VARIANCE_FLOOR).sqrt()))
        .collect();
    Ok(constant_batch(context, horizon, &stats, NormalizerKind::GlobalNorm))
}

/// Divides each feature by its context mean.
pub fn mean_scale(context: ArrayView2<'_, f64>, horizon: usize) -> Result<NormalizedBatch> {
    check_horizon(horizon)?;
    if context.nrows() == 0 {
        return Err(Error::Argument("empty context".into()));
    }
    let mut fallback = Vec::with_capacity(context.ncols());
    let stats: Vec<(f64, f64)> = context
        .axis_iter(Axis(1))
        .map(|col| {
            let mean = col.mean().unwrap_or(0.0);
            let guarded = mean.abs() < MEAN_SCALE_GUARD;
            if guarded {
                log::warn!("context mean {mean} too close to zero; mean scaling falls back to 1");
            }
            fallback.push(guarded);
            (0.0, if guarded { 1.0 } else { mean })
        })
        .collect();
    let mut batch = constant_batch(context, horizon, &stats, NormalizerKind::MeanScaling);
    batch.scale_fallback = fallback;
    Ok(batch)
}

fn constant_batch(
    context: ArrayView2<'_, f64>,
    horizon: usize,
    stats: &[(f64, f64)],
    kind: NormalizerKind,
) -> NormalizedBatch {
    let context_stats = StatPath::constant(context.nrows(), stats);
    NormalizedBatch {
        normalized_context: standardize(context, &context_stats),
        context_stats,
        horizon_stats: StatPath::constant(horizon, stats),
        normalizer: kind,
        scale_fallback: vec![false; stats.len()],
    }
}

/// `y = mu + scale · e` over the full horizon, all features.
pub fn denormalize(residual: ArrayView2<'_, f64>, batch: &NormalizedBatch) -> Result<Array2<f64>> {
    let all: Vec<usize> = (0..batch.n_features()).collect();
    denormalize_features(residual, batch, &all)
}

/// Denormalizes a residual forecast whose columns are the batch features
/// listed in `features`.
pub fn denormalize_features(
    residual: ArrayView2<'_, f64>,
    batch: &NormalizedBatch,
    features: &[usize],
) -> Result<Array2<f64>> {
    check_target_shape(residual, batch, features)?;
    let mut out = residual.to_owned();
    for (c, &j) in features.iter().enumerate() {
        for t in 0..out.nrows() {
            out[[t, c]] = batch.horizon_stats.mu[[t, j]] + batch.horizon_stats.scale[[t, j]] * out[[t, c]];
        }
    }
    Ok(out)
}

/// The inverse of [`denormalize_features`]: the residual a forecaster must
/// emit to reproduce `target` exactly.
pub fn residual_targets(
    target: ArrayView2<'_, f64>,
    batch: &NormalizedBatch,
    features: &[usize],
) -> Result<Array2<f64>> {
    check_target_shape(target, batch, features)?;
    let mut out = target.to_owned();
    for (c, &j) in features.iter().enumerate() {
        for t in 0..out.nrows() {
            out[[t, c]] = (out[[t, c]] - batch.horizon_stats.mu[[t, j]]) / batch.horizon_stats.scale[[t, j]];
        }
    }
    Ok(out)
}

fn check_target_shape(values: ArrayView2<'_, f64>, batch: &NormalizedBatch, features: &[usize]) -> Result<()> {
    if values.nrows() != batch.horizon() || values.ncols() != features.len() {
        return Err(Error::Argument(format!(
            "forecast shape {:?} does not match horizon {} x {} features",
            values.dim(),
            batch.horizon(),
            features.len()
        )));
    }
    if let Some(&j) = features.iter().find(|&&j| j >= batch.n_features()) {
        return Err(Error::Argument(format!("feature index {j} out of range")));
    }
    Ok(())
}

/// One continuous filter pass over a whole series, from which any window's
/// batch can be cut without re-filtering.
///
/// The batch for `[start, start + l)` equals [`gas_normalize`] on that
/// context with each filter warm-started at `θ_{start|start-1}`.
#[derive(Debug, Clone)]
pub struct GasTracker {
    values: Array2<f64>,
    params: Vec<GasParams>,
    traces: Vec<FilterTrace>,
}

impl GasTracker {
    pub fn new(values: ArrayView2<'_, f64>, params: &[GasParams]) -> Result<Self> {
        if params.len() != values.ncols() {
            return Err(Error::Config(format!(
                "{} parameter sets for {} features",
                params.len(),
                values.ncols()
            )));
        }
        let traces = params
            .iter()
            .zip(values.axis_iter(Axis(1)))
            .map(|(p, col)| filter_from(p, p.initial(), &col.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            values: values.to_owned(),
            params: params.to_vec(),
            traces,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn traces(&self) -> &[FilterTrace] {
        &self.traces
    }

    /// `θ_{t|t-1}` for every feature.
    pub fn prediction_at(&self, t: usize) -> Vec<Moments> {
        self.traces.iter().map(|tr| tr.states[t].predicted()).collect()
    }

    pub fn batch(&self, start: usize, context_length: usize, horizon: usize) -> Result<NormalizedBatch> {
        check_horizon(horizon)?;
        if context_length == 0 || start + context_length > self.len() {
            return Err(Error::Argument(format!(
                "window [{start}, {}) outside series of length {}",
                start + context_length,
                self.len()
            )));
        }
        Ok(batch_from_traces(
            self.values.view(),
            &self.params,
            &self.traces,
            start,
            context_length,
            horizon,
        ))
    }
}
