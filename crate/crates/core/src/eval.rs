//! MASE, γ selection and experiment orchestration.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::{add_quadratic_trend, affine_map, gen_ar, gen_lorenz, ArSpec, LorenzSpec};
use crate::error::{Error, Result};
use crate::fit::{fit_frame, FitConfig};
use crate::forecaster::{predict_many, train_with_validation, MlpSpec, TrainedModel};
use crate::gas::Family;
use crate::normalization::{
    denormalize_features, global_normalize, local_normalize, mean_scale, residual_targets, GasTracker,
    NormalizedBatch,
};
use crate::timeseries::{population_moments, SeriesFrame, SplitSpec, Window};

/// Mean absolute scaled error per feature: out-of-sample MAE over the
/// in-sample MAE of the lag-`m` naive forecast on `train`.
pub fn mase(
    actual: ArrayView2<'_, f64>,
    forecast: ArrayView2<'_, f64>,
    train: ArrayView2<'_, f64>,
    m: usize,
) -> Result<Vec<f64>> {
    let names: Vec<String> = (0..actual.ncols()).map(|j| j.to_string()).collect();
    mase_named(actual, forecast, train, m, &names)
}

/// [`mase`] with feature names for error messages.
pub fn mase_named(
    actual: ArrayView2<'_, f64>,
    forecast: ArrayView2<'_, f64>,
    train: ArrayView2<'_, f64>,
    m: usize,
    names: &[String],
) -> Result<Vec<f64>> {
    if actual.dim() != forecast.dim() {
        return Err(Error::Argument(format!(
            "actual {:?} and forecast {:?} differ in shape",
            actual.dim(),
            forecast.dim()
        )));
    }
    if actual.nrows() == 0 {
        return Err(Error::Argument("no forecast rows to score".into()));
    }
    if train.ncols() != actual.ncols() || names.len() != actual.ncols() {
        return Err(Error::Argument("training data and forecasts have different features".into()));
    }
    if m == 0 || train.nrows() <= m {
        return Err(Error::Argument(format!(
            "seasonality {m} needs a training segment longer than {m} rows, got {}",
            train.nrows()
        )));
    }
    (0..actual.ncols())
        .map(|j| {
            let col = train.column(j);
            let denom = (m..col.len()).map(|t| (col[t] - col[t - m]).abs()).sum::<f64>() / (col.len() - m) as f64;
            if !(denom > 0.0) || !denom.is_finite() {
                return Err(Error::Metric {
                    feature: names[j].clone(),
                    message: format!("naive in-sample error is {denom}"),
                });
            }
            let num = actual
                .column(j)
                .iter()
                .zip(forecast.column(j))
                .map(|(a, f)| (a - f).abs())
                .sum::<f64>()
                / actual.nrows() as f64;
            Ok(num / denom)
        })
        .collect()
}

/// γ with the lowest validation score; ties go to the smaller γ.
pub fn select_gamma(validation: &[(f64, f64)]) -> Result<f64> {
    validation
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(g, _)| g)
        .ok_or_else(|| Error::Argument("no validation scores to select from".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Ar(ArSpec),
    Lorenz(LorenzSpec),
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
    },
}

fn yes() -> bool {
    true
}

impl DatasetSpec {
    pub fn load(&self) -> Result<SeriesFrame> {
        match self {
            DatasetSpec::Ar(s) => gen_ar(s),
            DatasetSpec::Lorenz(s) => gen_lorenz(s),
            DatasetSpec::Csv { path, has_header } => SeriesFrame::load_csv(path, *has_header),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Ar(_) => "ar".into(),
            DatasetSpec::Lorenz(_) => "lorenz".into(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalizerChoice {
    GasNorm {
        #[serde(default)]
        family: Family,
        #[serde(default = "default_nu")]
        nu: f64,
    },
    GlobalNorm,
    LocalNorm,
    MeanScaling,
}

fn default_nu() -> f64 {
    100.0
}

impl NormalizerChoice {
    pub fn label(&self) -> String {
        match self {
            NormalizerChoice::GasNorm { family: Family::Gaussian, .. } => "gas_norm_gaussian".into(),
            NormalizerChoice::GasNorm { family: Family::StudentT, nu } => format!("gas_norm_t{nu}"),
            NormalizerChoice::GlobalNorm => "global_norm".into(),
            NormalizerChoice::LocalNorm => "local_norm".into(),
            NormalizerChoice::MeanScaling => "mean_scaling".into(),
        }
    }
}

/// Settings for the per-γ parameter fits; γ itself comes from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            max_iters: d.max_iters,
            restarts: d.restarts,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub normalizers: Vec<NormalizerChoice>,
    pub forecaster: MlpSpec,
    pub split: SplitSpec,
    /// Strength grid searched for every GAS normalizer.
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub mase_seasonality: usize,
    /// Features to forecast; all of them when absent.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub fit: FitOptions,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.normalizers.is_empty() {
            return Err(Error::Config("at least one normalizer is required".into()));
        }
        let has_gas = self.normalizers.iter().any(|n| matches!(n, NormalizerChoice::GasNorm { .. }));
        if has_gas && self.gammas.is_empty() {
            return Err(Error::Config("GAS normalizers need a non-empty gamma grid".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(Error::Config(format!("gamma {g} outside [0, 1)")));
        }
        if self.split.val_fraction <= 0.0 {
            return Err(Error::Config(
                "experiments need a validation segment for early stopping and gamma selection".into(),
            ));
        }
        if self.mase_seasonality == 0 || self.stride == 0 {
            return Err(Error::Config("mase_seasonality and stride must be positive".into()));
        }
        self.split.validate()?;
        self.forecaster.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Aggregate over seeds for one (normalizer, γ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub normalizer: String,
    /// `None` for normalizers without a strength parameter.
    pub gamma: Option<f64>,
    pub mase_mean: f64,
    pub mase_stderr: f64,
    pub n_seeds: usize,
    pub val_mase_mean: f64,
    /// The γ chosen on validation for this normalizer; always true for
    /// normalizers without a γ.
    pub selected: bool,
    pub seeds: Vec<u64>,
    pub test_mase: Vec<f64>,
    pub val_mase: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub normalizer: String,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
}

impl EvalReport {
    /// The selected row of a normalizer.
    pub fn selected(&self, normalizer: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.normalizer == normalizer && r.selected)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Mean and standard error (sample std over `sqrt(n)`; zero for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    dataset: &'a str,
    normalizer: &'a str,
    gamma: Option<f64>,
    mase_mean: f64,
    mase_stderr: f64,
    n_seeds: usize,
    val_mase_mean: f64,
    selected: bool,
}

/// Writes `<stem>.csv` (one line per cell) and `<stem>.json` (everything,
/// including per-seed values and failures).
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    w.write_record([
        "dataset",
        "normalizer",
        "gamma",
        "mase_mean",
        "mase_stderr",
        "n_seeds",
        "val_mase_mean",
        "selected",
    ])?;
    for r in &report.rows {
        w.serialize(CsvRow {
            dataset: &r.dataset,
            normalizer: &r.normalizer,
            gamma: r.gamma,
            mase_mean: r.mase_mean,
            mase_stderr: r.mase_stderr,
            n_seeds: r.n_seeds,
            val_mase_mean: r.val_mase_mean,
            selected: r.selected,
        })?;
    }
    w.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    Ok((csv_path, json_path))
}

/// A fitted normalizer able to produce the batch of any window of the series.
enum Prepared {
    Gas(GasTracker),
    Global(Vec<(f64, f64)>),
    Local,
    Mean,
}

impl Prepared {
    fn batch(&self, values: ArrayView2<'_, f64>, start: usize, l: usize, h: usize) -> Result<NormalizedBatch> {
        let ctx = values.slice(ndarray::s![start..start + l, ..]);
        match self {
            Prepared::Gas(tr) => tr.batch(start, l, h),
            Prepared::Global(stats) => global_normalize(ctx, h, stats),
            Prepared::Local => local_normalize(ctx, h),
            Prepared::Mean => mean_scale(ctx, h),
        }
    }
}

/// Training pairs plus what is needed to score forecasts of one segment.
struct Design {
    pairs: Vec<Window>,
    batches: Vec<NormalizedBatch>,
    actual: Array2<f64>,
}

/// Window starts whose targets lie inside `[seg_start, seg_end)`.
fn segment_starts(seg_start: usize, seg_end: usize, l: usize, h: usize, stride: usize) -> Vec<usize> {
    let first = seg_start.saturating_sub(l);
    if seg_end < l + h || first + l + h > seg_end {
        return Vec::new();
    }
    (first..=seg_end - l - h).step_by(stride).collect()
}

fn build_design(
    prepared: &Prepared,
    values: ArrayView2<'_, f64>,
    starts: &[usize],
    l: usize,
    h: usize,
    targets: &[usize],
) -> Result<Design> {
    let mut pairs = Vec::with_capacity(starts.len());
    let mut batches = Vec::with_capacity(starts.len());
    let mut actual_rows = Vec::with_capacity(starts.len());
    for &s in starts {
        let batch = prepared.batch(values, s, l, h)?;
        let target = values
            .slice(ndarray::s![s + l..s + l + h, ..])
            .select(Axis(1), targets);
        let residual = residual_targets(target.view(), &batch, targets)?;
        pairs.push(Window {
            start: s,
            context: batch.normalized_context.clone(),
            target: residual,
        });
        batches.push(batch);
        actual_rows.push(target);
    }
    let views: Vec<_> = actual_rows.iter().map(|a| a.view()).collect();
    let actual = if views.is_empty() {
        Array2::zeros((0, targets.len()))
    } else {
        concatenate(Axis(0), &views).expect("equal widths")
    };
    Ok(Design { pairs, batches, actual })
}

fn forecast_segment(model: &TrainedModel, design: &Design, targets: &[usize]) -> Result<Array2<f64>> {
    let residuals = predict_many(model, &design.pairs)?;
    let mut rows = Vec::with_capacity(residuals.len());
    for (r, b) in residuals.iter().zip(&design.batches) {
        rows.push(denormalize_features(r.view(), b, targets)?);
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

struct Cell {
    gamma: Option<f64>,
    seed: u64,
}

struct CellScore {
    val: f64,
    test: f64,
}

struct Context<'a> {
    spec: &'a ExperimentSpec,
    values: ArrayView2<'a, f64>,
    train: ArrayView2<'a, f64>,
    names: Vec<String>,
    targets: Vec<usize>,
    train_starts: Vec<usize>,
    val_starts: Vec<usize>,
    test_starts: Vec<usize>,
}

fn score(ctx: &Context<'_>, prepared: &Prepared, seed: u64) -> Result<CellScore> {
    let (l, h) = (ctx.spec.split.context_length, ctx.spec.split.horizon);
    let train = build_design(prepared, ctx.values, &ctx.train_starts, l, h, &ctx.targets)?;
    let val = build_design(prepared, ctx.values, &ctx.val_starts, l, h, &ctx.targets)?;
    let test = build_design(prepared, ctx.values, &ctx.test_starts, l, h, &ctx.targets)?;
    let spec = MlpSpec {
        seed,
        ..ctx.spec.forecaster.clone()
    };
    let model = train_with_validation(&spec, &train.pairs, &val.pairs)?;
    let train_targets = ctx.train.select(Axis(1), &ctx.targets);
    let target_names: Vec<String> = ctx.targets.iter().map(|&j| ctx.names[j].clone()).collect();
    let m = ctx.spec.mase_seasonality;
    let segment_mase = |d: &Design| -> Result<f64> {
        let f = forecast_segment(&model, d, &ctx.targets)?;
        let per = mase_named(d.actual.view(), f.view(), train_targets.view(), m, &target_names)?;
        Ok(per.iter().sum::<f64>() / per.len() as f64)
    };
    Ok(CellScore {
        val: segment_mase(&val)?,
        test: segment_mase(&test)?,
    })
}

/// Runs every (normalizer, γ, seed) cell and aggregates over seeds.
///
/// GAS parameters are fitted once per (normalizer, γ) on the training
/// segment. Each cell trains the forecaster on training windows with early
/// stopping on validation windows, and reports validation and test MASE of
/// the denormalized forecasts. Failures are recorded per cell and the
/// remaining cells still report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport> {
    spec.validate()?;
    let frame = spec.dataset.load()?;
    let (train_frame, _, _) = frame.split(&spec.split)?;
    let (n_train, n_val, _) = spec.split.segment_lengths(frame.len());
    let names = frame.feature_names().to_vec();
    let targets: Vec<usize> = match &spec.targets {
        None => (0..frame.n_features()).collect(),
        Some(ts) => ts
            .iter()
            .map(|t| {
                frame
                    .feature_index(t)
                    .ok_or_else(|| Error::Config(format!("unknown target feature {t:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let (l, h, stride) = (spec.split.context_length, spec.split.horizon, spec.stride);
    let ctx = Context {
        spec,
        values: frame.values(),
        train: train_frame.values(),
        names,
        targets,
        train_starts: segment_starts(0, n_train, l, h, stride),
        val_starts: segment_starts(n_train, n_train + n_val, l, h, stride),
        test_starts: segment_starts(n_train + n_val, frame.len(), l, h, stride),
    };
    if ctx.val_starts.is_empty() || ctx.test_starts.is_empty() {
        return Err(Error::Config(format!(
            "validation ({n_val} rows) or test segment too short for horizon {h}"
        )));
    }

    let mut report = EvalReport::default();
    // one prepared normalizer per (normalizer, γ)
    let mut prepared: Vec<(usize, Option<f64>, Prepared)> = Vec::new();
    for (i, choice) in spec.normalizers.iter().enumerate() {
        match *choice {
            NormalizerChoice::GasNorm { family, nu } => {
                for &gamma in &spec.gammas {
                    let config = FitConfig {
                        gamma,
                        family,
                        nu,
                        max_iters: spec.fit.max_iters,
                        restarts: spec.fit.restarts,
                        seed: spec.fit.seed,
                        ..FitConfig::default()
                    };
                    let outcome = fit_frame(&train_frame, &config)
                        .and_then(|f| {
                            if let Some((name, e)) = f.errors.iter().next() {
                                return Err(Error::Fit(format!("feature {name}: {e}")));
                            }
                            f.params_for(frame.feature_names())
                        })
                        .and_then(|p| GasTracker::new(frame.values(), &p));
                    match outcome {
                        Ok(tr) => prepared.push((i, Some(gamma), Prepared::Gas(tr))),
                        Err(e) => report.failures.push(CellFailure {
                            normalizer: choice.label(),
                            gamma: Some(gamma),
                            seed: None,
                            message: e.to_string(),
                        }),
                    }
                }
            }
            NormalizerChoice::GlobalNorm => prepared.push((i, None, Prepared::Global(train_frame.moments()))),
            NormalizerChoice::LocalNorm => prepared.push((i, None, Prepared::Local)),
            NormalizerChoice::MeanScaling => prepared.push((i, None, Prepared::Mean)),
        }
    }

    let cells: Vec<(usize, Cell)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(p, (_, g, _))| {
            spec.seeds.iter().map(move |&seed| {
                (
                    p,
                    Cell {
                        gamma: *g,
                        seed,
                    },
                )
            })
        })
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len().max(1));
    let ctx_ref = &ctx;
    let prepared_ref = &prepared;
    let mut scores: Vec<Option<Result<CellScore>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let cells = &cells;
                scope.spawn(move || {
                    (w..cells.len())
                        .step_by(workers)
                        .map(|k| {
                            let (p, cell) = &cells[k];
                            (k, score(ctx_ref, &prepared_ref[*p].2, cell.seed))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, s) in h.join().expect("experiment worker panicked") {
                scores[k] = Some(s);
            }
        }
    });

    let dataset = spec.dataset.label();
    for (p, (i, gamma, _)) in prepared.iter().enumerate() {
        let label = spec.normalizers[*i].label();
        let mut row = ReportRow {
            dataset: dataset.clone(),
            normalizer: label.clone(),
            gamma: *gamma,
            mase_mean: f64::NAN,
            mase_stderr: f64::NAN,
            n_seeds: 0,
            val_mase_mean: f64::NAN,
            selected: gamma.is_none(),
            seeds: Vec::new(),
            test_mase: Vec::new(),
            val_mase: Vec::new(),
        };
        for (k, (cp, cell)) in cells.iter().enumerate() {
            if *cp != p {
                continue;
            }
            match scores[k].take().expect("every cell scored") {
                Ok(s) => {
                    row.seeds.push(cell.seed);
                    row.test_mase.push(s.test);
                    row.val_mase.push(s.val);
                }
                Err(e) => report.failures.push(CellFailure {
                    normalizer: label.clone(),
                    gamma: cell.gamma,
                    seed: Some(cell.seed),
                    message: e.to_string(),
                }),
            }
        }
        if row.seeds.is_empty() {
            continue;
        }
        row.n_seeds = row.seeds.len();
        (row.mase_mean, row.mase_stderr) = mean_stderr(&row.test_mase);
        row.val_mase_mean = mean_stderr(&row.val_mase).0;
        report.rows.push(row);
    }

    // γ selection per GAS normalizer entry, on mean validation MASE
    for (i, choice) in spec.normalizers.iter().enumerate() {
        if !matches!(choice, NormalizerChoice::GasNorm { .. }) {
            continue;
        }
        let label = choice.label();
        let row_idx: Vec<usize> = prepared
            .iter()
            .filter(|(pi, _, _)| *pi == i)
            .filter_map(|(_, g, _)| {
                report
                    .rows
                    .iter()
                    .position(|r| r.normalizer == label && r.gamma == *g && !r.selected)
            })
            .collect();
        let candidates: Vec<(f64, f64)> = row_idx
            .iter()
            .map(|&r| (report.rows[r].gamma.expect("gas rows carry gamma"), report.rows[r].val_mase_mean))
            .collect();
        if let Ok(best) = select_gamma(&candidates) {
            if let Some(&r) = row_idx.iter().find(|&&r| report.rows[r].gamma == Some(best)) {
                report.rows[r].selected = true;
            }
        }
    }
    Ok(report)
}

/// Settings shared by the two Lorenz generalization experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzExperiment {
    pub lorenz: LorenzSpec,
    /// Keep every `subsample`-th integration step.
    pub subsample: usize,
    pub context_length: usize,
    /// How many (subsampled) steps ahead the x coordinate is predicted.
    pub lead: usize,
    pub train_fraction: f64,
    /// Hidden widths of both models; the linear one uses identity activations.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub linear_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Test inputs shifted by this many training standard deviations.
    pub shift_sigmas: f64,
    /// Quadratic trend coefficient per (subsampled) step squared.
    pub trend_coeff: f64,
}

impl Default for LorenzExperiment {
    /// Settings for the shift experiment.
    fn default() -> Self {
        Self {
            lorenz: LorenzSpec {
                steps: 20_000,
                ..LorenzSpec::default()
            },
            subsample: 5,
            context_length: 25,
            lead: 4,
            train_fraction: 0.7,
            hidden: vec![64, 64],
            learning_rate: 0.01,
            linear_learning_rate: 0.005,
            epochs: 150,
            batch_size: 32,
            shift_sigmas: 3.0,
            trend_coeff: 1e-5,
        }
    }
}

impl LorenzExperiment {
    /// Settings for the trend experiment: one-step lead, so that both models
    /// fit the training range well and the comparison isolates extrapolation.
    pub fn trend_default() -> Self {
        Self {
            lead: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub seed: u64,
    pub relu_mse: f64,
    pub linear_mse: f64,
    pub relu_mse_shifted: f64,
    pub linear_mse_shifted: f64,
}

impl ShiftOutcome {
    pub fn ratio(&self) -> f64 {
        self.relu_mse / self.linear_mse
    }

    pub fn shifted_ratio(&self) -> f64 {
        self.relu_mse_shifted / self.linear_mse_shifted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendOutcome {
    pub seed: u64,
    pub relu_mse: f64,
    pub linear_mse: f64,
}

impl LorenzExperiment {
    fn series(&self, seed: u64) -> Result<SeriesFrame> {
        if self.subsample == 0 || self.lead == 0 || self.context_length == 0 {
            return Err(Error::Config("subsample, lead and context_length must be positive".into()));
        }
        let spec = LorenzSpec {
            seed,
            ..self.lorenz.clone()
        };
        let full = gen_lorenz(&spec)?;
        let keep: Vec<usize> = (0..full.len()).step_by(self.subsample).collect();
        SeriesFrame::new(full.values().select(Axis(0), &keep), full.feature_names().to_vec())
    }

    fn spec(&self, seed: u64, relu: bool) -> MlpSpec {
        MlpSpec {
            layer_widths: self.hidden.clone(),
            activation: if relu {
                crate::forecaster::Activation::Relu
            } else {
                crate::forecaster::Activation::Identity
            },
            learning_rate: if relu { self.learning_rate } else { self.linear_learning_rate },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            patience: 10,
        }
    }

    /// Context windows of all three coordinates, standardized by `stats`, and
    /// the standardized x coordinate `lead` steps past each window.
    fn pairs(&self, values: ArrayView2<'_, f64>, stats: &[(f64, f64)]) -> Vec<Window> {
        let (l, lead) = (self.context_length, self.lead);
        if values.nrows() < l + lead {
            return Vec::new();
        }
        let std: Vec<(f64, f64)> = stats.iter().map(|&(m, v)| (m, v.sqrt())).collect();
        (0..=values.nrows() - l - lead)
            .map(|s| {
                let mut ctx = values.slice(ndarray::s![s..s + l, ..]).to_owned();
                for (j, mut col) in ctx.axis_iter_mut(Axis(1)).enumerate() {
                    col.mapv_inplace(|v| (v - std[j].0) / std[j].1);
                }
                let y = (values[[s + l + lead - 1, 0]] - std[0].0) / std[0].1;
                Window {
                    start: s,
                    context: ctx,
                    target: Array2::from_elem((1, 1), y),
                }
            })
            .collect()
    }

    fn mse(&self, model: &TrainedModel, pairs: &[Window], x_var: f64) -> Result<f64> {
        let preds = predict_many(model, pairs)?;
        let n = pairs.len() as f64;
        // back in data units
        Ok(preds
            .iter()
            .zip(pairs)
            .map(|(p, w)| (p[[0, 0]] - w.target[[0, 0]]).powi(2))
            .sum::<f64>()
            / n
            * x_var)
    }

    fn split_point(&self, len: usize) -> Result<usize> {
        let n = ((len as f64) * self.train_fraction).floor() as usize;
        if n < self.context_length + self.lead || len - n < self.context_length + self.lead {
            return Err(Error::Config("series too short for the requested split".into()));
        }
        Ok(n)
    }

    /// Trains a ReLU network and a linear model on the first part of a Lorenz
    /// trajectory and scores both on the rest, as is and with every
    /// coordinate shifted by `shift_sigmas` training standard deviations.
    pub fn shift(&self, seed: u64) -> Result<ShiftOutcome> {
        let frame = self.series(seed)?;
        let n = self.split_point(frame.len())?;
        let train = frame.slice_rows(0, n);
        let test = frame.slice_rows(n, frame.len());
        let stats = train.moments();
        let train_pairs = self.pairs(train.values(), &stats);
        let relu = crate::forecaster::train(&self.spec(seed, true), &train_pairs)?;
        let linear = crate::forecaster::train(&self.spec(seed, false), &train_pairs)?;
        let shift: Vec<f64> = stats.iter().map(|&(_, v)| self.shift_sigmas * v.sqrt()).collect();
        let shifted = affine_map(&test, &shift, &[1.0; 3][..test.n_features()])?;
        let test_pairs = self.pairs(test.values(), &stats);
        let shifted_pairs = self.pairs(shifted.values(), &stats);
        let xv = stats[0].1;
        Ok(ShiftOutcome {
            seed,
            relu_mse: self.mse(&relu, &test_pairs, xv)?,
            linear_mse: self.mse(&linear, &test_pairs, xv)?,
            relu_mse_shifted: self.mse(&relu, &shifted_pairs, xv)?,
            linear_mse_shifted: self.mse(&linear, &shifted_pairs, xv)?,
        })
    }

    /// Adds a quadratic trend to every coordinate, trains both models on the
    /// first part and scores them on the later part, whose values lie beyond
    /// the training range.
    pub fn trend(&self, seed: u64) -> Result<TrendOutcome> {
        let frame = add_quadratic_trend(&self.series(seed)?, self.trend_coeff)?;
        let n = self.split_point(frame.len())?;
        let train = frame.slice_rows(0, n);
        let test = frame.slice_rows(n, frame.len());
        let stats = train.moments();
        let train_pairs = self.pairs(train.values(), &stats);
        let relu = crate::forecaster::train(&self.spec(seed, true), &train_pairs)?;
        let linear = crate::forecaster::train(&self.spec(seed, false), &train_pairs)?;
        let test_pairs = self.pairs(test.values(), &stats);
        let xv = stats[0].1;
        Ok(TrendOutcome {
            seed,
            relu_mse: self.mse(&relu, &test_pairs, xv)?,
            linear_mse: self.mse(&linear, &test_pairs, xv)?,
        })
    }
}

/// Population moments of each column.
pub fn column_moments(values: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    values
        .axis_iter(Axis(1))
        .map(|c| population_moments(c.iter().copied()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mase_hand_case() {
        let v = mase(
            array![[4.0], [5.0]].view(),
            array![[3.0], [3.0]].view(),
            array![[1.0], [2.0], [3.0]].view(),
            1,
        )
        .unwrap();
        assert_eq!(v, vec![1.5]);
    }

    #[test]
    fn mase_perfect_and_parity() {
        let train = array![[0.0, 1.0], [2.0, 0.0], [1.0, 3.0]];
        let actual = array![[5.0, 5.0], [6.0, 6.0]];
        assert_eq!(mase(actual.view(), actual.view(), train.view(), 1).unwrap(), vec![0.0, 0.0]);
        // naive errors: col 0 mean(2, 1) = 1.5; col 1 mean(1, 3) = 2
        let off = array![[6.5, 3.0], [4.5, 8.0]];
        assert_eq!(mase(actual.view(), off.view(), train.view(), 1).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn mase_zero_denominator_names_feature() {
        let names = vec!["flat".to_string()];
        let e = mase_named(
            array![[1.0]].view(),
            array![[1.0]].view(),
            array![[2.0], [2.0]].view(),
            1,
            &names,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Metric { ref feature, .. } if feature == "flat"));
        assert!(mase(array![[1.0]].view(), array![[1.0]].view(), array![[2.0]].view(), 1).is_err());
    }

    #[test]
    fn gamma_selection() {
        assert_eq!(select_gamma(&[(0.0, 1.0), (0.5, 0.8)]).unwrap(), 0.5);
        assert_eq!(select_gamma(&[(0.1, 1.0), (0.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(select_gamma(&[(0.3, 2.0)]).unwrap(), 0.3);
        assert!(select_gamma(&[]).is_err());
    }

    #[test]
    fn stderr_convention() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn segment_windows_keep_targets_inside() {
        let s = segment_starts(10, 20, 4, 2, 1);
        assert_eq!(s.first(), Some(&6));
        assert_eq!(s.last(), Some(&14));
        assert!(segment_starts(0, 5, 4, 2, 1).is_empty());
        assert_eq!(segment_starts(0, 6, 4, 2, 1), vec![0]);
    }

    #[test]
    fn empty_report_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = emit_report(&EvalReport::default(), dir.path(), "r").unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("dataset,normalizer,gamma,mase_mean"));
        assert_eq!(EvalReport::from_json(&fs::read_to_string(json).unwrap()).unwrap(), EvalReport::default());
    }

    #[test]
    fn spec_json_layout() {
        let json = r#"{
            "dataset": {"kind": "ar", "length": 300, "ar_coeffs": [0.5], "noise_std": 1.0,
                        "season_amplitude": 0.0, "season_period": 10, "trend_slope": 0.0, "seed": 1},
            "normalizers": [{"kind": "gas_norm", "family": "gaussian"}, {"kind": "global_norm"}],
            "forecaster": {"layer_widths": [8], "activation": "relu", "learning_rate": 0.01,
                           "epochs": 3, "batch_size": 16, "seed": 0},
            "split": {"train_fraction": 0.6, "val_fraction": 0.2, "context_length": 10, "horizon": 2},
            "gammas": [0.0, 0.5],
            "seeds": [1]
        }"#;
        let spec = ExperimentSpec::from_json(json).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.mase_seasonality, 1);
        assert_eq!(spec.normalizers[0].label(), "gas_norm_gaussian");
    }
}
