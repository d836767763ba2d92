use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gasnorm::datagen::{gen_ar, gen_lorenz, write_with_sidecar, ArSpec, LorenzSpec};
use gasnorm::eval::{emit_report, mase_named, run_experiment, ExperimentSpec, NormalizerChoice};
use gasnorm::fit::{fit_frame, FitConfig, FrameFit};
use gasnorm::forecaster::{predict, train, MlpSpec, TrainedModel};
use gasnorm::normalization::{
    global_normalize, local_normalize, mean_scale, residual_targets, GasTracker, NormalizedBatch,
};
use gasnorm::timeseries::window_starts;
use gasnorm::{Error, Family, GasParams, Result, SeriesFrame, Window};
use ndarray::{s, Array2, ArrayView2};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "gasnorm", version, about = "Adaptive normalization of time series with score-driven filters")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Random seed; overrides the one in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Filter distribution
    #[arg(long, global = true, value_enum)]
    dist: Option<Dist>,
    /// Student's t degrees of freedom
    #[arg(long, global = true)]
    nu: Option<f64>,
    /// Normalization strength in [0, 1)
    #[arg(long, global = true)]
    gamma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Dist {
    Gaussian,
    StudentT,
}

impl From<Dist> for Family {
    fn from(d: Dist) -> Self {
        match d {
            Dist::Gaussian => Family::Gaussian,
            Dist::StudentT => Family::StudentT,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Ar,
    Lorenz,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gas,
    Global,
    Local,
    Mean,
}

#[derive(Args)]
struct Input {
    /// CSV file with one column per feature
    input: PathBuf,
    /// The CSV has no header row
    #[arg(long)]
    no_header: bool,
}

impl Input {
    fn load(&self) -> Result<SeriesFrame> {
        SeriesFrame::load_csv(&self.input, !self.no_header)
    }
}

#[derive(Args)]
struct NormalizerArgs {
    #[arg(long, value_enum, default_value = "gas")]
    method: Method,
    /// Fitted parameters from `fit`; without it GAS parameters are fitted here
    #[arg(long)]
    params: Option<PathBuf>,
    /// Rows used to fit parameters or global moments
    #[arg(long)]
    train_rows: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus a JSON copy of the spec)
    Gen {
        #[arg(value_enum)]
        kind: Generator,
        /// Series length (integration steps for lorenz)
        #[arg(long)]
        length: Option<usize>,
        /// Output file stem
        #[arg(long)]
        name: Option<String>,
    },
    /// Fit filter parameters per feature and write them as JSON
    Fit {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Normalize one context window and write the normalized values and stats
    Normalize {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        normalizer: NormalizerArgs,
        /// Defaults to every row from `--start`
        #[arg(long)]
        context_length: Option<usize>,
        /// First context row; defaults to the last `context_length` rows
        #[arg(long)]
        start: Option<usize>,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, default_value = "normalized")]
        prefix: String,
    },
    /// Train a forecaster on normalized windows (config: forecaster spec)
    Train {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        normalizer: NormalizerArgs,
        #[arg(long)]
        context_length: usize,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Forecast from a normalized context and map it back to data units
    Forecast {
        #[arg(long)]
        model: PathBuf,
        /// `<prefix>_normalized.csv` written by `normalize`
        #[arg(long)]
        context: PathBuf,
        /// `<prefix>_horizon_stats.csv` written by `normalize`
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value = "forecast")]
        name: String,
    },
    /// MASE of a forecast file against an actual file
    Eval {
        #[arg(long)]
        actual: PathBuf,
        #[arg(long)]
        forecast: PathBuf,
        /// Training data for the naive-forecast scale
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 1)]
        seasonality: usize,
    },
    /// Run an experiment grid and write the report
    Experiment {
        /// Experiment spec; `--config` works too
        spec: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        stem: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    fs::create_dir_all(&g.output_dir)?;
    match &cli.command {
        Command::Gen { kind, length, name } => gen(g, *kind, *length, name.as_deref()),
        Command::Fit { input, max_iters, restarts } => {
            let frame = input.load()?;
            let mut cfg = fit_config(g)?;
            if let Some(m) = max_iters {
                cfg.max_iters = *m;
            }
            if let Some(r) = restarts {
                cfg.restarts = *r;
            }
            cfg.validate()?;
            let fitted = fit_frame(&frame, &cfg)?;
            let path = g.output_dir.join("fit.json");
            fs::write(&path, fitted.to_json()?)?;
            println!("{}", path.display());
            match fitted.errors.iter().next() {
                Some((name, e)) => Err(Error::Fit(format!("feature {name}: {e}"))),
                None => Ok(()),
            }
        }
        Command::Normalize {
            input,
            normalizer,
            context_length,
            start,
            horizon,
            prefix,
        } => {
            let frame = input.load()?;
            let n = frame.len();
            let (start, l) = match (*start, *context_length) {
                (Some(s), Some(l)) => (s, l),
                (Some(s), None) => (s, n.saturating_sub(s)),
                (None, Some(l)) => (n.checked_sub(l).ok_or_else(|| too_long(l, n))?, l),
                (None, None) => (0, n),
            };
            if l == 0 || start + l > n {
                return Err(too_long(start + l, n));
            }
            let prepared = prepare(g, &frame, normalizer, start + l)?;
            let batch = prepared.batch(frame.values(), start, l, *horizon)?;
            let written = batch.write(&g.output_dir, prefix, frame.feature_names(), prepared.describe())?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Train {
            input,
            normalizer,
            context_length,
            horizon,
            stride,
        } => {
            let frame = input.load()?;
            let rows = normalizer.train_rows.unwrap_or(frame.len()).min(frame.len());
            let prepared = prepare(g, &frame, normalizer, rows)?;
            let all: Vec<usize> = (0..frame.n_features()).collect();
            let values = frame.values();
            let mut pairs = Vec::new();
            for start in window_starts(rows, *context_length, *horizon, *stride)? {
                let batch = prepared.batch(values, start, *context_length, *horizon)?;
                let target = values.slice(s![start + context_length..start + context_length + horizon, ..]);
                pairs.push(Window {
                    start,
                    target: residual_targets(target, &batch, &all)?,
                    context: batch.normalized_context,
                });
            }
            let mut spec: MlpSpec = load_config(g)?.unwrap_or_default();
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            let model = train(&spec, &pairs)?;
            let path = g.output_dir.join("model.json");
            fs::write(&path, model.to_json()?)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Forecast {
            model,
            context,
            stats,
            name,
        } => {
            let model = TrainedModel::from_json(&fs::read_to_string(model)?)?;
            let ctx = SeriesFrame::load_csv(context, true)?;
            let stats = SeriesFrame::load_csv(stats, true)?;
            let residual = predict(&model, ctx.values())?;
            let (names, out) = denormalize_with(residual.view(), &stats)?;
            let path = g.output_dir.join(format!("{name}.csv"));
            SeriesFrame::new(out, names)?.write_csv(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval {
            actual,
            forecast,
            train,
            seasonality,
        } => {
            let actual = SeriesFrame::load_csv(actual, true)?;
            let forecast = SeriesFrame::load_csv(forecast, true)?;
            let train = SeriesFrame::load_csv(train, true)?;
            let scores = mase_named(
                actual.values(),
                forecast.values(),
                train.values(),
                *seasonality,
                actual.feature_names(),
            )?;
            let table = Array2::from_shape_vec((1, scores.len()), scores).expect("one row");
            let path = g.output_dir.join("mase.csv");
            let out = SeriesFrame::new(table, actual.feature_names().to_vec())?;
            out.write_csv(&path)?;
            out.write_csv_to(std::io::stdout().lock())?;
            Ok(())
        }
        Command::Experiment { spec, stem } => {
            let path = spec
                .as_ref()
                .or(g.config.as_ref())
                .ok_or_else(|| Error::Argument("experiment needs a spec file".into()))?;
            let mut spec = ExperimentSpec::from_json(&fs::read_to_string(path)?)?;
            if let Some(seed) = g.seed {
                spec.seeds = vec![seed];
            }
            if let Some(gamma) = g.gamma {
                spec.gammas = vec![gamma];
            }
            for choice in &mut spec.normalizers {
                if let NormalizerChoice::GasNorm { family, nu } = choice {
                    if let Some(d) = g.dist {
                        *family = d.into();
                    }
                    if let Some(v) = g.nu {
                        *nu = v;
                    }
                }
            }
            let report = run_experiment(&spec)?;
            let (csv, json) = emit_report(&report, &g.output_dir, stem)?;
            for f in &report.failures {
                log::warn!("{} gamma {:?} seed {:?}: {}", f.normalizer, f.gamma, f.seed, f.message);
            }
            println!("{}\n{}", csv.display(), json.display());
            if report.rows.is_empty() {
                return Err(Error::Numerical {
                    step: 0,
                    message: format!("all {} experiment cells failed", report.failures.len()),
                });
            }
            Ok(())
        }
    }
}

fn too_long(needed: usize, rows: usize) -> Error {
    Error::Argument(format!("window needs {needed} rows, input has {rows}"))
}

fn load_config<T: DeserializeOwned>(g: &Global) -> Result<Option<T>> {
    g.config
        .as_ref()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .transpose()
}

fn fit_config(g: &Global) -> Result<FitConfig> {
    let mut cfg: FitConfig = load_config(g)?.unwrap_or_default();
    if let Some(d) = g.dist {
        cfg.family = d.into();
    }
    if let Some(nu) = g.nu {
        cfg.nu = nu;
    }
    if let Some(gamma) = g.gamma {
        cfg.gamma = gamma;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen(g: &Global, kind: Generator, length: Option<usize>, name: Option<&str>) -> Result<()> {
    let stem = name.unwrap_or(match kind {
        Generator::Ar => "ar",
        Generator::Lorenz => "lorenz",
    });
    let path = g.output_dir.join(format!("{stem}.csv"));
    match kind {
        Generator::Ar => {
            let mut spec: ArSpec = load_config(g)?.unwrap_or_default();
            spec.length = length.unwrap_or(spec.length);
            spec.seed = g.seed.unwrap_or(spec.seed);
            write_with_sidecar(&gen_ar(&spec)?, &spec, &path)?;
        }
        Generator::Lorenz => {
            let mut spec: LorenzSpec = load_config(g)?.unwrap_or_default();
            spec.steps = length.unwrap_or(spec.steps);
            spec.seed = g.seed.unwrap_or(spec.seed);
            write_with_sidecar(&gen_lorenz(&spec)?, &spec, &path)?;
        }
    }
    println!("{}", path.display());
    Ok(())
}

enum Prepared {
    Gas(GasTracker, Vec<GasParams>),
    Global(Vec<(f64, f64)>),
    Local,
    Mean,
}

impl Prepared {
    fn batch(&self, values: ArrayView2<'_, f64>, start: usize, l: usize, h: usize) -> Result<NormalizedBatch> {
        let ctx = values.slice(s![start..start + l, ..]);
        match self {
            Prepared::Gas(tr, _) => tr.batch(start, l, h),
            Prepared::Global(stats) => global_normalize(ctx, h, stats),
            Prepared::Local => local_normalize(ctx, h),
            Prepared::Mean => mean_scale(ctx, h),
        }
    }

    fn describe(&self) -> serde_json::Value {
        match self {
            Prepared::Gas(_, p) => serde_json::json!({ "gas_params": p }),
            Prepared::Global(m) => serde_json::json!({ "global_stats": m }),
            _ => serde_json::Value::Null,
        }
    }
}

/// Fits or loads whatever the normalizer needs from the first `rows` rows.
/// The GAS filter runs over the same rows so windows inside them see a
/// continuous filter state.
fn prepare(g: &Global, frame: &SeriesFrame, args: &NormalizerArgs, rows: usize) -> Result<Prepared> {
    let train_rows = args.train_rows.unwrap_or(rows).min(frame.len());
    if train_rows == 0 {
        return Err(Error::Argument("no training rows".into()));
    }
    let train = frame.slice_rows(0, train_rows);
    Ok(match args.method {
        Method::Gas => {
            let params = match &args.params {
                Some(p) => FrameFit::from_json(&fs::read_to_string(p)?)?.params_for(frame.feature_names())?,
                None => {
                    let cfg = fit_config(g)?;
                    cfg.validate()?;
                    let fitted = fit_frame(&train, &cfg)?;
                    if let Some((name, e)) = fitted.errors.iter().next() {
                        return Err(Error::Fit(format!("feature {name}: {e}")));
                    }
                    fitted.params_for(frame.feature_names())?
                }
            };
            let upto = rows.max(train_rows).min(frame.len());
            let tracker = GasTracker::new(frame.values().slice(s![..upto, ..]), &params)?;
            Prepared::Gas(tracker, params)
        }
        Method::Global => Prepared::Global(train.moments()),
        Method::Local => Prepared::Local,
        Method::Mean => Prepared::Mean,
    })
}

/// Applies `mu + scale · e` with stats in `<name>_mu,<name>_scale` pairs.
fn denormalize_with(residual: ArrayView2<'_, f64>, stats: &SeriesFrame) -> Result<(Vec<String>, Array2<f64>)> {
    let cols = stats.feature_names();
    if cols.len() != 2 * residual.ncols() || stats.len() != residual.nrows() {
        return Err(Error::Argument(format!(
            "stats are {}x{}, forecast needs {}x{}",
            stats.len(),
            cols.len(),
            residual.nrows(),
            2 * residual.ncols()
        )));
    }
    let mut names = Vec::with_capacity(residual.ncols());
    for pair in cols.chunks(2) {
        let base = pair[0]
            .strip_suffix("_mu")
            .filter(|b| pair[1].strip_suffix("_scale") == Some(*b))
            .ok_or_else(|| Error::Structure(format!("expected <name>_mu,<name>_scale, got {},{}", pair[0], pair[1])))?;
        names.push(base.to_string());
    }
    let v = stats.values();
    let mut out = Array2::zeros(residual.raw_dim());
    for j in 0..residual.ncols() {
        for t in 0..residual.nrows() {
            out[[t, j]] = v[[t, 2 * j]] + v[[t, 2 * j + 1]] * residual[[t, j]];
        }
    }
    Ok((names, out))
}
