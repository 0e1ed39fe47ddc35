//! Command-line surface: simulate / fit / predict / evaluate / gradcheck.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cox::{mean_remaining_life, survival_curve, survival_window_prob, MgfForm};
use crate::datagen::{gen_dataset, GenConfig};
use crate::error::{Error, Result};
use crate::evaluation::{run_experiment, ExperimentGrid, RocPooling};
use crate::inference::{fit, grad_check, initial_guess, FitConfig, GradientMode, SignalPredictor};
use crate::io::{
    atomic_write, ingest_cmapss, ingest_longitudinal_csv, load_model, save_model,
    write_dataset_csvs, Dataset,
};
use crate::kernels::default_pseudo_inputs;

#[derive(Parser)]
#[command(
    name = "mgcp-cox",
    about = "Joint modeling of longitudinal signals and time-to-event data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write the longitudinal/survival CSVs.
    Simulate(SimulateArgs),
    /// Fit the joint model to a dataset and save it as JSON.
    Fit(FitArgs),
    /// Predict windowed failure probability, survival curve, and remaining
    /// life for one unit of a fitted model.
    Predict(PredictArgs),
    /// Run the replication sweep and write report CSVs.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a synthetic
    /// instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GradientArg {
    /// Central finite differences.
    Fd,
    /// Closed-form reverse-mode gradient.
    Analytic,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Fd => GradientMode::CentralDifference,
            GradientArg::Analytic => GradientMode::Analytic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MgfArg {
    /// exp(beta mu + beta^2 sigma^2 / 2).
    Standard,
    /// exp(beta (mu + sigma^2 / 2)).
    HalfVariance,
}

impl From<MgfArg> for MgfForm {
    fn from(m: MgfArg) -> Self {
        match m {
            MgfArg::Standard => MgfForm::Standard,
            MgfArg::HalfVariance => MgfForm::HalfVariance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    Averaged,
}

impl From<PoolingArg> for RocPooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => RocPooling::Pooled,
            PoolingArg::Averaged => RocPooling::Averaged,
        }
    }
}

#[derive(Args, Clone)]
struct GenArgs {
    /// Number of units to generate.
    #[arg(long, default_value_t = 20)]
    units: usize,
    /// Fraction of units to right-censor.
    #[arg(long, default_value_t = 0.05)]
    censor_frac: f64,
    /// Observation noise variance.
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    /// Weibull baseline scale.
    #[arg(long, default_value_t = 0.001)]
    weibull_scale: f64,
    /// Weibull baseline shape.
    #[arg(long, default_value_t = 1.05)]
    weibull_shape: f64,
    /// True fixed-covariate coefficient.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// True signal coefficient in the hazard.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Lower end of the quadratic acceleration range.
    #[arg(long, default_value_t = 0.003)]
    accel_min: f64,
    /// Upper end of the quadratic acceleration range.
    #[arg(long, default_value_t = 0.03)]
    accel_max: f64,
    /// Draw the acceleration once per dataset instead of per unit.
    #[arg(long)]
    shared_accel: bool,
    /// Event-time sampling horizon in months.
    #[arg(long, default_value_t = 600.0)]
    horizon: f64,
    /// Inverse-CDF sampling grid resolution.
    #[arg(long, default_value_t = 10_000)]
    grid_points: usize,
}

impl GenArgs {
    fn to_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            num_units: self.units,
            censor_frac: self.censor_frac,
            noise_var: self.noise_var,
            weibull_scale: self.weibull_scale,
            weibull_shape: self.weibull_shape,
            covariate_coef: self.gamma,
            signal_coef: self.beta,
            accel_range: (self.accel_min, self.accel_max),
            accel_per_unit: !self.shared_accel,
            horizon: self.horizon,
            grid_points: self.grid_points,
            seed,
            ..GenConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct FitKnobs {
    /// Number of pseudo-inputs.
    #[arg(long, default_value_t = 10)]
    pseudo_inputs: usize,
    /// Number of latent functions.
    #[arg(long, default_value_t = 1)]
    latent: usize,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    rel_tol: f64,
    /// Quadrature nodes per unit-likelihood integral.
    #[arg(long, default_value_t = 32)]
    likelihood_nodes: usize,
    /// Quadrature nodes for remaining-life integration.
    #[arg(long, default_value_t = 64)]
    mrl_nodes: usize,
    #[arg(long, value_enum, default_value_t = GradientArg::Fd)]
    gradient: GradientArg,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 1e-6)]
    jitter: f64,
    /// Include pseudo-input locations in the optimized vector.
    #[arg(long)]
    optimize_pseudo_inputs: bool,
    #[arg(long, value_enum, default_value_t = MgfArg::Standard)]
    mgf: MgfArg,
    /// Step for central finite differences.
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Fit without adding the held-out unit to the training data (only
    /// relevant for evaluate).
    #[arg(long)]
    exclude_test_unit: bool,
}

impl FitKnobs {
    fn to_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            num_pseudo_inputs: self.pseudo_inputs,
            num_latent: self.latent,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            likelihood_nodes: self.likelihood_nodes,
            remaining_life_nodes: self.mrl_nodes,
            seed,
            gradient: self.gradient.into(),
            include_test_unit: !self.exclude_test_unit,
            restarts: self.restarts,
            jitter: self.jitter,
            optimize_pseudo_inputs: self.optimize_pseudo_inputs,
            mgf_form: self.mgf.into(),
            fd_step: self.fd_step,
        }
    }
}

#[derive(Args, Clone)]
struct DataSource {
    /// Longitudinal CSV (unit_id,time,value).
    #[arg(long, requires = "survival", conflicts_with = "cmapss")]
    longitudinal: Option<PathBuf>,
    /// Survival CSV (unit_id,event_time,event_indicator,w0,...).
    #[arg(long, requires = "longitudinal")]
    survival: Option<PathBuf>,
    /// C-MAPSS-layout whitespace-delimited file.
    #[arg(long)]
    cmapss: Option<PathBuf>,
    /// Sensor channel for C-MAPSS ingestion.
    #[arg(long, default_value = "s2")]
    sensor: String,
    /// Keep only the first N units of a C-MAPSS file.
    #[arg(long)]
    unit_limit: Option<usize>,
}

impl DataSource {
    fn load(&self) -> Result<Dataset> {
        match (&self.longitudinal, &self.survival, &self.cmapss) {
            (Some(long), Some(surv), None) => ingest_longitudinal_csv(long, surv),
            (None, None, Some(path)) => ingest_cmapss(path, &self.sensor, self.unit_limit),
            _ => Err(Error::InvalidInput(
                "provide either --longitudinal with --survival, or --cmapss".into(),
            )),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the longitudinal CSV.
    #[arg(long)]
    out_longitudinal: PathBuf,
    /// Output path for the survival CSV.
    #[arg(long)]
    out_survival: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    knobs: FitKnobs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip pooled z-scoring of the signal channel.
    #[arg(long)]
    no_standardize: bool,
    /// Output path for the model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Unit id to predict for.
    #[arg(long)]
    unit: usize,
    /// Prediction time (observations after it are ignored by convention of
    /// the fitted model; pass the same dataset the model was fitted to).
    #[arg(long)]
    t_star: f64,
    /// Window length for the failure probability.
    #[arg(long)]
    dt: f64,
    /// Survival-curve horizon; defaults to three times the largest fitted
    /// lifetime.
    #[arg(long)]
    curve_horizon: Option<f64>,
    /// Points on the survival-curve grid.
    #[arg(long, default_value_t = 101)]
    curve_points: usize,
    /// Remaining-life integration cap; defaults to t* plus three times the
    /// largest fitted lifetime.
    #[arg(long)]
    mrl_cap: Option<f64>,
    /// Output path for the survival-curve CSV.
    #[arg(long)]
    out_curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Comma-separated observation percentiles.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5])]
    alphas: Vec<f64>,
    /// Comma-separated prediction windows (months).
    #[arg(long, value_delimiter = ',', default_values_t = vec![12.0, 15.0, 20.0])]
    windows: Vec<f64>,
    /// Number of replications.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    knobs: FitKnobs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
    pooling: PoolingArg,
    /// Skip pooled z-scoring before each fit.
    #[arg(long)]
    no_standardize: bool,
    /// Directory for report.csv, auc_summary.csv and the ROC point files.
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Units in the synthetic check instance.
    #[arg(long, default_value_t = 3)]
    units: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[command(flatten)]
    knobs: FitKnobs,
}

/// Entry point shared by the binary and the tests; returns the process exit
/// code (0 success, 1 validation error, 2 numerical failure).
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.gen.to_config(args.seed);
            let units = gen_dataset(&cfg)?;
            write_dataset_csvs(&units, &args.out_longitudinal, &args.out_survival)?;
            let censored = units.iter().filter(|u| !u.event_observed).count();
            println!(
                "wrote {} units ({censored} censored) to {} and {}",
                units.len(),
                args.out_longitudinal.display(),
                args.out_survival.display()
            );
            Ok(())
        }
        Command::Fit(args) => {
            let mut ds = args.source.load()?;
            if !args.no_standardize && ds.standardization.is_none() {
                ds.standardize();
            }
            let cfg = args.knobs.to_config(args.seed);
            let mut model = fit(&ds.units, &cfg)?;
            model.data_summary.standardization =
                ds.standardization.map(|s| (s.mean, s.sd));
            save_model(&model, &args.out)?;
            println!(
                "fitted {} units, objective {:.6}, converged: {}, saved to {}",
                ds.units.len(),
                model.elbo_trace.last().copied().unwrap_or(f64::NAN),
                model.converged,
                args.out.display()
            );
            Ok(())
        }
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => {
            let grid = ExperimentGrid {
                alphas: args.alphas.clone(),
                windows: args.windows.clone(),
                replications: args.reps,
                gen: args.gen.to_config(args.seed),
                fit: args.knobs.to_config(args.seed),
                pooling: args.pooling.into(),
                standardize: !args.no_standardize,
            };
            let report = run_experiment(&grid, Some(&args.outdir))?;
            for c in &report.cells {
                println!(
                    "{} alpha={} window={} auc={:.4} (se {:.4}, {}+/{}-)",
                    c.model.as_str(),
                    c.alpha,
                    c.window,
                    c.auc,
                    c.auc_se,
                    c.n_pos,
                    c.n_neg
                );
            }
            if !report.failures.is_empty() {
                eprintln!("{} replication(s) failed and were skipped", report.failures.len());
            }
            println!("reports written to {}", args.outdir.display());
            Ok(())
        }
        Command::Gradcheck(args) => {
            let gen_cfg = GenConfig {
                num_units: args.units,
                censor_frac: 0.0,
                seed: args.seed,
                ..GenConfig::default()
            };
            let mut units = gen_dataset(&gen_cfg)?;
            crate::evaluation::standardize_in_place(&mut units);
            let mut cfg = args.knobs.to_config(args.seed);
            cfg.fd_step = args.step;
            let mut params = initial_guess(&units, &cfg)?;
            // Move off the neutral start so every gradient path is active.
            params.kernel.kernel_scales.apply(|a| *a += 0.4);
            params.cox.signal_coef = 0.2;
            params.cox.baseline_slope = 0.05;
            if !params.cox.covariate_coefs.is_empty() {
                params.cox.covariate_coefs[0] = 0.1;
            }
            let times: Vec<Vec<f64>> = units.iter().map(|u| u.times.clone()).collect();
            let pseudo = default_pseudo_inputs(&times, cfg.num_pseudo_inputs);
            let max_err = grad_check(&params, &units, &pseudo, &cfg)?;
            println!("max relative gradient discrepancy: {max_err:.3e}");
            Ok(())
        }
    }
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let mut ds = args.source.load()?;

    // Reapply the exact standardization the model was trained with.
    match (model.data_summary.standardization, &ds.standardization) {
        (Some((mean, sd)), None) => {
            for u in ds.units.iter_mut() {
                for v in u.values.iter_mut() {
                    *v = (*v - mean) / sd;
                }
            }
        }
        (Some((mean, sd)), Some(applied)) => {
            // C-MAPSS ingestion standardizes on load; require consistency.
            if (applied.mean - mean).abs() > 1e-9 || (applied.sd - sd).abs() > 1e-9 {
                return Err(Error::InvalidInput(
                    "dataset standardization differs from the one recorded in the model".into(),
                ));
            }
        }
        (None, _) => {}
    }

    // Align unit order with the fit-time order.
    let mut ordered = Vec::with_capacity(model.data_summary.unit_ids.len());
    for &id in &model.data_summary.unit_ids {
        let unit = ds
            .units
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("dataset is missing unit {id}")))?;
        ordered.push(unit.clone());
    }
    let test_pos = model
        .data_summary
        .unit_ids
        .iter()
        .position(|&id| id == args.unit)
        .ok_or_else(|| Error::InvalidInput(format!("model was not fitted with unit {}", args.unit)))?;

    let predictor = SignalPredictor::new(&model, &ordered, test_pos)?;
    let signal_mean = |t: f64| predictor.mean(t);
    let quad = FitConfig::default().quad();
    let covariates = ordered[test_pos].covariates.clone();

    let max_life = ordered.iter().map(|u| u.event_time).fold(0.0f64, f64::max);
    let window_prob = survival_window_prob(
        args.t_star,
        args.dt,
        &covariates,
        &signal_mean,
        &model.baseline,
        &model.params.cox,
        &quad,
    )?;
    let cap = args.mrl_cap.unwrap_or(args.t_star + 3.0 * max_life);
    let mrl = mean_remaining_life(
        args.t_star,
        &covariates,
        &signal_mean,
        &model.baseline,
        &model.params.cox,
        &quad,
        cap,
    )?;
    println!("window_probability,{window_prob}");
    println!("mean_remaining_life,{mrl}");

    if let Some(out) = &args.out_curve {
        let horizon = args.curve_horizon.unwrap_or(3.0 * max_life);
        let curve = survival_curve(
            args.t_star,
            horizon,
            args.curve_points,
            &covariates,
            &signal_mean,
            &model.baseline,
            &model.params.cox,
            &quad,
        )?;
        let mut body = String::from("time,survival\n");
        for (t, s) in curve.times.iter().zip(&curve.survival) {
            body.push_str(&format!("{t},{s}\n"));
        }
        atomic_write(out, body.as_bytes())?;
        println!("curve,{}", out.display());
    }
    Ok(())
}
