//! Cox survival layer: hazard and survival functions, the expected log
//! likelihood under the signal posterior, baseline-hazard estimation, and
//! event-probability / remaining-life prediction.

use crate::datagen::UnitRecord;
use crate::error::{Error, Result};
use crate::quadrature::QuadSpec;
use crate::spline::SmoothingSpline;
use serde::{Deserialize, Serialize};

/// Which exponent the expected-hazard factor uses when integrating the
/// exponential link against a normal signal posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MgfForm {
    /// `exp(beta mu + beta^2 sigma^2 / 2)` — the normal moment generating
    /// function, used by default.
    #[default]
    Standard,
    /// `exp(beta (mu + sigma^2 / 2))` — compatibility form.
    HalfVariance,
}

impl MgfForm {
    /// Exponent of the expected hazard factor for given posterior moments.
    pub(crate) fn exponent(self, beta: f64, mean: f64, var: f64) -> f64 {
        match self {
            MgfForm::Standard => beta * mean + 0.5 * beta * beta * var,
            MgfForm::HalfVariance => beta * (mean + 0.5 * var),
        }
    }

    /// Partial derivatives of the exponent with respect to (beta, mean, var).
    pub(crate) fn exponent_partials(self, beta: f64, mean: f64, var: f64) -> (f64, f64, f64) {
        match self {
            MgfForm::Standard => (mean + beta * var, beta, 0.5 * beta * beta),
            MgfForm::HalfVariance => (mean + 0.5 * var, beta, 0.5 * beta),
        }
    }
}

/// Parameters of the Cox layer with an exponential baseline hazard.
#[derive(Debug, Clone)]
pub struct CoxParams {
    /// Coefficients of the time-fixed covariates.
    pub covariate_coefs: Vec<f64>,
    /// Scaling of the longitudinal signal in the hazard.
    pub signal_coef: f64,
    /// Log level of the baseline hazard at the first event time.
    pub baseline_log_level: f64,
    /// Non-negative growth rate of the baseline hazard.
    pub baseline_slope: f64,
    /// Earliest event time in the training data; the baseline hazard is zero
    /// before it.
    pub first_event_time: f64,
}

impl CoxParams {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_slope < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "baseline slope must be non-negative, got {}",
                self.baseline_slope
            )));
        }
        Ok(())
    }

    pub(crate) fn linear_predictor(&self, covariates: &[f64]) -> f64 {
        self.covariate_coefs
            .iter()
            .zip(covariates)
            .map(|(g, w)| g * w)
            .sum()
    }
}

/// Estimated cumulative baseline hazard on a discrete grid with a smoothing
/// spline through it; the clipped spline derivative is the predicted hazard.
#[derive(Debug, Clone)]
pub struct BaselineHazardCurve {
    pub grid: Vec<f64>,
    pub cum_hazard: Vec<f64>,
    spline: SmoothingSpline,
}

impl BaselineHazardCurve {
    pub fn from_parts(grid: Vec<f64>, cum_hazard: Vec<f64>, spline: SmoothingSpline) -> Self {
        BaselineHazardCurve { grid, cum_hazard, spline }
    }

    pub fn spline(&self) -> &SmoothingSpline {
        &self.spline
    }

    /// Predicted baseline hazard: spline derivative clipped at zero.
    pub fn hazard_at(&self, t: f64) -> f64 {
        self.spline.derivative(t).max(0.0)
    }
}

/// Tabulated conditional survival over a prediction horizon.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub t_star: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

/// Exponential baseline hazard; zero before the first event time.
pub fn baseline_hazard(t: f64, cp: &CoxParams) -> f64 {
    if t < cp.first_event_time {
        0.0
    } else {
        (cp.baseline_log_level + cp.baseline_slope * (t - cp.first_event_time)).exp()
    }
}

/// Closed-form expected contribution of an observed event: the unit's hazard
/// log evaluated with the posterior mean of its signal at the event time.
pub fn expected_event_term(unit: &UnitRecord, signal_mean_at_event: f64, cp: &CoxParams) -> Result<f64> {
    if !unit.event_observed {
        return Ok(0.0);
    }
    let h0 = baseline_hazard(unit.event_time, cp);
    if h0 <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "unit {} fails at {} where the baseline hazard is zero",
            unit.id, unit.event_time
        )));
    }
    Ok(h0.ln() + cp.linear_predictor(&unit.covariates) + cp.signal_coef * signal_mean_at_event)
}

/// Expected cumulative-hazard contribution of one unit: minus the integral of
/// the baseline hazard times the covariate link times the expected signal
/// link, taken under the Gaussian signal posterior.
pub fn expected_cumhaz_term(
    unit: &UnitRecord,
    signal_mean: &dyn Fn(f64) -> f64,
    signal_var: &dyn Fn(f64) -> f64,
    cp: &CoxParams,
    quad: &QuadSpec,
    mgf: MgfForm,
) -> Result<f64> {
    if unit.event_time <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "unit {} has non-positive follow-up time {}",
            unit.id, unit.event_time
        )));
    }
    // The baseline hazard vanishes below the first event time.
    let lo = cp.first_event_time.max(0.0);
    let hi = unit.event_time;
    if hi <= lo {
        return Ok(0.0);
    }
    let cov_link = cp.linear_predictor(&unit.covariates).exp();
    let integral = quad.likelihood.integrate(lo, hi, |u| {
        let mu = signal_mean(u);
        let var = signal_var(u).max(0.0);
        baseline_hazard(u, cp) * mgf.exponent(cp.signal_coef, mu, var).exp()
    });
    Ok(-cov_link * integral)
}

/// Expected Cox log likelihood: sum of event and cumulative-hazard terms over
/// all units, with the signal posterior supplied through per-unit accessors.
pub fn expected_cox_loglik(
    units: &[UnitRecord],
    signal_mean: &dyn Fn(usize, f64) -> f64,
    signal_var: &dyn Fn(usize, f64) -> f64,
    cp: &CoxParams,
    quad: &QuadSpec,
    mgf: MgfForm,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, unit) in units.iter().enumerate() {
        total += expected_event_term(unit, signal_mean(i, unit.event_time), cp)?;
        total += expected_cumhaz_term(
            unit,
            &|u| signal_mean(i, u),
            &|u| signal_var(i, u),
            cp,
            quad,
            mgf,
        )?;
    }
    Ok(total)
}

/// Closed-form cumulative baseline hazard of the exponential form on
/// `[first_event_time, t]`.
pub fn baseline_cum_hazard(t: f64, cp: &CoxParams) -> f64 {
    let t0 = cp.first_event_time;
    if t <= t0 {
        return 0.0;
    }
    let level = cp.baseline_log_level.exp();
    if cp.baseline_slope.abs() < 1e-12 {
        level * (t - t0)
    } else {
        level / cp.baseline_slope * ((cp.baseline_slope * (t - t0)).exp() - 1.0)
    }
}

/// Accumulate the fitted baseline hazard over the event-time grid and smooth
/// the resulting cumulative hazard with a GCV spline.
///
/// The grid joins all but the largest follow-up time with the integer months
/// up to the largest one. Each hazard value is weighted by its local grid
/// spacing, so denser grid regions (clustered event times) do not inflate
/// the accumulated hazard; on a pure integer grid the weights are all one
/// and the accumulation is the plain sum over the grid.
pub fn fit_baseline_curve(event_times: &[f64], cp: &CoxParams) -> Result<BaselineHazardCurve> {
    if event_times.len() < 2 {
        return Err(Error::InvalidInput(
            "baseline curve needs at least 2 event times".into(),
        ));
    }
    let mut sorted = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let largest = *sorted.last().unwrap();

    let mut grid: Vec<f64> = sorted[..sorted.len() - 1].to_vec();
    let mut m = 0.0;
    while m <= largest {
        grid.push(m);
        m += 1.0;
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| a == b);

    let mut cum = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for (j, &t) in grid.iter().enumerate() {
        let spacing = if j == 0 { 1.0 } else { grid[j] - grid[j - 1] };
        acc += baseline_hazard(t, cp) * spacing;
        cum.push(acc);
    }
    let spline = SmoothingSpline::fit_gcv(&grid, &cum)?;
    Ok(BaselineHazardCurve { grid, cum_hazard: cum, spline })
}

/// Integrated predicted hazard of the testing unit over `[a, b]`.
fn predicted_cum_hazard(
    a: f64,
    b: f64,
    covariates: &[f64],
    signal_mean: &dyn Fn(f64) -> f64,
    signal_var: Option<&dyn Fn(f64) -> f64>,
    bh: &BaselineHazardCurve,
    cp: &CoxParams,
    quad: &QuadSpec,
    mgf: MgfForm,
) -> f64 {
    let cov_link = cp.linear_predictor(covariates).exp();
    cov_link
        * quad.likelihood.integrate(a, b, |u| {
            let exponent = match signal_var {
                Some(var) => mgf.exponent(cp.signal_coef, signal_mean(u), var(u).max(0.0)),
                None => cp.signal_coef * signal_mean(u),
            };
            bh.hazard_at(u) * exponent.exp()
        })
}

/// Probability that a unit surviving to `t_star` fails within `window`.
pub fn survival_window_prob(
    t_star: f64,
    window: f64,
    covariates: &[f64],
    signal_mean: &dyn Fn(f64) -> f64,
    bh: &BaselineHazardCurve,
    cp: &CoxParams,
    quad: &QuadSpec,
) -> Result<f64> {
    survival_window_prob_with(t_star, window, covariates, signal_mean, None, bh, cp, quad)
}

/// Same as [`survival_window_prob`] with an optional posterior-variance
/// correction of the hazard link.
#[allow(clippy::too_many_arguments)]
pub fn survival_window_prob_with(
    t_star: f64,
    window: f64,
    covariates: &[f64],
    signal_mean: &dyn Fn(f64) -> f64,
    signal_var: Option<&dyn Fn(f64) -> f64>,
    bh: &BaselineHazardCurve,
    cp: &CoxParams,
    quad: &QuadSpec,
) -> Result<f64> {
    if window < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "prediction window must be non-negative, got {window}"
        )));
    }
    let cum = predicted_cum_hazard(
        t_star,
        t_star + window,
        covariates,
        signal_mean,
        signal_var,
        bh,
        cp,
        quad,
        MgfForm::Standard,
    );
    Ok(1.0 - (-cum).exp())
}

/// Conditional survival tabulated on an evenly spaced grid over
/// `[t_star, t_star + horizon]`; non-increasing by construction.
#[allow(clippy::too_many_arguments)]
pub fn survival_curve(
    t_star: f64,
    horizon: f64,
    points: usize,
    covariates: &[f64],
    signal_mean: &dyn Fn(f64) -> f64,
    bh: &BaselineHazardCurve,
    cp: &CoxParams,
    quad: &QuadSpec,
) -> Result<SurvivalCurve> {
    if horizon < 0.0 || points < 2 {
        return Err(Error::InvalidParameter(
            "survival curve needs a non-negative horizon and at least 2 points".into(),
        ));
    }
    let mut times = Vec::with_capacity(points);
    let mut survival = Vec::with_capacity(points);
    let mut cum = 0.0;
    let mut prev = t_star;
    for e in 0..points {
        let t = t_star + horizon * e as f64 / (points - 1) as f64;
        cum += predicted_cum_hazard(prev, t, covariates, signal_mean, None, bh, cp, quad, MgfForm::Standard);
        times.push(t);
        survival.push((-cum).exp());
        prev = t;
    }
    Ok(SurvivalCurve { t_star, horizon, times, survival })
}

/// Expected remaining life at `t_star`: the survival curve integrated up to
/// `horizon_cap` by Gauss-Legendre quadrature, the tail beyond it discarded.
#[allow(clippy::too_many_arguments)]
pub fn mean_remaining_life(
    t_star: f64,
    covariates: &[f64],
    signal_mean: &dyn Fn(f64) -> f64,
    bh: &BaselineHazardCurve,
    cp: &CoxParams,
    quad: &QuadSpec,
    horizon_cap: f64,
) -> Result<f64> {
    if horizon_cap <= t_star {
        return Err(Error::InvalidParameter(format!(
            "remaining-life cap {horizon_cap} must exceed the prediction time {t_star}"
        )));
    }
    let value = quad.remaining_life.integrate(t_star, horizon_cap, |u| {
        let cum = predicted_cum_hazard(
            t_star, u, covariates, signal_mean, None, bh, cp, quad, MgfForm::Standard,
        );
        (-cum).exp()
    });
    Ok(value.max(0.0))
}
