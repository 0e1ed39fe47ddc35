//! Experiment harness: truncation at observation percentiles, windowed event
//! classification with ROC/AUC, remaining-life absolute errors, and the
//! logistic-regression baseline.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::cox::{mean_remaining_life, survival_window_prob};
use crate::datagen::{gen_dataset, GenConfig, UnitRecord};
use crate::error::{Error, Result};
use crate::inference::{fit, FitConfig, SignalPredictor};
use crate::io::atomic_write;

/// Sweep definition: observation percentiles, prediction windows, replication
/// count, and the generator / fit configurations used for each replication.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub alphas: Vec<f64>,
    pub windows: Vec<f64>,
    pub replications: usize,
    pub gen: GenConfig,
    pub fit: FitConfig,
    pub pooling: RocPooling,
    /// Standardize signals (pooled mean/sd) before fitting.
    pub standardize: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            alphas: vec![0.3, 0.5],
            windows: vec![12.0, 15.0, 20.0],
            replications: 20,
            gen: GenConfig::default(),
            fit: FitConfig::default(),
            pooling: RocPooling::Pooled,
            standardize: true,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.iter().any(|a| !(0.0 < *a && *a < 1.0)) {
            return Err(Error::InvalidParameter(
                "observation percentiles must lie strictly in (0, 1)".into(),
            ));
        }
        if self.windows.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidParameter("prediction windows must be positive".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("need at least one replication".into()));
        }
        self.gen.validate()?;
        self.fit.validate()
    }
}

/// How per-cell ROC curves aggregate scores across replications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RocPooling {
    /// Pool all replications' scores into one curve per cell.
    #[default]
    Pooled,
    /// Average per-replication AUCs (replications with a single class are
    /// skipped); the reported curve still pools scores.
    Averaged,
}

/// One scored prediction with its realized outcome.
#[derive(Debug, Clone)]
pub struct ScoredOutcome {
    pub score: f64,
    pub label: bool,
    pub replication: usize,
    pub alpha: f64,
    pub window: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    MgcpCox,
    LogisticRegression,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::MgcpCox => "mgcp_cox",
            ModelKind::LogisticRegression => "lr",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub model: ModelKind,
    pub alpha: f64,
    pub window: f64,
    pub replication: usize,
    pub score: f64,
    pub label: bool,
    pub mrl_abs_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub model: ModelKind,
    pub alpha: f64,
    pub window: f64,
    pub auc: f64,
    pub auc_se: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub cells: Vec<CellSummary>,
    /// Replication index and failure message for skipped replications.
    pub failures: Vec<(usize, String)>,
}

/// Keep only observations made up to the `alpha` fraction of the unit's
/// failure time. Event fields are untouched.
pub fn truncate_at_percentile(unit: &UnitRecord, alpha: f64) -> Result<UnitRecord> {
    if !unit.event_observed {
        return Err(Error::InvalidInput(format!(
            "unit {} is censored; its failure time is unknown",
            unit.id
        )));
    }
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "observation percentile must lie in (0, 1], got {alpha}"
        )));
    }
    let t_star = alpha * unit.event_time;
    let keep = unit.times.partition_point(|&t| t <= t_star);
    if keep == 0 {
        return Err(Error::InvalidInput(format!(
            "unit {} has no observations before {t_star}",
            unit.id
        )));
    }
    let mut out = unit.clone();
    out.times.truncate(keep);
    out.values.truncate(keep);
    Ok(out)
}

/// ROC curve (threshold sweep over unique scores, ties grouped) and the
/// trapezoid area under it.
pub fn roc_auc(outcomes: &[ScoredOutcome]) -> Result<(Vec<(f64, f64)>, f64)> {
    let n_pos = outcomes.iter().filter(|o| o.label).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(format!(
            "ROC needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[b].score.total_cmp(&outcomes[a].score));

    let mut curve = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    while idx < order.len() {
        // Advance through a tie group at the current threshold.
        let threshold = outcomes[order[idx]].score;
        while idx < order.len() && outcomes[order[idx]].score == threshold {
            if outcomes[order[idx]].label {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let point = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        let last = *curve.last().unwrap();
        auc += 0.5 * (point.1 + last.1) * (point.0 - last.0);
        curve.push(point);
    }
    Ok((curve, auc))
}

/// Large-sample standard error of an AUC estimate (Hanley-McNeil).
pub fn auc_standard_error(auc: f64, n_pos: usize, n_neg: usize) -> f64 {
    let a = auc.clamp(1e-12, 1.0 - 1e-12);
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let (np, nn) = (n_pos as f64, n_neg as f64);
    ((a * (1.0 - a) + (np - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) / (np * nn))
        .max(0.0)
        .sqrt()
}

/// Ridge-penalized logistic regression fitted by iterated reweighted least
/// squares; the intercept is unpenalized. Returns test-row probabilities.
/// Single-class training data yields the constant base rate (with a warning).
pub fn lr_baseline(train: &[(Vec<f64>, bool)], test: &[Vec<f64>]) -> Result<Vec<f64>> {
    const RIDGE: f64 = 1e-4;
    if train.len() < 2 {
        return Err(Error::InvalidInput(
            "logistic regression needs at least 2 training rows".into(),
        ));
    }
    let d = train[0].0.len();
    if train.iter().any(|(x, _)| x.len() != d) || test.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput("inconsistent feature dimensions".into()));
    }
    let n_pos = train.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == train.len() {
        let rate = n_pos as f64 / train.len() as f64;
        eprintln!("warning: single-class training data; returning constant score {rate}");
        return Ok(vec![rate; test.len()]);
    }

    let n = train.len();
    let p = d + 1;
    let x = DMatrix::from_fn(n, p, |r, c| if c == 0 { 1.0 } else { train[r].0[c - 1] });
    let y = DVector::from_fn(n, |r, _| if train[r].1 { 1.0 } else { 0.0 });

    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = &x * &beta;
        let prob = eta.map(sigmoid);
        let w = prob.map(|pi| (pi * (1.0 - pi)).max(1e-10));
        // Working response of the reweighted least squares step.
        let z = &eta + (&y - &prob).component_div(&w);
        let xtw = DMatrix::from_fn(p, n, |c, r| x[(r, c)] * w[r]);
        let mut a = &xtw * &x;
        for c in 1..p {
            a[(c, c)] += RIDGE;
        }
        let rhs = &xtw * z;
        let next = Cholesky::new(a)
            .ok_or(Error::Numerical {
                component: "lr_baseline",
                message: "weighted normal equations not positive definite".into(),
            })?
            .solve(&rhs);
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < 1e-10 {
            break;
        }
    }
    Ok(test
        .iter()
        .map(|row| {
            let mut eta = beta[0];
            for (j, v) in row.iter().enumerate() {
                eta += beta[j + 1] * v;
            }
            sigmoid(eta)
        })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Absolute error of a remaining-life prediction.
pub fn ae_mrl(true_remaining: f64, predicted_remaining: f64) -> f64 {
    (true_remaining - predicted_remaining).abs()
}

/// Run the full sweep: per replication, generate data, hold the last failing
/// unit out as the test unit, truncate at each percentile, fit, score each
/// window for both models, and record remaining-life errors. Failed
/// replications are recorded and skipped unless they exceed 20%.
pub fn run_experiment(grid: &ExperimentGrid, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    grid.validate()?;
    let results: Vec<std::result::Result<Vec<ReportRow>, String>> = (0..grid.replications)
        .into_par_iter()
        .map(|rep| run_replication(grid, rep).map_err(|e| e.to_string()))
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(mut r) => rows.append(&mut r),
            Err(msg) => failures.push((rep, msg)),
        }
    }
    if failures.len() * 5 > grid.replications {
        return Err(Error::Numerical {
            component: "run_experiment",
            message: format!(
                "{} of {} replications failed: {:?}",
                failures.len(),
                grid.replications,
                failures.first()
            ),
        });
    }

    let mut cells = Vec::new();
    for model in [ModelKind::MgcpCox, ModelKind::LogisticRegression] {
        for &alpha in &grid.alphas {
            for &window in &grid.windows {
                let outcomes: Vec<ScoredOutcome> = rows
                    .iter()
                    .filter(|r| r.model == model && r.alpha == alpha && r.window == window)
                    .map(|r| ScoredOutcome {
                        score: r.score,
                        label: r.label,
                        replication: r.replication,
                        alpha,
                        window,
                    })
                    .collect();
                let Ok((roc, pooled_auc)) = roc_auc(&outcomes) else {
                    continue; // degenerate cell: single class
                };
                let n_pos = outcomes.iter().filter(|o| o.label).count();
                let n_neg = outcomes.len() - n_pos;
                let auc = match grid.pooling {
                    RocPooling::Pooled => pooled_auc,
                    RocPooling::Averaged => {
                        let mut per_rep = Vec::new();
                        for rep in 0..grid.replications {
                            let sub: Vec<ScoredOutcome> = outcomes
                                .iter()
                                .filter(|o| o.replication == rep)
                                .cloned()
                                .collect();
                            if let Ok((_, a)) = roc_auc(&sub) {
                                per_rep.push(a);
                            }
                        }
                        if per_rep.is_empty() {
                            pooled_auc
                        } else {
                            per_rep.iter().sum::<f64>() / per_rep.len() as f64
                        }
                    }
                };
                cells.push(CellSummary {
                    model,
                    alpha,
                    window,
                    auc,
                    auc_se: auc_standard_error(auc, n_pos, n_neg),
                    n_pos,
                    n_neg,
                    roc,
                });
            }
        }
    }

    let report = ExperimentReport { rows, cells, failures };
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

fn run_replication(grid: &ExperimentGrid, rep: usize) -> Result<Vec<ReportRow>> {
    let mut gen_cfg = grid.gen.clone();
    gen_cfg.seed = grid.gen.seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let units = gen_dataset(&gen_cfg)?;

    // Test unit: the last one with an observed failure that still has
    // observations at every requested truncation percentile.
    let usable = |u: &UnitRecord| {
        u.event_observed
            && u.times.first().is_some_and(|&t0| {
                grid.alphas.iter().all(|&a| a * u.event_time >= t0)
            })
    };
    let test_idx = units
        .iter()
        .rposition(usable)
        .ok_or_else(|| Error::InvalidInput("no failing unit to test on".into()))?;
    let test_unit = units[test_idx].clone();
    let failure_time = test_unit.event_time;

    let mut rows = Vec::new();
    for &alpha in &grid.alphas {
        let t_star = alpha * failure_time;
        let truncated = truncate_at_percentile(&test_unit, alpha)?;

        // Units that failed before their first monthly observation carry no
        // usable signal; leave them out of the fit.
        let mut fit_data: Vec<UnitRecord> = units
            .iter()
            .enumerate()
            .filter(|(i, u)| *i != test_idx && !u.times.is_empty())
            .map(|(_, u)| u.clone())
            .collect();
        let max_training_life = fit_data
            .iter()
            .map(|u| u.event_time)
            .fold(0.0f64, f64::max);
        if grid.fit.include_test_unit {
            let mut held = truncated.clone();
            held.event_time = t_star;
            held.event_observed = false;
            fit_data.push(held);
        }
        let test_pos = fit_data.len() - 1;

        if grid.standardize {
            standardize_in_place(&mut fit_data);
        }

        let model = fit(&fit_data, &grid.fit)?;
        let predictor = SignalPredictor::new(&model, &fit_data, test_pos)?;
        let quad = grid.fit.quad();
        let signal_mean = |t: f64| predictor.mean(t);

        let cap = t_star + 3.0 * max_training_life;
        let predicted_mrl = mean_remaining_life(
            t_star,
            &test_unit.covariates,
            &signal_mean,
            &model.baseline,
            &model.params.cox,
            &quad,
            cap,
        )?;
        let mrl_error = ae_mrl(failure_time - t_star, predicted_mrl);

        for &window in &grid.windows {
            let score = survival_window_prob(
                t_star,
                window,
                &test_unit.covariates,
                &signal_mean,
                &model.baseline,
                &model.params.cox,
                &quad,
            )?;
            let label = failure_time <= t_star + window;
            rows.push(ReportRow {
                model: ModelKind::MgcpCox,
                alpha,
                window,
                replication: rep,
                score,
                label,
                mrl_abs_error: Some(mrl_error),
            });

            // Logistic-regression baseline: fixed covariates plus the last
            // observed signal value at the truncation time.
            let mut train = Vec::new();
            for (i, u) in units.iter().enumerate() {
                if i == test_idx {
                    continue;
                }
                let label_u = if u.event_observed {
                    u.event_time <= t_star + window
                } else if u.event_time > t_star + window {
                    false
                } else {
                    continue; // censored inside the window: label unknown
                };
                let Some(x) = lr_features(u, t_star) else { continue };
                train.push((x, label_u));
            }
            let test_features = lr_features(&truncated, t_star).ok_or_else(|| {
                Error::InvalidInput("test unit has no observations for the baseline".into())
            })?;
            let lr_scores = lr_baseline(&train, &[test_features])?;
            rows.push(ReportRow {
                model: ModelKind::LogisticRegression,
                alpha,
                window,
                replication: rep,
                score: lr_scores[0],
                label,
                mrl_abs_error: None,
            });
        }
    }
    Ok(rows)
}

/// Feature row for the baseline: covariates plus last observation at or
/// before the truncation time.
fn lr_features(unit: &UnitRecord, t_star: f64) -> Option<Vec<f64>> {
    let keep = unit.times.partition_point(|&t| t <= t_star);
    if keep == 0 {
        return None;
    }
    let mut x = unit.covariates.clone();
    x.push(unit.values[keep - 1]);
    Some(x)
}

/// Pooled z-score standardization across all units' signal values.
/// Returns the (mean, sd) that was applied.
pub fn standardize_in_place(units: &mut [UnitRecord]) -> (f64, f64) {
    let all: Vec<f64> = units.iter().flat_map(|u| u.values.iter().copied()).collect();
    if all.len() < 2 {
        return (0.0, 1.0);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (all.len() - 1) as f64;
    let sd = var.sqrt().max(1e-12);
    for u in units.iter_mut() {
        for v in u.values.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    (mean, sd)
}

fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut out = String::from("model,alpha,window,replication,score,label,mrl_abs_error\n");
    for r in &report.rows {
        let mrl = r.mrl_abs_error.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model.as_str(),
            r.alpha,
            r.window,
            r.replication,
            r.score,
            if r.label { 1 } else { 0 },
            mrl
        ));
    }
    atomic_write(&dir.join("report.csv"), out.as_bytes())?;

    let mut summary = String::from("model,alpha,window,auc,auc_se,n_pos,n_neg\n");
    for c in &report.cells {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.model.as_str(),
            c.alpha,
            c.window,
            c.auc,
            c.auc_se,
            c.n_pos,
            c.n_neg
        ));
    }
    atomic_write(&dir.join("auc_summary.csv"), summary.as_bytes())?;

    for c in &report.cells {
        let name = match c.model {
            ModelKind::MgcpCox => format!("roc_{}_{}.csv", c.alpha, c.window),
            ModelKind::LogisticRegression => format!("roc_lr_{}_{}.csv", c.alpha, c.window),
        };
        let mut pts = String::from("fpr,tpr\n");
        for (fpr, tpr) in &c.roc {
            pts.push_str(&format!("{fpr},{tpr}\n"));
        }
        atomic_write(&dir.join(name), pts.as_bytes())?;
    }
    Ok(())
}
