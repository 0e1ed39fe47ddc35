//! Training objective assembly, constrained-parameter transforms, analytic
//! and finite-difference gradients, and the quasi-Newton maximizer.
//!
//! The objective is the low-rank Gaussian marginal plus trace penalty plus
//! the expected Cox log likelihood under the optimal latent posterior, which
//! is recomputed in closed form at every evaluation. Positive parameters live
//! on a log scale in the free vector and the baseline slope goes through a
//! softplus, so the optimizer works on an unconstrained vector.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cox::{
    expected_cox_loglik, fit_baseline_curve, BaselineHazardCurve, CoxParams, MgfForm,
};
use crate::datagen::UnitRecord;
use crate::error::{Error, Result};
use crate::kernels::{
    build_cross_gram, build_grams, build_latent_gram, build_output_diag, cross_gram_row,
    default_pseudo_inputs, KernelParams,
};
use crate::quadrature::QuadSpec;
use crate::sparse_gp::{optimal_q1, VariationalPosterior, WoodburyState};

/// How gradients of the objective are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Central finite differences over the free vector.
    #[default]
    CentralDifference,
    /// Closed-form reverse-mode gradient.
    Analytic,
}

/// Full parameter set of the joint model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub kernel: KernelParams,
    pub cox: CoxParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.cox.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Number of pseudo-inputs M.
    pub num_pseudo_inputs: usize,
    /// Number of latent functions K.
    pub num_latent: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub likelihood_nodes: usize,
    pub remaining_life_nodes: usize,
    pub seed: u64,
    pub gradient: GradientMode,
    /// Whether the evaluation harness adds the partially observed test unit
    /// (censored at its truncation time) to the training data.
    pub include_test_unit: bool,
    pub restarts: usize,
    pub jitter: f64,
    pub optimize_pseudo_inputs: bool,
    pub mgf_form: MgfForm,
    /// Step for central finite differences on the free coordinates.
    pub fd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_pseudo_inputs: 10,
            num_latent: 1,
            max_iters: 1000,
            rel_tol: 1e-7,
            likelihood_nodes: 32,
            remaining_life_nodes: 64,
            seed: 0,
            gradient: GradientMode::CentralDifference,
            include_test_unit: true,
            restarts: 3,
            jitter: 1e-6,
            optimize_pseudo_inputs: false,
            mgf_form: MgfForm::Standard,
            fd_step: 1e-5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pseudo_inputs == 0 || self.num_latent == 0 {
            return Err(Error::InvalidParameter(
                "need at least one pseudo-input and one latent function".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter("rel_tol must be positive".into()));
        }
        if self.likelihood_nodes == 0 || self.remaining_life_nodes == 0 {
            return Err(Error::InvalidParameter("quadrature node counts must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter("fd_step must be positive".into()));
        }
        Ok(())
    }

    pub fn quad(&self) -> QuadSpec {
        QuadSpec::new(self.likelihood_nodes, self.remaining_life_nodes)
    }
}

/// Shape information mapping the free vector onto model parameters.
///
/// Layout: `[ln lengthscales (K) | ln widths (N*K) | scales (N*K) |
/// ln noise | covariate coefs (d) | signal coef | baseline log level |
/// softplus^{-1} slope | pseudo-inputs (M, optional) ]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub num_units: usize,
    pub num_latent: usize,
    pub num_covariates: usize,
    pub num_pseudo: usize,
    pub optimize_pseudo: bool,
    pub first_event_time: f64,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        let core = self.num_latent
            + 2 * self.num_units * self.num_latent
            + 1
            + self.num_covariates
            + 3;
        core + if self.optimize_pseudo { self.num_pseudo } else { 0 }
    }

    fn idx_lengthscale(&self, k: usize) -> usize {
        k
    }
    fn idx_width(&self, i: usize, k: usize) -> usize {
        self.num_latent + i * self.num_latent + k
    }
    fn idx_scale(&self, i: usize, k: usize) -> usize {
        self.num_latent * (1 + self.num_units) + i * self.num_latent + k
    }
    fn idx_noise(&self) -> usize {
        self.num_latent * (1 + 2 * self.num_units)
    }
    fn idx_covariate(&self, j: usize) -> usize {
        self.idx_noise() + 1 + j
    }
    fn idx_signal_coef(&self) -> usize {
        self.idx_noise() + 1 + self.num_covariates
    }
    fn idx_log_level(&self) -> usize {
        self.idx_signal_coef() + 1
    }
    fn idx_slope(&self) -> usize {
        self.idx_signal_coef() + 2
    }
    fn idx_pseudo(&self, m: usize) -> usize {
        self.idx_signal_coef() + 3 + m
    }

    /// Map an unconstrained free vector onto model parameters (and optionally
    /// the pseudo-input locations).
    pub fn unpack(&self, free: &[f64]) -> Result<(ModelParams, Option<Vec<f64>>)> {
        if free.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "free vector has length {}, layout expects {}",
                free.len(),
                self.len()
            )));
        }
        if free.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite free parameter".into()));
        }
        let (n, k) = (self.num_units, self.num_latent);
        let kernel = KernelParams {
            num_units: n,
            num_latent: k,
            lengthscales: (0..k).map(|kk| free[self.idx_lengthscale(kk)].exp()).collect(),
            kernel_widths: DMatrix::from_fn(n, k, |i, kk| free[self.idx_width(i, kk)].exp()),
            kernel_scales: DMatrix::from_fn(n, k, |i, kk| free[self.idx_scale(i, kk)]),
            noise_sd: free[self.idx_noise()].exp(),
        };
        let cox = CoxParams {
            covariate_coefs: (0..self.num_covariates)
                .map(|j| free[self.idx_covariate(j)])
                .collect(),
            signal_coef: free[self.idx_signal_coef()],
            baseline_log_level: free[self.idx_log_level()],
            baseline_slope: softplus(free[self.idx_slope()]),
            first_event_time: self.first_event_time,
        };
        let pseudo = self
            .optimize_pseudo
            .then(|| (0..self.num_pseudo).map(|m| free[self.idx_pseudo(m)]).collect());
        Ok((ModelParams { kernel, cox }, pseudo))
    }

    /// Inverse of [`ParamLayout::unpack`]; requires strictly positive scale
    /// parameters and slope.
    pub fn pack(&self, params: &ModelParams, pseudo: Option<&[f64]>) -> Result<Vec<f64>> {
        params.validate()?;
        let mut free = vec![0.0; self.len()];
        for k in 0..self.num_latent {
            free[self.idx_lengthscale(k)] = params.kernel.lengthscales[k].ln();
        }
        for i in 0..self.num_units {
            for k in 0..self.num_latent {
                free[self.idx_width(i, k)] = params.kernel.kernel_widths[(i, k)].ln();
                free[self.idx_scale(i, k)] = params.kernel.kernel_scales[(i, k)];
            }
        }
        free[self.idx_noise()] = params.kernel.noise_sd.ln();
        for j in 0..self.num_covariates {
            free[self.idx_covariate(j)] = params.cox.covariate_coefs[j];
        }
        free[self.idx_signal_coef()] = params.cox.signal_coef;
        free[self.idx_log_level()] = params.cox.baseline_log_level;
        free[self.idx_slope()] = inv_softplus(params.cox.baseline_slope);
        if self.optimize_pseudo {
            let z = pseudo.ok_or_else(|| {
                Error::InvalidInput("layout optimizes pseudo-inputs but none were given".into())
            })?;
            for (m, &zm) in z.iter().enumerate() {
                free[self.idx_pseudo(m)] = zm;
            }
        }
        if free.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "parameters are outside the transformable domain".into(),
            ));
        }
        Ok(free)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summary of the data a model was fitted to.
#[derive(Debug, Clone)]
pub struct DataSummary {
    pub unit_ids: Vec<usize>,
    pub num_obs: usize,
    pub time_range: (f64, f64),
    /// Pooled (mean, sd) applied to the signals before fitting, if any.
    pub standardization: Option<(f64, f64)>,
}

/// A fitted joint model.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub posterior: VariationalPosterior,
    pub baseline: BaselineHazardCurve,
    pub elbo_trace: Vec<f64>,
    pub data_summary: DataSummary,
    /// False when the optimizer exhausted its iteration budget while still
    /// improving; the model then holds the best parameters found so far.
    pub converged: bool,
}

/// Everything fixed across objective evaluations for one dataset.
pub(crate) struct ObjectiveContext<'a> {
    data: &'a [UnitRecord],
    rows: Vec<(usize, f64)>,
    y: DVector<f64>,
    pub layout: ParamLayout,
    default_pseudo: Vec<f64>,
    quad: QuadSpec,
    jitter: f64,
    mgf: MgfForm,
    fd_step: f64,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(data: &'a [UnitRecord], pseudo: Vec<f64>, cfg: &FitConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training units".into()));
        }
        let mut rows = Vec::new();
        let mut y_vals = Vec::new();
        for (i, u) in data.iter().enumerate() {
            u.validate()?;
            if u.times.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "unit {} has no longitudinal observations",
                    u.id
                )));
            }
            for (&t, &v) in u.times.iter().zip(&u.values) {
                rows.push((i, t));
                y_vals.push(v);
            }
        }
        let d = data[0].covariates.len();
        if data.iter().any(|u| u.covariates.len() != d) {
            return Err(Error::InvalidInput("inconsistent covariate dimensions".into()));
        }
        let t_min = data.iter().map(|u| u.event_time).fold(f64::INFINITY, f64::min);
        let layout = ParamLayout {
            num_units: data.len(),
            num_latent: cfg.num_latent,
            num_covariates: d,
            num_pseudo: pseudo.len(),
            optimize_pseudo: cfg.optimize_pseudo_inputs,
            first_event_time: t_min,
        };
        Ok(ObjectiveContext {
            data,
            rows,
            y: DVector::from_vec(y_vals),
            layout,
            default_pseudo: pseudo,
            quad: cfg.quad(),
            jitter: cfg.jitter,
            mgf: cfg.mgf_form,
            fd_step: cfg.fd_step,
        })
    }

    fn pseudo<'b>(&'b self, z: &'b Option<Vec<f64>>) -> &'b [f64] {
        z.as_deref().unwrap_or(&self.default_pseudo)
    }

    pub fn eval_free(&self, free: &[f64]) -> Result<f64> {
        let (params, z) = self.layout.unpack(free)?;
        self.eval_params(&params, self.pseudo(&z))
    }

    pub fn eval_params(&self, params: &ModelParams, pseudo: &[f64]) -> Result<f64> {
        params.validate()?;
        let state = self.woodbury(params, pseudo)?;
        let log_term = state.log_marginal();
        let pe = state.penalty();
        let weights = state.mean_weights();

        let kernel = &params.kernel;
        let mean = |i: usize, t: f64| cross_gram_row(i, t, pseudo, kernel).dot(&weights);
        let var = |i: usize, t: f64| {
            let row = cross_gram_row(i, t, pseudo, kernel);
            let kx = state.solve_kxx(&row);
            let kb = state.solve_b(&row);
            crate::kernels::signal_prior_variance_unchecked(i, kernel) - row.dot(&kx)
                + row.dot(&kb)
        };
        let cox = expected_cox_loglik(self.data, &mean, &var, &params.cox, &self.quad, self.mgf)
            .map_err(|e| Error::Numerical {
                component: "cox_expectation",
                message: e.to_string(),
            })?;
        let total = log_term + pe + cox;
        if !total.is_finite() {
            return Err(Error::Numerical {
                component: "objective",
                message: format!("non-finite objective value {total}"),
            });
        }
        Ok(total)
    }

    fn woodbury(&self, params: &ModelParams, pseudo: &[f64]) -> Result<WoodburyState> {
        let k_fx = build_cross_gram(&self.rows, pseudo, &params.kernel);
        // The objective uses a fixed jitter: escalation would make the
        // objective discontinuous across the escalation boundary, which
        // spuriously stalls the line search. Parameters whose latent Gram
        // cannot be factored at this jitter are simply outside the feasible
        // region (the optimizer backs away from the failed evaluation).
        let mut k_xx = build_latent_gram(pseudo, &params.kernel);
        for d in 0..k_xx.nrows() {
            k_xx[(d, d)] += self.jitter;
        }
        let mut kff_diag = build_output_diag(&self.rows, &params.kernel);
        kff_diag.add_scalar_mut(self.jitter);
        WoodburyState::new(self.y.clone(), &k_xx, &k_fx, kff_diag, params.kernel.noise_sd)
    }

    pub fn grad(&self, free: &[f64], mode: GradientMode) -> Result<Vec<f64>> {
        match mode {
            GradientMode::CentralDifference => self.grad_fd(free, self.fd_step),
            GradientMode::Analytic => self.grad_analytic(free),
        }
    }

    pub fn grad_fd(&self, free: &[f64], step: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; free.len()];
        let mut probe = free.to_vec();
        for c in 0..free.len() {
            probe[c] = free[c] + step;
            let hi = self.eval_free(&probe)?;
            probe[c] = free[c] - step;
            let lo = self.eval_free(&probe)?;
            probe[c] = free[c];
            grad[c] = (hi - lo) / (2.0 * step);
        }
        Ok(grad)
    }

    /// Reverse-mode gradient: adjoints are accumulated on the Gram matrices,
    /// the zero-lag variances, and the evaluation-point kernel rows, then
    /// contracted against the closed-form kernel partials.
    pub fn grad_analytic(&self, free: &[f64]) -> Result<Vec<f64>> {
        let (params, z) = self.layout.unpack(&free.to_vec())?;
        params.validate()?;
        let pseudo = self.pseudo(&z).to_vec();
        let kernel = &params.kernel;
        let cox = &params.cox;
        let state = self.woodbury(&params, &pseudo)?;
        let layout = &self.layout;
        let v = state.noise_var;
        let n = state.n();
        let p_dim = state.a.nrows();

        // Gaussian-term adjoints.
        let r_mat = state
            .l_x
            .tr_solve_lower_triangular(&state.a)
            .expect("triangular solve");
        let g = state.solve_cov(&state.y);
        let g1 = &r_mat * &g;
        let w = state.solve_cov_mat(&r_mat.transpose());
        let s2 = &r_mat * &w;
        let trace_c_inv = state.trace_solve();
        let t_pe = state.kff_diag.sum() - state.a.iter().map(|x| x * x).sum::<f64>();

        let mut kbar_fx = -&w + &g * g1.transpose() + r_mat.transpose() / v;
        let mut kbar_xx = 0.5 * &s2 - 0.5 * (&g1 * g1.transpose()) - (&r_mat * r_mat.transpose()) / (2.0 * v);
        let kbar_ff_scalar = -0.5 / v;
        let mut vbar = -0.5 * trace_c_inv + 0.5 * g.norm_squared() + t_pe / (2.0 * v * v);

        // Cox-term adjoints.
        let weights = state.mean_weights();
        let mut grad = vec![0.0; free.len()];
        let mut rbar = DVector::zeros(p_dim);
        let mut bbar = DMatrix::zeros(p_dim, p_dim);
        // (unit, time, row adjoint, zero-lag adjoint)
        let mut eval_adjoints: Vec<(usize, f64, DVector<f64>, f64)> = Vec::new();

        let t0 = cox.first_event_time;
        for (i, unit) in self.data.iter().enumerate() {
            let cov_link = cox.linear_predictor(&unit.covariates).exp();
            if unit.event_observed {
                let h0 = crate::cox::baseline_hazard(unit.event_time, cox);
                if h0 <= 0.0 {
                    return Err(Error::Numerical {
                        component: "cox_expectation",
                        message: format!(
                            "unit {} fails where the baseline hazard vanishes",
                            unit.id
                        ),
                    });
                }
                let row = cross_gram_row(i, unit.event_time, &pseudo, kernel);
                let mu = row.dot(&weights);
                grad[layout.idx_signal_coef()] += mu;
                for j in 0..layout.num_covariates {
                    grad[layout.idx_covariate(j)] += unit.covariates[j];
                }
                grad[layout.idx_log_level()] += 1.0;
                grad[layout.idx_slope()] += unit.event_time - t0;
                let mubar = cox.signal_coef;
                rbar += &row * mubar;
                eval_adjoints.push((i, unit.event_time, &weights * mubar, 0.0));
            }
            for (u, omega) in self.quad.likelihood.scaled(t0.max(0.0), unit.event_time) {
                let row = cross_gram_row(i, u, &pseudo, kernel);
                let kx = state.solve_kxx(&row);
                let kb = state.solve_b(&row);
                let mu = row.dot(&weights);
                let prior = crate::kernels::signal_prior_variance_unchecked(i, kernel);
                let var_raw = prior - row.dot(&kx) + row.dot(&kb);
                let clamped = var_raw < 0.0;
                let var = var_raw.max(0.0);
                let h0 = crate::cox::baseline_hazard(u, cox);
                let a_node = cov_link * omega * h0 * self.mgf.exponent(cox.signal_coef, mu, var).exp();
                let (d_beta, d_mu, d_var) = self.mgf.exponent_partials(cox.signal_coef, mu, var);

                grad[layout.idx_signal_coef()] -= a_node * d_beta;
                for j in 0..layout.num_covariates {
                    grad[layout.idx_covariate(j)] -= a_node * unit.covariates[j];
                }
                grad[layout.idx_log_level()] -= a_node;
                grad[layout.idx_slope()] -= a_node * (u - t0);

                let mubar = -a_node * d_mu;
                let sbar = if clamped { 0.0 } else { -a_node * d_var };
                rbar += &row * mubar;
                // s = prior - k'(Kxx^{-1} - B^{-1})k.
                let row_adj = &weights * mubar + (&kb - &kx) * (2.0 * sbar);
                kbar_xx += (&kx * kx.transpose()) * sbar;
                bbar -= (&kb * kb.transpose()) * sbar;
                eval_adjoints.push((i, u, row_adj, sbar));
            }
        }

        // Backpropagate through r = B^{-1} K_xf y / v.
        let rho = state.solve_b(&rbar);
        bbar -= &rho * weights.transpose();
        kbar_fx += (&state.y * rho.transpose()) / v;
        vbar -= rbar.dot(&weights) / v;

        // Backpropagate through B = K_xx + K_xf K_fx / v.
        kbar_xx += &bbar;
        let k_fx = {
            // Reconstruct K_fx from the stored half-solve: K_fx = (L_x a)'.
            (&state.l_x * &state.a).transpose()
        };
        kbar_fx += &k_fx * (&bbar + bbar.transpose()) / v;
        let m2 = k_fx.transpose() * &k_fx;
        vbar -= bbar.component_mul(&m2).sum() / (v * v);

        // Chain the noise variance into the log-noise coordinate.
        grad[layout.idx_noise()] += vbar * 2.0 * v;
        // Baseline slope goes through the softplus.
        grad[layout.idx_slope()] *= sigmoid(free[layout.idx_slope()]);

        // Contract Gram adjoints against closed-form kernel partials.
        let m = pseudo.len();
        let mut acc = KernelGradAccumulator::new(layout, kernel, &mut grad);
        for (r, &(i, t)) in self.rows.iter().enumerate() {
            for k in 0..layout.num_latent {
                for mm in 0..m {
                    let adj = kbar_fx[(r, k * m + mm)];
                    acc.cross_entry(i, k, t - pseudo[mm], adj, mm);
                }
                acc.diag_entry(i, k, kbar_ff_scalar);
            }
        }
        for (i, t, row_adj, cbar) in &eval_adjoints {
            for k in 0..layout.num_latent {
                for mm in 0..m {
                    acc.cross_entry(*i, k, t - pseudo[mm], row_adj[k * m + mm], mm);
                }
                acc.diag_entry(*i, k, *cbar);
            }
        }
        for k in 0..layout.num_latent {
            for a in 0..m {
                for b in 0..m {
                    let adj = kbar_xx[(k * m + a, k * m + b)];
                    acc.latent_entry(k, a, b, pseudo[a] - pseudo[b], adj);
                }
            }
        }
        acc.finish();

        debug_assert_eq!(n, self.y.len());
        Ok(grad)
    }
}

/// Accumulates kernel-parameter gradients from Frobenius adjoints, applying
/// the log-scale chain factors at the end.
struct KernelGradAccumulator<'g> {
    layout: &'g ParamLayout,
    kernel: &'g KernelParams,
    grad: &'g mut Vec<f64>,
    d_lengthscale: Vec<f64>,
    d_width: Vec<f64>,
    d_scale: Vec<f64>,
    d_pseudo: Vec<f64>,
}

impl<'g> KernelGradAccumulator<'g> {
    fn new(layout: &'g ParamLayout, kernel: &'g KernelParams, grad: &'g mut Vec<f64>) -> Self {
        KernelGradAccumulator {
            d_lengthscale: vec![0.0; layout.num_latent],
            d_width: vec![0.0; layout.num_units * layout.num_latent],
            d_scale: vec![0.0; layout.num_units * layout.num_latent],
            d_pseudo: vec![0.0; layout.num_pseudo],
            layout,
            kernel,
            grad,
        }
    }

    /// Adjoint of one signal/latent kernel entry with lag `dt` for unit `i`,
    /// latent `k`, pseudo-input column `mm`.
    fn cross_entry(&mut self, i: usize, k: usize, dt: f64, adj: f64, mm: usize) {
        if adj == 0.0 {
            return;
        }
        let l = self.kernel.lengthscales[k];
        let xi = self.kernel.kernel_widths[(i, k)];
        let alpha = self.kernel.kernel_scales[(i, k)];
        let eta2 = xi * xi + l * l;
        let base = (l * l / eta2).sqrt() * (-0.5 * dt * dt / eta2).exp();
        let val = alpha * base;
        let shape = (dt * dt - eta2) / (eta2 * eta2);
        self.d_scale[i * self.layout.num_latent + k] += adj * base;
        self.d_width[i * self.layout.num_latent + k] += adj * val * xi * shape;
        self.d_lengthscale[k] += adj * val * (1.0 / l + l * shape);
        if self.layout.optimize_pseudo {
            self.d_pseudo[mm] += adj * val * dt / eta2;
        }
    }

    /// Adjoint of the zero-lag signal variance contribution of (i, k).
    fn diag_entry(&mut self, i: usize, k: usize, adj: f64) {
        if adj == 0.0 {
            return;
        }
        let l = self.kernel.lengthscales[k];
        let xi = self.kernel.kernel_widths[(i, k)];
        let alpha = self.kernel.kernel_scales[(i, k)];
        let s2 = 2.0 * xi * xi + l * l;
        let inv_sqrt = 1.0 / s2.sqrt();
        self.d_scale[i * self.layout.num_latent + k] += adj * 2.0 * alpha * l * inv_sqrt;
        self.d_width[i * self.layout.num_latent + k] +=
            adj * (-2.0 * alpha * alpha * l * xi) * inv_sqrt / s2;
        self.d_lengthscale[k] += adj * alpha * alpha * 2.0 * xi * xi * inv_sqrt / s2;
    }

    /// Adjoint of one latent Gram entry in block `k` at positions (a, b).
    fn latent_entry(&mut self, k: usize, a: usize, b: usize, d: f64, adj: f64) {
        if adj == 0.0 {
            return;
        }
        let l = self.kernel.lengthscales[k];
        let val = (-0.5 * d * d / (l * l)).exp();
        self.d_lengthscale[k] += adj * val * d * d / (l * l * l);
        if self.layout.optimize_pseudo && a != b {
            let slope = val * d / (l * l);
            self.d_pseudo[a] -= adj * slope;
            self.d_pseudo[b] += adj * slope;
        }
    }

    fn finish(self) {
        for k in 0..self.layout.num_latent {
            self.grad[self.layout.idx_lengthscale(k)] +=
                self.d_lengthscale[k] * self.kernel.lengthscales[k];
        }
        for i in 0..self.layout.num_units {
            for k in 0..self.layout.num_latent {
                let flat = i * self.layout.num_latent + k;
                self.grad[self.layout.idx_width(i, k)] +=
                    self.d_width[flat] * self.kernel.kernel_widths[(i, k)];
                self.grad[self.layout.idx_scale(i, k)] += self.d_scale[flat];
            }
        }
        if self.layout.optimize_pseudo {
            for mmm in 0..self.layout.num_pseudo {
                self.grad[self.layout.idx_pseudo(mmm)] += self.d_pseudo[mmm];
            }
        }
    }
}

/// Full training objective at the given parameters.
pub fn objective(
    params: &ModelParams,
    data: &[UnitRecord],
    pseudo_inputs: &[f64],
    cfg: &FitConfig,
) -> Result<f64> {
    cfg.validate()?;
    let ctx = ObjectiveContext::new(data, pseudo_inputs.to_vec(), cfg)?;
    ctx.eval_params(params, pseudo_inputs)
}

/// Compare the analytic gradient against central finite differences at the
/// given parameters; returns the maximum relative discrepancy.
pub fn grad_check(
    params: &ModelParams,
    data: &[UnitRecord],
    pseudo_inputs: &[f64],
    cfg: &FitConfig,
) -> Result<f64> {
    cfg.validate()?;
    let ctx = ObjectiveContext::new(data, pseudo_inputs.to_vec(), cfg)?;
    let free = ctx.layout.pack(
        params,
        cfg.optimize_pseudo_inputs.then_some(pseudo_inputs),
    )?;
    let analytic = ctx.grad_analytic(&free)?;
    let fd = ctx.grad_fd(&free, cfg.fd_step)?;
    Ok(max_relative_gap(&analytic, &fd))
}

pub(crate) fn max_relative_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

struct OptimizerRun {
    x: Vec<f64>,
    value: f64,
    trace: Vec<f64>,
    converged: bool,
}

/// L-BFGS ascent with Armijo backtracking. Only accepted (improving) steps
/// enter the trace.
fn lbfgs_maximize(
    ctx: &ObjectiveContext,
    mode: GradientMode,
    x0: Vec<f64>,
    max_iters: usize,
    rel_tol: f64,
) -> Result<OptimizerRun> {
    const MEMORY: usize = 8;
    const ARMIJO: f64 = 1e-4;

    let mut x = x0;
    let mut fx = ctx.eval_free(&x)?;
    let mut gx = ctx.grad(&x, mode)?;
    let mut trace = vec![fx];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters {
        let mut dir = two_loop_direction(&gx, &pairs);
        let mut slope: f64 = dir.iter().zip(&gx).map(|(d, g)| d * g).sum();
        if !slope.is_finite() || slope <= 0.0 {
            dir = gx.clone();
            slope = gx.iter().map(|g| g * g).sum();
        }
        if slope <= 1e-300 {
            converged = true;
            break;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            match ctx.eval_free(&cand) {
                Ok(fc) if fc.is_finite() && fc >= fx + ARMIJO * step * slope => {
                    accepted = Some((cand, fc));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // No admissible step along this direction; retry once along the
            // gradient with fresh curvature memory, otherwise stop.
            if pairs.is_empty() {
                converged = true;
                break;
            }
            pairs.clear();
            continue;
        };

        let g_new = ctx.grad(&x_new, mode)?;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| b - a).collect();
        // Curvature pair for the negated (minimized) objective.
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let y_norm: f64 = yv.iter().map(|a| a * a).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if pairs.len() == MEMORY {
                pairs.remove(0);
            }
            pairs.push((s, yv));
        }

        let improvement = f_new - fx;
        x = x_new;
        fx = f_new;
        gx = g_new;
        trace.push(fx);
        if improvement.abs() <= rel_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }
    Ok(OptimizerRun { x, value: fx, trace, converged })
}

/// Two-loop recursion on the negated objective; returns an ascent direction.
fn two_loop_direction(gx: &[f64], pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    // Minimization form: gradient of -f is -g; the returned direction is
    // negated back into ascent coordinates.
    let mut q: Vec<f64> = gx.iter().map(|g| -g).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let alpha = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push((rho, alpha));
    }
    if let Some((s, y)) = pairs.last() {
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|b| b * b).sum();
        let gamma = sy / yy;
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y), (rho, alpha)) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    // q approximates -H^{-1} g of the minimized problem; ascent direction.
    q.iter().map(|qi| -qi).collect()
}

/// Scale-aware neutral initialization.
fn initial_params(
    data: &[UnitRecord],
    cfg: &FitConfig,
    t_min: f64,
    rng: &mut ChaCha8Rng,
) -> ModelParams {
    let n = data.len();
    let k = cfg.num_latent;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for u in data {
        for &t in &u.times {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    let range = (hi - lo).max(1.0);

    let mut diffs = Vec::new();
    for u in data {
        for w in u.values.windows(2) {
            diffs.push(w[1] - w[0]);
        }
    }
    // Half the first-difference spread estimates the noise floor; flooring it
    // at a quarter of the pooled signal spread keeps the start point away
    // from the spiked-likelihood region while the kernel is still random.
    let all: Vec<f64> = data.iter().flat_map(|u| u.values.iter().copied()).collect();
    let pooled_sd = if all.len() > 1 {
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (all.len() - 1) as f64).sqrt()
    } else {
        1.0
    };
    let noise_sd = if diffs.len() > 1 {
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        (0.5 * var.sqrt()).max(0.25 * pooled_sd).max(1e-3)
    } else {
        0.1
    };

    // Unit-scale amplitudes: the kernel prior variance then matches
    // unit-variance (standardized) data instead of starting four orders of
    // magnitude below it.
    let scale_init = Normal::new(0.0, 1.0).unwrap();
    let n_events = data.iter().filter(|u| u.event_observed).count().max(1);
    let total_time: f64 = data.iter().map(|u| u.event_time).sum();

    ModelParams {
        kernel: KernelParams {
            num_units: n,
            num_latent: k,
            lengthscales: vec![range / 10.0; k],
            kernel_widths: DMatrix::from_element(n, k, range / 10.0),
            kernel_scales: DMatrix::from_fn(n, k, |_, _| scale_init.sample(rng)),
            noise_sd,
        },
        cox: CoxParams {
            covariate_coefs: vec![0.0; data[0].covariates.len()],
            signal_coef: 0.0,
            baseline_log_level: (n_events as f64 / total_time.max(1e-9)).ln(),
            baseline_slope: 1e-3,
            first_event_time: t_min,
        },
    }
}

/// The scale-aware initialization `fit` starts from, for external gradient
/// checks and diagnostics.
pub fn initial_guess(data: &[UnitRecord], cfg: &FitConfig) -> Result<ModelParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no units".into()));
    }
    for u in data {
        u.validate()?;
    }
    let t_min = data.iter().map(|u| u.event_time).fold(f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(initial_params(data, cfg, t_min, &mut rng))
}

/// Fit the joint model by maximizing the training objective with restarts.
pub fn fit(data: &[UnitRecord], cfg: &FitConfig) -> Result<FittedModel> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 units to fit".into()));
    }
    if !data.iter().any(|u| u.event_observed) {
        return Err(Error::InvalidInput(
            "training data contains no observed events".into(),
        ));
    }
    let times: Vec<Vec<f64>> = data.iter().map(|u| u.times.clone()).collect();
    let pseudo = default_pseudo_inputs(&times, cfg.num_pseudo_inputs);
    let ctx = ObjectiveContext::new(data, pseudo.clone(), cfg)?;
    let t_min = ctx.layout.first_event_time;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<OptimizerRun> = None;
    for restart in 0..cfg.restarts {
        let mut init = initial_params(data, cfg, t_min, &mut rng);
        if restart > 0 {
            let jitter = Normal::new(0.0, 0.3).unwrap();
            for l in init.kernel.lengthscales.iter_mut() {
                let draw: f64 = jitter.sample(&mut rng);
                *l *= draw.exp();
            }
            init.kernel.kernel_widths.apply(|w| {
                let draw: f64 = jitter.sample(&mut rng);
                *w *= draw.exp();
            });
            let draw: f64 = jitter.sample(&mut rng);
            init.kernel.noise_sd *= draw.exp();
        }
        let x0 = ctx
            .layout
            .pack(&init, cfg.optimize_pseudo_inputs.then_some(&pseudo[..]))?;
        let run = match lbfgs_maximize(&ctx, cfg.gradient, x0, cfg.max_iters, cfg.rel_tol) {
            Ok(run) => run,
            // A restart that fails numerically is skipped, not fatal.
            Err(_) if cfg.restarts > 1 => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().map_or(true, |b| run.value > b.value) {
            best = Some(run);
        }
    }
    let best = best.ok_or(Error::Numerical {
        component: "fit",
        message: "every restart failed".into(),
    })?;

    let (params, z) = ctx.layout.unpack(&best.x)?;
    let pseudo_final = z.unwrap_or(pseudo);
    let grams = build_grams(&times, &pseudo_final, &params.kernel, cfg.jitter)?;
    let y = ctx.y.clone();
    let posterior = optimal_q1(&y, &grams, &pseudo_final, params.kernel.noise_sd)?;
    let event_times: Vec<f64> = data.iter().map(|u| u.event_time).collect();
    let baseline = fit_baseline_curve(&event_times, &params.cox)?;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for u in data {
        for &t in &u.times {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    Ok(FittedModel {
        params,
        posterior,
        baseline,
        elbo_trace: best.trace,
        data_summary: DataSummary {
            unit_ids: data.iter().map(|u| u.id).collect(),
            num_obs: y.len(),
            time_range: (lo, hi),
            standardization: None,
        },
        converged: best.converged,
    })
}

/// Cheap repeated prediction for one unit of a fitted model: kernel row dot
/// products against cached solve results.
pub struct SignalPredictor {
    kernel: KernelParams,
    pseudo: Vec<f64>,
    unit: usize,
    mean_weights: DVector<f64>,
    state: WoodburyState,
}

impl SignalPredictor {
    pub fn new(model: &FittedModel, data: &[UnitRecord], unit: usize) -> Result<Self> {
        if unit >= data.len() {
            return Err(Error::IndexOutOfRange(format!(
                "unit {unit} (have {})",
                data.len()
            )));
        }
        let kernel = model.params.kernel.clone();
        kernel.validate()?;
        if data.len() != kernel.num_units {
            return Err(Error::InvalidInput(format!(
                "model was fitted to {} units, got {}",
                kernel.num_units,
                data.len()
            )));
        }
        let mut rows = Vec::new();
        let mut y_vals = Vec::new();
        for (i, u) in data.iter().enumerate() {
            for (&t, &v) in u.times.iter().zip(&u.values) {
                rows.push((i, t));
                y_vals.push(v);
            }
        }
        if y_vals.len() != model.data_summary.num_obs {
            return Err(Error::InvalidInput(format!(
                "model was fitted to {} observations, got {}",
                model.data_summary.num_obs,
                y_vals.len()
            )));
        }
        let pseudo = model.posterior.pseudo_inputs.clone();
        let k_fx = build_cross_gram(&rows, &pseudo, &kernel);
        let mut k_xx = build_latent_gram(&pseudo, &kernel);
        for d in 0..k_xx.nrows() {
            k_xx[(d, d)] += model.posterior.jitter;
        }
        let mut kff_diag = build_output_diag(&rows, &kernel);
        kff_diag.add_scalar_mut(model.posterior.jitter);
        let y = DVector::from_vec(y_vals);
        let state = WoodburyState::new(y, &k_xx, &k_fx, kff_diag, kernel.noise_sd)?;
        let g = state.solve_cov(&state.y);
        let r_mat = state
            .l_x
            .tr_solve_lower_triangular(&state.a)
            .expect("triangular solve");
        let mean_weights = &r_mat * g;
        Ok(SignalPredictor { kernel, pseudo, unit, mean_weights, state })
    }

    pub fn mean(&self, t: f64) -> f64 {
        cross_gram_row(self.unit, t, &self.pseudo, &self.kernel).dot(&self.mean_weights)
    }

    pub fn var(&self, t: f64) -> f64 {
        let row = cross_gram_row(self.unit, t, &self.pseudo, &self.kernel);
        let kx = self.state.solve_kxx(&row);
        let kb = self.state.solve_b(&row);
        (crate::kernels::signal_prior_variance_unchecked(self.unit, &self.kernel)
            - row.dot(&kx)
            + row.dot(&kb))
        .max(0.0)
    }
}
