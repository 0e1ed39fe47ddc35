//! Pseudo-input sparse approximation: optimal variational posterior over the
//! latent samples, Gaussian bound terms, and the predictive distribution.
//!
//! All dense solves go through triangular factors of the `KM x KM` latent
//! Gram and of the inner matrix `I + A A' / noise_var` with
//! `A = L_x^{-1} K_xf`, so the Gaussian bound and predictions cost
//! O(n M^2) rather than O(n^3).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::{
    build_cross_gram, build_latent_gram, build_output_diag, build_output_gram, stack_inputs,
    GramSet, KernelParams,
};

/// Optimal Gaussian posterior over the stacked latent samples at the
/// pseudo-inputs.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    /// Pseudo-input locations (shared by every latent function block).
    pub pseudo_inputs: Vec<f64>,
    /// Posterior mean, length `K * M`.
    pub mean: DVector<f64>,
    /// Posterior covariance, `KM x KM`.
    pub cov: DMatrix<f64>,
    /// Diagonal jitter that was applied to the latent Gram it was built from.
    pub jitter: f64,
}

/// Gaussian posterior over signal values at requested evaluation times.
#[derive(Debug, Clone)]
pub struct SignalPosterior {
    pub mean: DVector<f64>,
    /// Pointwise variances (diagonal of the covariance).
    pub var: DVector<f64>,
    /// Full covariance, present when requested.
    pub cov: Option<DMatrix<f64>>,
}

/// Factored quantities for the low-rank covariance `noise_var I + Q`.
pub(crate) struct WoodburyState {
    pub l_x: DMatrix<f64>,
    /// `L_x^{-1} K_xf`, size `P x n`.
    pub a: DMatrix<f64>,
    pub chol_inner: Cholesky<f64, Dyn>,
    pub ay: DVector<f64>,
    pub y: DVector<f64>,
    pub kff_diag: DVector<f64>,
    pub noise_var: f64,
}

impl WoodburyState {
    pub fn new(
        y: DVector<f64>,
        k_xx: &DMatrix<f64>,
        k_fx: &DMatrix<f64>,
        kff_diag: DVector<f64>,
        noise_sd: f64,
    ) -> Result<Self> {
        if k_fx.nrows() != y.len() {
            return Err(Error::InvalidInput(format!(
                "observation vector length {} does not match gram rows {}",
                y.len(),
                k_fx.nrows()
            )));
        }
        let chol_x = Cholesky::new(k_xx.clone()).ok_or(Error::Factorization {
            matrix: "k_xx",
            jitter: 0.0,
        })?;
        let l_x = chol_x.l();
        let a = l_x
            .solve_lower_triangular(&k_fx.transpose())
            .ok_or(Error::Factorization { matrix: "k_xx", jitter: 0.0 })?;
        let noise_var = noise_sd * noise_sd;
        let p = a.nrows();
        let mut inner = &a * a.transpose() / noise_var;
        for d in 0..p {
            inner[(d, d)] += 1.0;
        }
        let chol_inner = Cholesky::new(inner).ok_or(Error::Factorization {
            matrix: "inner_woodbury",
            jitter: 0.0,
        })?;
        let ay = &a * &y;
        Ok(WoodburyState {
            l_x,
            a,
            chol_inner,
            ay,
            y,
            kff_diag,
            noise_var,
        })
    }

    pub fn from_grams(y: DVector<f64>, grams: &GramSet, noise_sd: f64) -> Result<Self> {
        let kff_diag = grams.k_ff.diagonal();
        WoodburyState::new(y, &grams.k_xx, &grams.k_fx, kff_diag, noise_sd)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// log N(y; 0, noise_var I + Q) via the determinant and inversion lemmas.
    pub fn log_marginal(&self) -> f64 {
        let n = self.n() as f64;
        let v = self.noise_var;
        let ln_det = n * v.ln() + 2.0 * self.chol_inner.l_dirty().diagonal().map(f64::ln).sum();
        let bi_ay = self.chol_inner.solve(&self.ay);
        let quad = (self.y.norm_squared() - self.ay.dot(&bi_ay) / v) / v;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
    }

    /// Trace penalty `-(tr K_ff - tr Q) / (2 noise_var)`.
    pub fn penalty(&self) -> f64 {
        let tr_q = self.a.iter().map(|x| x * x).sum::<f64>();
        -(self.kff_diag.sum() - tr_q) / (2.0 * self.noise_var)
    }

    /// Apply `(noise_var I + Q)^{-1}` to a vector.
    pub fn solve_cov(&self, x: &DVector<f64>) -> DVector<f64> {
        let ax = &self.a * x;
        let inner = self.chol_inner.solve(&ax);
        (x - self.a.transpose() * inner / self.noise_var) / self.noise_var
    }

    /// Apply `(noise_var I + Q)^{-1}` to each column of a matrix.
    pub fn solve_cov_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let ax = &self.a * x;
        let inner = self.chol_inner.solve(&ax);
        (x - self.a.transpose() * inner / self.noise_var) / self.noise_var
    }

    /// tr (noise_var I + Q)^{-1}.
    pub fn trace_solve(&self) -> f64 {
        let half = self.chol_inner.l_dirty().solve_lower_triangular(&self.a).unwrap();
        let frob: f64 = half.iter().map(|x| x * x).sum();
        (self.n() as f64 - frob / self.noise_var) / self.noise_var
    }

    /// Posterior moments of the latent samples: mean and covariance.
    pub fn posterior_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let inner_ay = self.chol_inner.solve(&self.ay);
        let mean = &self.l_x * inner_ay / self.noise_var;
        let w = self
            .chol_inner
            .l_dirty()
            .solve_lower_triangular(&self.l_x.transpose())
            .unwrap();
        let cov = w.transpose() * w;
        (mean, cov)
    }

    /// `r = K_xx^{-1} m`, the weight vector of the posterior mean smoother.
    pub fn mean_weights(&self) -> DVector<f64> {
        let inner_ay = self.chol_inner.solve(&self.ay);
        self.l_x.tr_solve_lower_triangular(&inner_ay).unwrap() / self.noise_var
    }

    /// Apply `K_xx^{-1}` through the triangular factor.
    pub fn solve_kxx(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.l_x.solve_lower_triangular(x).unwrap();
        self.l_x.tr_solve_lower_triangular(&t).unwrap()
    }

    /// Apply `B^{-1}` with `B = K_xx + K_xf K_fx / noise_var`.
    pub fn solve_b(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.l_x.solve_lower_triangular(x).unwrap();
        let t = self.chol_inner.solve(&t);
        self.l_x.tr_solve_lower_triangular(&t).unwrap()
    }

    pub fn solve_b_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self.l_x.solve_lower_triangular(x).unwrap();
        let t = self.chol_inner.solve(&t);
        self.l_x.tr_solve_lower_triangular(&t).unwrap()
    }
}

/// Read back the diagonal jitter of a latent Gram built by `build_grams`.
/// The latent covariance has unit amplitude, so the stored diagonal is
/// exactly `1 + jitter`.
fn gram_jitter(k_xx: &DMatrix<f64>) -> f64 {
    (k_xx[(0, 0)] - 1.0).max(0.0)
}

/// Optimal variational posterior over the latent samples given stacked
/// observations.
pub fn optimal_q1(
    y: &DVector<f64>,
    grams: &GramSet,
    pseudo_inputs: &[f64],
    noise_sd: f64,
) -> Result<VariationalPosterior> {
    let state = WoodburyState::from_grams(y.clone(), grams, noise_sd)?;
    let (mean, cov) = state.posterior_moments();
    Ok(VariationalPosterior {
        pseudo_inputs: pseudo_inputs.to_vec(),
        mean,
        cov,
        jitter: gram_jitter(&grams.k_xx),
    })
}

/// Posterior over signal values at the requested per-unit evaluation times
/// (which may extrapolate beyond the data).
pub fn signal_posterior(
    eval_times: &[Vec<f64>],
    vp: &VariationalPosterior,
    p: &KernelParams,
    full_cov: bool,
) -> Result<SignalPosterior> {
    p.validate()?;
    if eval_times.len() != p.num_units {
        return Err(Error::InvalidInput(format!(
            "expected {} per-unit evaluation vectors, got {}",
            p.num_units,
            eval_times.len()
        )));
    }
    let mut k_xx = build_latent_gram(&vp.pseudo_inputs, p);
    for d in 0..k_xx.nrows() {
        k_xx[(d, d)] += vp.jitter;
    }
    if k_xx.nrows() != vp.mean.len() {
        return Err(Error::InvalidInput(
            "posterior dimensions do not match kernel parameters".into(),
        ));
    }
    let chol = Cholesky::new(k_xx).ok_or(Error::Factorization {
        matrix: "k_xx",
        jitter: vp.jitter,
    })?;

    let rows = stack_inputs(eval_times);
    let k_ex = build_cross_gram(&rows, &vp.pseudo_inputs, p);
    let mean = &k_ex * chol.solve(&vp.mean);

    // t = K_xx^{-1} K_xe, columns aligned with evaluation rows.
    let t = chol.solve(&k_ex.transpose());
    let st = &vp.cov * &t;
    let prior_diag = build_output_diag(&rows, p);
    let var = DVector::from_fn(rows.len(), |e, _| {
        let k_e = k_ex.row(e);
        let t_e = t.column(e);
        prior_diag[e] - k_e.tr_dot(&t_e) + t_e.dot(&st.column(e))
    });

    let cov = if full_cov {
        let k_ee = build_output_gram(&rows, p);
        Some(k_ee - &k_ex * &t + t.transpose() * st)
    } else {
        None
    };
    Ok(SignalPosterior { mean, var, cov })
}

/// The two Gaussian terms of the training objective: the low-rank marginal
/// log likelihood and the trace penalty.
pub fn gaussian_elbo_terms(
    y: &DVector<f64>,
    grams: &GramSet,
    noise_sd: f64,
) -> Result<(f64, f64)> {
    let state = WoodburyState::from_grams(y.clone(), grams, noise_sd)?;
    Ok((state.log_marginal(), state.penalty()))
}

/// Predictive mean and variance for `test_unit` at new input points, using
/// the direct low-rank predictive equations.
pub fn predict_signal(
    t_star: &[f64],
    test_unit: usize,
    y: &DVector<f64>,
    grams: &GramSet,
    p: &KernelParams,
    pseudo_inputs: &[f64],
    noise_sd: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    p.validate()?;
    if test_unit >= p.num_units {
        return Err(Error::IndexOutOfRange(format!(
            "test unit {test_unit} (have {} units)",
            p.num_units
        )));
    }
    let state = WoodburyState::from_grams(y.clone(), grams, noise_sd)?;
    let chol = Cholesky::new(grams.k_xx.clone()).ok_or(Error::Factorization {
        matrix: "k_xx",
        jitter: 0.0,
    })?;

    let rows: Vec<(usize, f64)> = t_star.iter().map(|&t| (test_unit, t)).collect();
    let k_sx = build_cross_gram(&rows, pseudo_inputs, p);
    // a_p = K_{*x} K_xx^{-1} K_xf, applied through the triangular factors.
    let t_star_mat = chol.solve(&k_sx.transpose());
    let a_p = t_star_mat.transpose() * grams.k_fx.transpose();

    let g = state.solve_cov(y);
    let mean = &a_p * g;

    let solved = state.solve_cov_mat(&a_p.transpose());
    let prior = crate::kernels::signal_prior_variance_unchecked(test_unit, p);
    let var = DVector::from_fn(rows.len(), |e, _| prior - a_p.row(e).tr_dot(&solved.column(e)));
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_grams, default_pseudo_inputs};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn random_params(rng: &mut ChaCha8Rng, n: usize, k: usize) -> KernelParams {
        KernelParams {
            num_units: n,
            num_latent: k,
            lengthscales: (0..k).map(|_| rng.random_range(0.5..2.0)).collect(),
            kernel_widths: DMatrix::from_fn(n, k, |_, _| rng.random_range(0.3..1.2)),
            kernel_scales: DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.5..1.5)),
            noise_sd: rng.random_range(0.1..0.4),
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n_units: usize,
        k: usize,
        points: usize,
        m: usize,
    ) -> (KernelParams, Vec<Vec<f64>>, Vec<f64>, DVector<f64>, GramSet) {
        let p = random_params(rng, n_units, k);
        let inputs: Vec<Vec<f64>> = (0..n_units)
            .map(|_| {
                let mut ts: Vec<f64> = (0..points).map(|_| rng.random_range(0.0..8.0)).collect();
                ts.sort_by(f64::total_cmp);
                ts
            })
            .collect();
        let z = default_pseudo_inputs(&inputs, m);
        let grams = build_grams(&inputs, &z, &p, 1e-6).unwrap();
        let y = DVector::from_fn(grams.k_ff.nrows(), |_, _| rng.random_range(-1.0..1.0));
        (p, inputs, z, y, grams)
    }

    #[test]
    fn huge_noise_recovers_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (_, _, z, y, grams) = random_instance(&mut rng, 2, 1, 5, 4);
        let vp = optimal_q1(&y, &grams, &z, 1e6).unwrap();
        assert!(vp.mean.norm() < 1e-4, "mean norm {}", vp.mean.norm());
        let diff = (&vp.cov - &grams.k_xx).norm();
        assert!(diff < 1e-4, "covariance distance from prior {diff}");
    }

    #[test]
    fn scalar_bayes_oracle() {
        // One unit, one observation, M = 1: the posterior is a hand-computable
        // linear-Gaussian update with slope c / s0.
        let p = KernelParams {
            num_units: 1,
            num_latent: 1,
            lengthscales: vec![1.3],
            kernel_widths: DMatrix::from_element(1, 1, 0.8),
            kernel_scales: DMatrix::from_element(1, 1, 1.7),
            noise_sd: 0.3,
        };
        let inputs = vec![vec![2.0]];
        let z = vec![2.5];
        let grams = build_grams(&inputs, &z, &p, 1e-9).unwrap();
        let y_obs = 0.9;
        let y = DVector::from_element(1, y_obs);
        let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();

        let s0 = grams.k_xx[(0, 0)];
        let c = grams.k_fx[(0, 0)];
        let v = p.noise_sd * p.noise_sd;
        let slope = c / s0;
        let post_var_x = 1.0 / (1.0 / s0 + slope * slope / v);
        let post_mean_x = post_var_x * slope / v * y_obs;
        assert_relative_eq!(vp.mean[0], post_mean_x, max_relative = 1e-10);
        assert_relative_eq!(vp.cov[(0, 0)], post_var_x, max_relative = 1e-10);
    }

    #[test]
    fn posterior_no_wider_than_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let (p, _, z, y, grams) = random_instance(&mut rng, 3, 2, 6, 4);
            let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();
            let gap = &grams.k_xx - &vp.cov;
            let min_eig = gap.symmetric_eigenvalues().min();
            assert!(min_eig >= -1e-8, "loewner violation, min eig {min_eig}");
        }
    }

    #[test]
    fn far_extrapolation_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (p, _, z, y, grams) = random_instance(&mut rng, 2, 1, 6, 5);
        let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();
        // At least ten lengthscales past every datum and pseudo-input.
        let far = 8.0 + 10.0 * (p.lengthscales[0] + 2.0);
        let sp = signal_posterior(&[vec![far], vec![]], &vp, &p, false).unwrap();
        assert!(sp.mean[0].abs() < 1e-3);
        let prior = crate::kernels::signal_prior_variance(0, &p).unwrap();
        assert_relative_eq!(sp.var[0], prior, epsilon = 1e-3);
    }

    #[test]
    fn posterior_variances_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..10 {
            let (p, inputs, z, y, grams) = random_instance(&mut rng, 3, 1, 5, 4);
            let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();
            let sp = signal_posterior(&inputs, &vp, &p, false).unwrap();
            assert!(sp.var.iter().all(|&v| v >= -1e-8), "negative variance: {:?}", sp.var);
        }
    }

    #[test]
    fn monte_carlo_two_stage_sampling_matches_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (p, _, z, y, grams) = random_instance(&mut rng, 2, 1, 5, 3);
        let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();
        let eval = vec![vec![1.0, 6.5], vec![3.0]];
        let sp = signal_posterior(&eval, &vp, &p, false).unwrap();

        // Sample latent vectors from the posterior, push them through the
        // conditional mean map, and average.
        let chol_s = Cholesky::new(vp.cov.clone() + DMatrix::identity(3, 3) * 1e-12).unwrap();
        let mut k_xx = build_latent_gram(&z, &p);
        for d in 0..3 {
            k_xx[(d, d)] += vp.jitter;
        }
        let chol_xx = Cholesky::new(k_xx).unwrap();
        let rows = stack_inputs(&eval);
        let k_ex = build_cross_gram(&rows, &z, &p);
        let map = chol_xx.solve(&k_ex.transpose());

        let samples = 100_000;
        let mut sums = vec![0.0; rows.len()];
        let mut sq = vec![0.0; rows.len()];
        for _ in 0..samples {
            let zvec = DVector::from_fn(3, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let x = &vp.mean + chol_s.l_dirty() * zvec;
            let f = map.transpose() * x;
            for (e, &fe) in f.iter().enumerate() {
                sums[e] += fe;
                sq[e] += fe * fe;
            }
        }
        for e in 0..rows.len() {
            let mc_mean = sums[e] / samples as f64;
            let mc_var = sq[e] / samples as f64 - mc_mean * mc_mean;
            let se = (mc_var / samples as f64).sqrt();
            assert!(
                (mc_mean - sp.mean[e]).abs() <= 3.0 * se + 1e-12,
                "mc mean {mc_mean} vs posterior {} (se {se})",
                sp.mean[e]
            );
        }
    }

    #[test]
    fn penalty_is_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let (p, _, _, y, grams) = random_instance(&mut rng, 3, 2, 6, 4);
            let (_, pe) = gaussian_elbo_terms(&y, &grams, p.noise_sd).unwrap();
            assert!(pe <= 1e-10, "penalty {pe} should be non-positive");
        }
    }

    fn dense_gaussian_logpdf(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = y.len() as f64;
        let chol = Cholesky::new(cov.clone()).unwrap();
        let ln_det = 2.0 * chol.l_dirty().diagonal().map(f64::ln).sum();
        let quad = y.dot(&chol.solve(y));
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
    }

    #[test]
    fn bound_never_exceeds_exact_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let (p, _, _, y, grams) = random_instance(&mut rng, 3, 1, 10, 5);
            let (log_term, pe) = gaussian_elbo_terms(&y, &grams, p.noise_sd).unwrap();
            let v = p.noise_sd * p.noise_sd;
            let exact_cov = &grams.k_ff + DMatrix::identity(y.len(), y.len()) * v;
            let exact = dense_gaussian_logpdf(&y, &exact_cov);
            assert!(
                log_term + pe <= exact + 1e-8,
                "bound {} above exact {exact}",
                log_term + pe
            );
        }
    }

    #[test]
    fn woodbury_matches_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..5 {
            let (p, _, _, y, grams) = random_instance(&mut rng, 2, 1, 6, 4);
            let (log_term, _) = gaussian_elbo_terms(&y, &grams, p.noise_sd).unwrap();
            let v = p.noise_sd * p.noise_sd;
            let cov = &grams.q + DMatrix::identity(y.len(), y.len()) * v;
            let dense = dense_gaussian_logpdf(&y, &cov);
            assert_relative_eq!(log_term, dense, epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_interpolates_low_noise_signal() {
        // Smooth noise-free signal, tiny noise floor: prediction at an
        // observed input should pass close to the observation.
        let p = KernelParams {
            num_units: 1,
            num_latent: 1,
            lengthscales: vec![2.0],
            kernel_widths: DMatrix::from_element(1, 1, 1.0),
            kernel_scales: DMatrix::from_element(1, 1, 1.0),
            noise_sd: 1e-3,
        };
        let inputs = vec![(0..12).map(|i| i as f64 * 0.5).collect::<Vec<_>>()];
        let z = default_pseudo_inputs(&inputs, 9);
        let grams = build_grams(&inputs, &z, &p, 1e-10).unwrap();
        let y = DVector::from_iterator(12, inputs[0].iter().map(|&t| (0.4 * t).sin() * 0.5));
        let (mean, var) = predict_signal(&[2.5], 0, &y, &grams, &p, &z, p.noise_sd).unwrap();
        let observed = (0.4f64 * 2.5).sin() * 0.5;
        assert!((mean[0] - observed).abs() < 0.01, "mean {} vs observed {observed}", mean[0]);
        assert!(var.iter().all(|&v| v >= -1e-8));
    }

    #[test]
    fn predict_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (p, _, z, y, grams) = random_instance(&mut rng, 2, 1, 6, 4);
        let (mean, var) = predict_signal(&[1.0, 4.0, 9.0], 1, &y, &grams, &p, &z, p.noise_sd).unwrap();

        let v = p.noise_sd * p.noise_sd;
        let d = &grams.q + DMatrix::identity(y.len(), y.len()) * v;
        let d_inv = d.try_inverse().unwrap();
        let rows: Vec<(usize, f64)> = [1.0, 4.0, 9.0].iter().map(|&t| (1usize, t)).collect();
        let k_sx = build_cross_gram(&rows, &z, &p);
        let chol = Cholesky::new(grams.k_xx.clone()).unwrap();
        let a_p = chol.solve(&k_sx.transpose()).transpose() * grams.k_fx.transpose();
        let dense_mean = &a_p * &d_inv * &y;
        let prior = crate::kernels::signal_prior_variance(1, &p).unwrap();
        for e in 0..3 {
            assert_relative_eq!(mean[e], dense_mean[e], epsilon = 1e-8);
            let row = a_p.row(e).transpose();
            let dense_var = prior - row.dot(&(&d_inv * &row));
            assert_relative_eq!(var[e], dense_var, epsilon = 1e-8);
        }
    }

    #[test]
    fn two_prediction_routes_agree_at_training_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let (p, inputs, z, y, grams) = random_instance(&mut rng, 2, 1, 6, 5);
        let vp = optimal_q1(&y, &grams, &z, p.noise_sd).unwrap();
        let sp = signal_posterior(&inputs, &vp, &p, false).unwrap();
        let (mean_u1, _) = predict_signal(&inputs[1], 1, &y, &grams, &p, &z, p.noise_sd).unwrap();
        let offset = inputs[0].len();
        for e in 0..inputs[1].len() {
            assert_relative_eq!(sp.mean[offset + e], mean_u1[e], epsilon = 1e-6);
        }
    }

    #[test]
    fn nested_pseudo_inputs_never_degrade_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|i| i as f64 * 0.8).collect())
            .collect();
        let y = DVector::from_fn(30, |r, _| {
            let t = inputs[r / 10][r % 10];
            (0.3 * t).sin() + noise.sample(&mut rng)
        });
        let p = KernelParams {
            num_units: 3,
            num_latent: 1,
            lengthscales: vec![1.5],
            kernel_widths: DMatrix::from_element(3, 1, 0.8),
            kernel_scales: DMatrix::from_fn(3, 1, |_, _| rng.random_range(0.5..1.5)),
            noise_sd: 0.25,
        };
        // 25 equally spaced points contain the 5 equally spaced ones.
        let z5 = default_pseudo_inputs(&inputs, 5);
        let z25 = default_pseudo_inputs(&inputs, 25);
        for zi in &z5 {
            assert!(z25.iter().any(|zj| (zi - zj).abs() < 1e-12));
        }
        let g5 = build_grams(&inputs, &z5, &p, 1e-6).unwrap();
        let g25 = build_grams(&inputs, &z25, &p, 1e-6).unwrap();
        let (l5, pe5) = gaussian_elbo_terms(&y, &g5, p.noise_sd).unwrap();
        let (l25, pe25) = gaussian_elbo_terms(&y, &g25, p.noise_sd).unwrap();
        assert!(
            l25 + pe25 >= l5 + pe5 - 1e-6,
            "refinement decreased bound: {} -> {}",
            l5 + pe5,
            l25 + pe25
        );
    }
}
