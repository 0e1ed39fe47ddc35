//! Covariance functions of the convolution process and Gram-matrix assembly.
//!
//! Each unit's signal is a latent Gaussian process built by convolving shared
//! latent functions (squared-exponential covariance, unit amplitude) with a
//! per-unit scaled Gaussian smoothing kernel. The convolutions integrate in
//! closed form, giving Gaussian-shaped cross covariances between any two unit
//! signals and between a signal and a latent function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// All convolution-process hyperparameters plus the observation noise level.
///
/// Shapes: `lengthscales` has one entry per latent function;
/// `kernel_widths` and `kernel_scales` are `num_units x num_latent`.
#[derive(Debug, Clone)]
pub struct KernelParams {
    pub num_units: usize,
    pub num_latent: usize,
    pub lengthscales: Vec<f64>,
    pub kernel_widths: DMatrix<f64>,
    pub kernel_scales: DMatrix<f64>,
    pub noise_sd: f64,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.len() != self.num_latent {
            return Err(Error::InvalidParameter(format!(
                "expected {} lengthscales, got {}",
                self.num_latent,
                self.lengthscales.len()
            )));
        }
        for (which, m) in [("kernel_widths", &self.kernel_widths), ("kernel_scales", &self.kernel_scales)] {
            if m.nrows() != self.num_units || m.ncols() != self.num_latent {
                return Err(Error::InvalidParameter(format!(
                    "{which} must be {}x{}, got {}x{}",
                    self.num_units,
                    self.num_latent,
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(
                "lengthscales must be positive and finite".into(),
            ));
        }
        if self.kernel_widths.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "kernel widths must be positive and finite".into(),
            ));
        }
        if self.kernel_scales.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("kernel scales must be finite".into()));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidParameter(
                "noise standard deviation must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn check_unit(&self, i: usize) -> Result<()> {
        if i >= self.num_units {
            Err(Error::IndexOutOfRange(format!(
                "unit {i} (have {} units)",
                self.num_units
            )))
        } else {
            Ok(())
        }
    }

    fn check_latent(&self, k: usize) -> Result<()> {
        if k >= self.num_latent {
            Err(Error::IndexOutOfRange(format!(
                "latent function {k} (have {})",
                self.num_latent
            )))
        } else {
            Ok(())
        }
    }

    /// Combined squared scale for a signal/signal pair under latent `k`.
    pub(crate) fn eta2_pair(&self, i: usize, j: usize, k: usize) -> f64 {
        let xi_i = self.kernel_widths[(i, k)];
        let xi_j = self.kernel_widths[(j, k)];
        let l = self.lengthscales[k];
        xi_i * xi_i + xi_j * xi_j + l * l
    }

    /// Combined squared scale for a signal/latent pair under latent `k`.
    pub(crate) fn eta2_latent(&self, i: usize, k: usize) -> f64 {
        let xi = self.kernel_widths[(i, k)];
        let l = self.lengthscales[k];
        xi * xi + l * l
    }
}

/// Gram matrices of the sparse approximation.
///
/// `k_xx` is block-diagonal with one `M x M` block per latent function;
/// `q = k_fx k_xx^{-1} k_xf` is the reduced-rank surrogate of `k_ff`.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub k_ff: DMatrix<f64>,
    pub k_fx: DMatrix<f64>,
    pub k_xx: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// Squared-exponential covariance of a latent function.
pub fn latent_cov(t: f64, t_prime: f64, lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) || !lengthscale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lengthscale must be positive, got {lengthscale}"
        )));
    }
    let d = t - t_prime;
    Ok((-0.5 * d * d / (lengthscale * lengthscale)).exp())
}

/// Covariance between the signals of units `i` and `j` at times `t`, `t_prime`.
pub fn cross_cov_ff(i: usize, j: usize, t: f64, t_prime: f64, p: &KernelParams) -> Result<f64> {
    p.check_unit(i)?;
    p.check_unit(j)?;
    Ok(cross_cov_ff_unchecked(i, j, t, t_prime, p))
}

pub(crate) fn cross_cov_ff_unchecked(i: usize, j: usize, t: f64, t_prime: f64, p: &KernelParams) -> f64 {
    let d = t - t_prime;
    let mut acc = 0.0;
    for k in 0..p.num_latent {
        let l = p.lengthscales[k];
        let eta2 = p.eta2_pair(i, j, k);
        let scale = p.kernel_scales[(i, k)] * p.kernel_scales[(j, k)];
        acc += scale * (l * l / eta2).sqrt() * (-0.5 * d * d / eta2).exp();
    }
    acc
}

/// Covariance between unit `i`'s signal at `t` and latent function `k` at `u`.
pub fn cross_cov_fx(i: usize, k: usize, t: f64, u: f64, p: &KernelParams) -> Result<f64> {
    p.check_unit(i)?;
    p.check_latent(k)?;
    Ok(cross_cov_fx_unchecked(i, k, t, u, p))
}

pub(crate) fn cross_cov_fx_unchecked(i: usize, k: usize, t: f64, u: f64, p: &KernelParams) -> f64 {
    let l = p.lengthscales[k];
    let eta2 = p.eta2_latent(i, k);
    let d = t - u;
    p.kernel_scales[(i, k)] * (l * l / eta2).sqrt() * (-0.5 * d * d / eta2).exp()
}

/// Zero-lag signal variance of unit `i` (before observation noise).
pub fn signal_prior_variance(i: usize, p: &KernelParams) -> Result<f64> {
    p.check_unit(i)?;
    Ok(signal_prior_variance_unchecked(i, p))
}

pub(crate) fn signal_prior_variance_unchecked(i: usize, p: &KernelParams) -> f64 {
    cross_cov_ff_unchecked(i, i, 0.0, 0.0, p)
}

/// Stack per-unit time vectors into `(unit, time)` rows.
pub(crate) fn stack_inputs(inputs: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut rows = Vec::with_capacity(inputs.iter().map(Vec::len).sum());
    for (i, ts) in inputs.iter().enumerate() {
        for &t in ts {
            rows.push((i, t));
        }
    }
    rows
}

/// Signal/latent cross Gram over stacked rows; columns are ordered latent-major
/// (block `k` holds pseudo-input columns `k*M .. (k+1)*M`).
pub(crate) fn build_cross_gram(
    rows: &[(usize, f64)],
    pseudo_inputs: &[f64],
    p: &KernelParams,
) -> DMatrix<f64> {
    let m = pseudo_inputs.len();
    DMatrix::from_fn(rows.len(), p.num_latent * m, |r, c| {
        let (i, t) = rows[r];
        let k = c / m;
        cross_cov_fx_unchecked(i, k, t, pseudo_inputs[c % m], p)
    })
}

/// One row of the signal/latent cross Gram: unit `i` at time `t` against all
/// latent blocks over the pseudo-inputs.
pub(crate) fn cross_gram_row(
    i: usize,
    t: f64,
    pseudo_inputs: &[f64],
    p: &KernelParams,
) -> DVector<f64> {
    let m = pseudo_inputs.len();
    DVector::from_fn(p.num_latent * m, |c, _| {
        cross_cov_fx_unchecked(i, c / m, t, pseudo_inputs[c % m], p)
    })
}

/// Block-diagonal latent Gram over the pseudo-inputs (no jitter).
pub(crate) fn build_latent_gram(pseudo_inputs: &[f64], p: &KernelParams) -> DMatrix<f64> {
    let m = pseudo_inputs.len();
    let size = p.num_latent * m;
    let mut k_xx = DMatrix::zeros(size, size);
    for k in 0..p.num_latent {
        let l = p.lengthscales[k];
        for a in 0..m {
            for b in 0..m {
                let d = pseudo_inputs[a] - pseudo_inputs[b];
                k_xx[(k * m + a, k * m + b)] = (-0.5 * d * d / (l * l)).exp();
            }
        }
    }
    k_xx
}

/// Full signal/signal Gram over stacked rows (no jitter).
pub(crate) fn build_output_gram(rows: &[(usize, f64)], p: &KernelParams) -> DMatrix<f64> {
    let n = rows.len();
    let mut k_ff = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            let (i, t) = rows[r];
            let (j, t2) = rows[c];
            let v = cross_cov_ff_unchecked(i, j, t, t2, p);
            k_ff[(r, c)] = v;
            k_ff[(c, r)] = v;
        }
    }
    k_ff
}

/// Zero-lag signal variances along stacked rows (no jitter).
pub(crate) fn build_output_diag(rows: &[(usize, f64)], p: &KernelParams) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| signal_prior_variance_unchecked(rows[r].0, p))
}

/// Maximum diagonal jitter tried before giving up on a factorization.
pub(crate) const MAX_JITTER: f64 = 1e-2;

/// Cholesky with jitter escalation (x10 per retry up to [`MAX_JITTER`]).
/// Returns the factorization and the jitter actually applied.
pub(crate) fn cholesky_with_escalation(
    mat: &DMatrix<f64>,
    base_jitter: f64,
    name: &'static str,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let mut jitter = base_jitter.max(0.0);
    loop {
        let mut attempt = mat.clone();
        for d in 0..attempt.nrows() {
            attempt[(d, d)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(attempt) {
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(Error::Factorization { matrix: name, jitter });
        }
    }
}

/// Assemble all four Gram matrices.
///
/// Jitter is added to the diagonals of `k_xx` and `k_ff`; the `k_xx` jitter
/// escalates x10 (up to 1e-2) until its Cholesky factorization succeeds.
/// `q` is formed from the triangular factor, never from an explicit inverse.
pub fn build_grams(
    inputs: &[Vec<f64>],
    pseudo_inputs: &[f64],
    p: &KernelParams,
    jitter: f64,
) -> Result<GramSet> {
    p.validate()?;
    if pseudo_inputs.is_empty() {
        return Err(Error::InvalidInput("need at least one pseudo-input".into()));
    }
    if inputs.len() != p.num_units {
        return Err(Error::InvalidInput(format!(
            "expected {} per-unit time vectors, got {}",
            p.num_units,
            inputs.len()
        )));
    }
    if inputs.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("every unit needs at least one input time".into()));
    }

    let rows = stack_inputs(inputs);
    let k_fx = build_cross_gram(&rows, pseudo_inputs, p);
    let mut k_ff = build_output_gram(&rows, p);
    for d in 0..k_ff.nrows() {
        k_ff[(d, d)] += jitter;
    }

    let k_xx_raw = build_latent_gram(pseudo_inputs, p);
    let (chol, used) = cholesky_with_escalation(&k_xx_raw, jitter, "k_xx")?;
    let mut k_xx = k_xx_raw;
    for d in 0..k_xx.nrows() {
        k_xx[(d, d)] += used;
    }

    // q = (L^{-1} k_xf)' (L^{-1} k_xf)
    let half = chol
        .l()
        .solve_lower_triangular(&k_fx.transpose())
        .ok_or(Error::Factorization { matrix: "k_xx", jitter: used })?;
    let q = half.transpose() * &half;

    Ok(GramSet { k_ff, k_fx, k_xx, q })
}

/// Default pseudo-input grid: `m` equally spaced points spanning the inputs.
pub fn default_pseudo_inputs(inputs: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ts in inputs {
        for &t in ts {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    if m == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..m)
        .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
        .collect()
}
