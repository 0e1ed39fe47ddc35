//! Penalized cubic B-spline smoother with generalized cross-validation.
//!
//! Fits coefficients of a clamped cubic B-spline basis by minimizing
//! `||y - B c||^2 + lambda ||D2 c||^2` where `D2` takes second differences
//! of the coefficients. The penalty weight is selected by GCV over a
//! log-spaced grid. Evaluation outside the fitted domain clamps to the
//! nearest endpoint, so the extrapolated derivative is the boundary value.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;
/// Number of penalty weights tried during GCV selection.
const GCV_GRID: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingSpline {
    knots: Vec<f64>,
    coefficients: Vec<f64>,
}

impl SmoothingSpline {
    /// Fit to `(x, y)` pairs with GCV-selected smoothing. `x` must be
    /// non-decreasing with at least two distinct values.
    pub fn fit_gcv(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidInput("spline x/y length mismatch".into()));
        }
        if x.len() < 2 {
            return Err(Error::InvalidInput("spline fit needs at least 2 points".into()));
        }
        let (lo, hi) = (x[0], x[x.len() - 1]);
        if !(hi > lo) {
            return Err(Error::InvalidInput("spline fit needs a non-degenerate x range".into()));
        }

        let interior = (x.len() / 2).clamp(1, 20);
        let knots = clamped_knots(lo, hi, interior);
        let p = knots.len() - DEGREE - 1;
        let n = x.len();

        let mut design = DMatrix::zeros(n, p);
        for (r, &xr) in x.iter().enumerate() {
            let (first, vals) = basis_values(&knots, xr);
            for (j, &v) in vals.iter().enumerate() {
                design[(r, first + j)] = v;
            }
        }
        let bt_b = design.transpose() * &design;
        let bt_y = design.transpose() * DVector::from_column_slice(y);

        // Second-difference penalty on the coefficients.
        let mut penalty: DMatrix<f64> = DMatrix::zeros(p, p);
        for r in 0..p.saturating_sub(2) {
            for (ca, wa) in [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)] {
                for (cb, wb) in [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)] {
                    penalty[(ca, cb)] += wa * wb;
                }
            }
        }

        let scale = bt_b.trace() / penalty.trace().max(1e-12);
        let mut best: Option<(f64, DVector<f64>)> = None;
        for g in 0..GCV_GRID {
            let exponent = -6.0 + 12.0 * g as f64 / (GCV_GRID - 1) as f64;
            let lambda = scale * 10f64.powf(exponent);
            let mut m = &bt_b + &penalty * lambda;
            for d in 0..p {
                m[(d, d)] += 1e-10 * scale.max(1.0);
            }
            let Some(chol) = Cholesky::new(m) else { continue };
            let coef = chol.solve(&bt_y);
            let fitted = &design * &coef;
            let rss: f64 = fitted
                .iter()
                .zip(y)
                .map(|(f, yy)| (f - yy) * (f - yy))
                .sum();
            let edf = chol.solve(&bt_b).trace();
            let dof = n as f64 - edf;
            if dof <= 1e-6 {
                continue;
            }
            let gcv = n as f64 * rss / (dof * dof);
            if best.as_ref().map_or(true, |(b, _)| gcv < *b) {
                best = Some((gcv, coef));
            }
        }
        let (_, coef) = best.ok_or(Error::Numerical {
            component: "smoothing_spline",
            message: "no GCV candidate produced a solvable system".into(),
        })?;
        Ok(SmoothingSpline {
            knots,
            coefficients: coef.iter().copied().collect(),
        })
    }

    pub fn from_parts(knots: Vec<f64>, coefficients: Vec<f64>) -> Result<Self> {
        if knots.len() != coefficients.len() + DEGREE + 1 {
            return Err(Error::InvalidInput(format!(
                "spline with {} knots needs {} coefficients, got {}",
                knots.len(),
                knots.len() - DEGREE - 1,
                coefficients.len()
            )));
        }
        Ok(SmoothingSpline { knots, coefficients })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[DEGREE], self.knots[self.knots.len() - DEGREE - 1])
    }

    pub fn value(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        let x = t.clamp(lo, hi);
        let (first, vals) = basis_values(&self.knots, x);
        vals.iter()
            .enumerate()
            .map(|(j, v)| v * self.coefficients[first + j])
            .sum()
    }

    /// First derivative; constant beyond the fitted domain.
    pub fn derivative(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        let x = t.clamp(lo, hi);
        let span = find_span(&self.knots, x);
        // S'(x) = sum_j d_j B_{j,2}(x) with differenced coefficients d_j.
        let vals = basis_funs(&self.knots, span, x, DEGREE - 1);
        let mut acc = 0.0;
        for (offset, &v) in vals.iter().enumerate() {
            let j = span - (DEGREE - 1) + offset;
            let denom = self.knots[j + DEGREE] - self.knots[j];
            if denom > 0.0 {
                let d = DEGREE as f64 * (self.coefficients[j] - self.coefficients[j - 1]) / denom;
                acc += d * v;
            }
        }
        acc
    }
}

fn clamped_knots(lo: f64, hi: f64, interior: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(interior + 2 * (DEGREE + 1));
    knots.extend(std::iter::repeat(lo).take(DEGREE + 1));
    for i in 1..=interior {
        knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
    knots
}

/// Index of the knot span containing `x` (clamped into the domain).
fn find_span(knots: &[f64], x: f64) -> usize {
    let p = knots.len() - DEGREE - 1;
    if x >= knots[p] {
        return p - 1;
    }
    let mut lo = DEGREE;
    let mut hi = p;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `degree + 1` non-vanishing basis functions at `x` in `span`.
fn basis_funs(knots: &[f64], span: usize, x: f64, degree: usize) -> Vec<f64> {
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = vals[r] / (right[r + 1] + left[j - r]);
            vals[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        vals[j] = saved;
    }
    vals
}

/// Cubic basis values at `x`: returns the first non-zero index and the four
/// consecutive values.
fn basis_values(knots: &[f64], x: f64) -> (usize, Vec<f64>) {
    let span = find_span(knots, x);
    (span - DEGREE, basis_funs(knots, span, x, DEGREE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_linear_trend_exactly() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&t| 0.7 * t + 2.0).collect();
        let s = SmoothingSpline::fit_gcv(&x, &y).unwrap();
        for t in [0.0, 3.3, 14.0, 29.0] {
            assert_relative_eq!(s.value(t), 0.7 * t + 2.0, epsilon = 1e-5);
            assert_relative_eq!(s.derivative(t), 0.7, max_relative = 1e-4);
        }
    }

    #[test]
    fn smooths_noisy_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let x: Vec<f64> = (0..60).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&t| 0.1 * t * t + noise.sample(&mut rng))
            .collect();
        let s = SmoothingSpline::fit_gcv(&x, &y).unwrap();
        for t in [2.0, 5.0, 9.0] {
            assert!((s.value(t) - 0.1 * t * t).abs() < 0.1);
            assert!((s.derivative(t) - 0.2 * t).abs() < 0.15);
        }
    }

    #[test]
    fn constant_extrapolation_outside_domain() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&t| 1.5 * t).collect();
        let s = SmoothingSpline::fit_gcv(&x, &y).unwrap();
        assert_relative_eq!(s.value(25.0), s.value(19.0), epsilon = 1e-12);
        assert_relative_eq!(s.derivative(25.0), s.derivative(19.0), epsilon = 1e-12);
        assert_relative_eq!(s.value(-3.0), s.value(0.0), epsilon = 1e-12);
    }

    #[test]
    fn partition_of_unity() {
        let knots = clamped_knots(0.0, 10.0, 7);
        for x in [0.0, 0.01, 3.7, 5.0, 9.99, 10.0] {
            let (_, vals) = basis_values(&knots, x);
            let sum: f64 = vals.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(SmoothingSpline::fit_gcv(&[1.0], &[2.0]).is_err());
        assert!(SmoothingSpline::fit_gcv(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(SmoothingSpline::fit_gcv(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn parts_round_trip() {
        let x: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&t| t.sin()).collect();
        let s = SmoothingSpline::fit_gcv(&x, &y).unwrap();
        let rebuilt =
            SmoothingSpline::from_parts(s.knots().to_vec(), s.coefficients().to_vec()).unwrap();
        assert_eq!(rebuilt.value(7.3), s.value(7.3));
        assert!(SmoothingSpline::from_parts(vec![0.0; 9], vec![0.0; 3]).is_err());
    }
}
