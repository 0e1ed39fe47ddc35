//! Gauss-Legendre quadrature rules.
//!
//! Nodes are the roots of the Legendre polynomial `P_n`, found by Newton
//! iteration from the Chebyshev-like initial guess; weights follow from
//! `w_i = 2 / ((1 - x_i^2) P'_n(x_i)^2)`. A degree-n rule integrates
//! polynomials up to degree `2n - 1` exactly.

/// A fixed Gauss-Legendre rule on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "quadrature degree must be at least 1");
        let n = degree;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Initial guess for the i-th root (descending order).
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        GaussLegendre { nodes, weights }
    }

    pub fn degree(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate `f` over [a, b]. Returns 0 for empty or inverted intervals.
    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        if b <= a {
            return 0.0;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        half * acc
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn scaled(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        if b <= a {
            return Vec::new();
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (mid + half * x, half * w))
            .collect()
    }
}

/// Evaluate `P_n(x)` and its derivative by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    let d = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, d)
}

/// Node counts used for the two integral families in the model.
#[derive(Debug, Clone)]
pub struct QuadSpec {
    /// Rule for per-unit likelihood integrals.
    pub likelihood: GaussLegendre,
    /// Rule for remaining-life integration.
    pub remaining_life: GaussLegendre,
}

impl QuadSpec {
    pub fn new(likelihood_nodes: usize, remaining_life_nodes: usize) -> Self {
        QuadSpec {
            likelihood: GaussLegendre::new(likelihood_nodes),
            remaining_life: GaussLegendre::new(remaining_life_nodes),
        }
    }
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec::new(32, 64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degree_three_reference_values() {
        let rule = GaussLegendre::new(3);
        let expect_nodes = [0.774_596_669_241_483_4, 0.0, -0.774_596_669_241_483_4];
        let expect_weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        for (got, want) in rule.nodes().iter().zip(expect_nodes) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in rule.weights().iter().zip(expect_weights) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn integrates_high_degree_polynomials_exactly() {
        // Degree n integrates polynomials up to 2n-1 exactly.
        let rule = GaussLegendre::new(8);
        let exact = |p: i32, a: f64, b: f64| (b.powi(p + 1) - a.powi(p + 1)) / (p as f64 + 1.0);
        for p in 0..=15 {
            let got = rule.integrate(-1.3, 2.7, |x| x.powi(p));
            assert_relative_eq!(got, exact(p, -1.3, 2.7), max_relative = 1e-11);
        }
    }

    #[test]
    fn integrates_smooth_exponential() {
        let rule = GaussLegendre::new(32);
        let got = rule.integrate(0.0, 5.0, |x| (-0.7 * x).exp());
        let want = (1.0 - (-3.5f64).exp()) / 0.7;
        assert_relative_eq!(got, want, max_relative = 1e-13);
    }

    #[test]
    fn empty_interval_is_zero() {
        let rule = GaussLegendre::new(4);
        assert_eq!(rule.integrate(2.0, 2.0, |x| x), 0.0);
        assert_eq!(rule.integrate(3.0, 2.0, |x| x), 0.0);
    }
}
