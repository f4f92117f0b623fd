//! Weighted quadrature against the sphere-slice density, plus even moments of
//! sphere coordinates.
//!
//! For `w` uniform on the unit sphere in dimension `d` and any unit vector
//! `u`, the overlap `t = <w, u>` has density
//! `f_d(t) = Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2)) (1-t^2)^{(d-3)/2}` on
//! (-1, 1). A [`QuadratureRule`] folds `f_d` into fixed Gauss-Legendre
//! weights so the weighted integrals `I_{p1,p2}[i]` reduce to dot products.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuadratureError {
    /// The overlap density is only used for ambient dimension >= 3.
    #[error("sphere-slice density needs d >= 3, got {0}")]
    DimensionTooSmall(usize),
    #[error("node count must be positive")]
    NoNodes,
}

/// Default Gauss-Legendre node count; enough for polynomial integrands times
/// smooth density powers at every dimension used in the pipeline.
pub const DEFAULT_NODES: usize = 400;

/// Gauss-Legendre nodes and weights on (-1, 1), nodes ascending.
///
/// Newton iteration on the Legendre recurrence; weights are
/// `2 / ((1 - x^2) P_n'(x)^2)`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi's initial guess for the i-th root from the upper end.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
        nodes[i] = -x;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_with_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Log of the overlap-density normalizer
/// `Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2))`.
pub fn log_density_normalizer(d: usize) -> f64 {
    let d = d as f64;
    ln_gamma(d / 2.0) - ln_gamma((d - 1.0) / 2.0) - 0.5 * std::f64::consts::PI.ln()
}

/// Fixed quadrature nodes on (-1, 1) with the overlap density `f_d` folded
/// into the weights, so that `sum_i w_i g(t_i)` approximates `E_t[g(t)]`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    d: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Builds a rule for ambient dimension `d` with `n` Gauss-Legendre nodes.
    ///
    /// Nodes are placed through the substitution `t = cos(theta)`, under which
    /// `f_d(t) dt` becomes `Z_d sin^{d-2}(theta) d(theta)`, analytic in theta
    /// for every `d`; plain nodes in `t` lose accuracy at even `d`, where
    /// `(1-t^2)^{(d-3)/2}` has endpoint branch points. The density is
    /// evaluated in log space, so large `d` does not overflow.
    pub fn new(d: usize, n: usize) -> Result<Self, QuadratureError> {
        if d < 3 {
            return Err(QuadratureError::DimensionTooSmall(d));
        }
        if n == 0 {
            return Err(QuadratureError::NoNodes);
        }
        let (xi, gl_weights) = gauss_legendre(n);
        let log_norm = log_density_normalizer(d);
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        // Walk xi from the top so theta decreases and t = cos(theta) ascends.
        for (&x, &w) in xi.iter().rev().zip(gl_weights.iter().rev()) {
            let theta = std::f64::consts::FRAC_PI_2 * (x + 1.0);
            let log_density = log_norm + (d as f64 - 2.0) * theta.sin().ln();
            nodes.push(theta.cos());
            weights.push(std::f64::consts::FRAC_PI_2 * w * log_density.exp());
        }
        Ok(QuadratureRule { d, nodes, weights })
    }

    /// Rule with [`DEFAULT_NODES`] nodes.
    pub fn with_default_nodes(d: usize) -> Result<Self, QuadratureError> {
        Self::new(d, DEFAULT_NODES)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total weight, which approximates the density mass 1.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Weighted integral `I_{p1,p2}[i] = integral of t^p1 (1-t^2)^p2 i(t) f_d(t)`
/// over (-1, 1), using the rule's folded density weights.
pub fn weighted_integral<F: Fn(f64) -> f64>(
    integrand: F,
    p1: u32,
    p2: u32,
    rule: &QuadratureRule,
) -> f64 {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&t, &w)| {
            let poly = t.powi(p1 as i32) * (1.0 - t * t).powi(p2 as i32);
            w * poly * integrand(t)
        })
        .sum()
}

/// Even coordinate moment `E[z_1^{2k}]` for `z` uniform on the sphere
/// `S^{d-2}`: the ratio of the Gaussian moment `(2k-1)!!` to the chi moment
/// `E[nu^{2k}]` with `nu ~ chi(d-1)`.
pub fn sphere_moment(k: usize, d: usize) -> Result<f64, QuadratureError> {
    if d < 3 {
        return Err(QuadratureError::DimensionTooSmall(d));
    }
    let mut gaussian = 1.0; // (2k-1)!!
    let mut chi = 1.0; // prod_{i<k} (d-1+2i)
    for i in 0..k {
        gaussian *= (2 * i + 1) as f64;
        chi *= (d - 1 + 2 * i) as f64;
    }
    Ok(gaussian / chi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn five_node_gauss_legendre_matches_reference_table() {
        let (nodes, weights) = gauss_legendre(5);
        let expected_nodes = [
            -0.906179845938664,
            -0.538469310105683,
            0.0,
            0.538469310105683,
            0.906179845938664,
        ];
        let expected_weights = [
            0.236926885056189,
            0.478628670499366,
            0.568888888888889,
            0.478628670499366,
            0.236926885056189,
        ];
        for i in 0..5 {
            assert_abs_diff_eq!(nodes[i], expected_nodes[i], epsilon = 1e-13);
            assert_abs_diff_eq!(weights[i], expected_weights[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre(12);
        // Degree up to 2n-1 = 23 is exact; moments of x^k on (-1,1).
        for k in 0..=23usize {
            let quad: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| w * x.powi(k as i32))
                .sum();
            let truth = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            assert_abs_diff_eq!(quad, truth, epsilon = 1e-13);
        }
    }

    #[test]
    fn density_weights_sum_to_one_across_dimensions() {
        for d in [3usize, 4, 5, 8, 10, 50, 64, 256, 1000] {
            let rule = QuadratureRule::with_default_nodes(d).unwrap();
            assert_abs_diff_eq!(rule.total_weight(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn nodes_are_strictly_increasing() {
        let rule = QuadratureRule::new(10, 301).unwrap();
        for pair in rule.nodes().windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn rejects_dimension_below_three() {
        assert_eq!(
            QuadratureRule::new(2, 100).unwrap_err(),
            QuadratureError::DimensionTooSmall(2)
        );
    }

    #[test]
    fn constant_integrand_recovers_density_mass() {
        let rule = QuadratureRule::with_default_nodes(10).unwrap();
        assert_abs_diff_eq!(weighted_integral(|_| 1.0, 0, 0, &rule), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn second_moment_of_overlap_is_one_over_d() {
        for d in [3usize, 10, 64, 256] {
            let rule = QuadratureRule::with_default_nodes(d).unwrap();
            assert_abs_diff_eq!(
                weighted_integral(|_| 1.0, 2, 0, &rule),
                1.0 / d as f64,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn complement_moment_is_one_minus_one_over_d() {
        for d in [3usize, 10, 64] {
            let rule = QuadratureRule::with_default_nodes(d).unwrap();
            assert_abs_diff_eq!(
                weighted_integral(|_| 1.0, 0, 1, &rule),
                1.0 - 1.0 / d as f64,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn polynomial_integrands_hit_tight_tolerance_at_200_nodes() {
        let rule = QuadratureRule::new(10, 200).unwrap();
        // E[t^20] over f_d has the closed form prod (2i-1)/(d+2i-2).
        let mut truth = 1.0;
        for i in 1..=10usize {
            truth *= (2 * i - 1) as f64 / (10 + 2 * i - 2) as f64;
        }
        assert_abs_diff_eq!(weighted_integral(|t| t.powi(10), 10, 0, &rule), truth, epsilon = 1e-8);
    }

    #[test]
    fn sphere_moment_closed_forms() {
        assert_abs_diff_eq!(sphere_moment(1, 10).unwrap(), 1.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sphere_moment(0, 17).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sphere_moment(2, 10).unwrap(), 1.0 / 33.0, epsilon = 1e-15);
        assert_eq!(
            sphere_moment(1, 2).unwrap_err(),
            QuadratureError::DimensionTooSmall(2)
        );
    }

    #[test]
    fn sphere_moment_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [5usize, 10, 50] {
            let n = 200_000usize;
            let mut sums = [0.0f64; 4];
            let mut sq_sums = [0.0f64; 4];
            for _ in 0..n {
                // z uniform on S^{d-2}: normalized Gaussian in d-1 coords.
                let g: Vec<f64> = (0..d - 1).map(|_| rng.sample(StandardNormal)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let z1 = g[0] / norm;
                for (k, (s, q)) in sums.iter_mut().zip(sq_sums.iter_mut()).enumerate() {
                    let p = z1.powi(2 * k as i32);
                    *s += p;
                    *q += p * p;
                }
            }
            for k in 0..=3usize {
                let mean = sums[k] / n as f64;
                let var = (sq_sums[k] / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt();
                let truth = sphere_moment(k, d).unwrap();
                assert!(
                    (mean - truth).abs() <= 5.0 * se + 1e-12,
                    "moment k={k} d={d}: mc {mean} vs {truth} (se {se})"
                );
            }
        }
    }

    #[test]
    fn overlap_times_slope_matches_lifted_curvature_integral() {
        // E_{t~f_d}[t h'(t)] = (1/d) E_{z~f_{d+2}}[h''(z)], checked for the
        // quadratic h(t) = t^2/2 and for softplus with gamma = 8.
        for d in [5usize, 10, 64] {
            let rule_d = QuadratureRule::with_default_nodes(d).unwrap();
            let rule_d2 = QuadratureRule::with_default_nodes(d + 2).unwrap();

            let lhs_quadratic = weighted_integral(|t| t, 1, 0, &rule_d);
            let rhs_quadratic = weighted_integral(|_| 1.0, 0, 0, &rule_d2) / d as f64;
            assert_abs_diff_eq!(lhs_quadratic, rhs_quadratic, epsilon = 1e-8);

            let gamma = 8.0;
            let h1 = |t: f64| 1.0 / (1.0 + (-gamma * t).exp());
            let h2 = |t: f64| {
                let s = h1(t);
                gamma * s * (1.0 - s)
            };
            let lhs_softplus = weighted_integral(h1, 1, 0, &rule_d);
            let rhs_softplus = weighted_integral(h2, 0, 0, &rule_d2) / d as f64;
            assert_abs_diff_eq!(lhs_softplus, rhs_softplus, epsilon = 1e-8);
        }
    }

    #[test]
    fn quadrature_matches_sphere_monte_carlo_for_smooth_integrand() {
        let d = 10usize;
        let rule = QuadratureRule::with_default_nodes(d).unwrap();
        let gamma = 4.0;
        let h1 = |t: f64| 1.0 / (1.0 + (-gamma * t).exp());
        let quad = weighted_integral(h1, 1, 0, &rule);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 400_000usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let t = g[0] / norm;
            let v = t * h1(t);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!(
            (quad - mean).abs() <= 5.0 * se + 1e-10,
            "quad {quad} vs mc {mean} (se {se})"
        );
    }
}
