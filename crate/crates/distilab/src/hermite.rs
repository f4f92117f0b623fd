//! Probabilists' Hermite polynomials and the Hermite expansion of the ReLU.
//!
//! `He_k` is normalized so that `E[He_j(x) He_k(x)] = k! delta_jk` under the
//! standard Gaussian. The ReLU expands as `max(0,x) = sum_k c_k/k! He_k(x)`
//! with closed-form coefficients `c_k`.

/// Probabilists' Hermite polynomial `He_k(x)`, via the three-term recurrence
/// `He_{k+1}(x) = x He_k(x) - k He_{k-1}(x)`.
pub fn hermite1d(k: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = x;
    for n in 1..k {
        let next = x * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Hermite coefficient `c_k` of the ReLU: `c_0 = 1/sqrt(2 pi)`, `c_1 = 1/2`,
/// `c_{2m} = (-1)^{m-1} (2m)! / (m! 2^m (2m-1)) / sqrt(2 pi)` for m >= 1, and
/// zero for odd k >= 3.
pub fn relu_hermite_coeff(k: usize) -> f64 {
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    match k {
        0 => inv_sqrt_2pi,
        1 => 0.5,
        _ if k % 2 == 1 => 0.0,
        _ => {
            let m = k / 2;
            let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
            let mut ratio = 1.0; // (2m)! / (m! 2^m) = (2m-1)!!
            for i in 0..m {
                ratio *= (2 * i + 1) as f64;
            }
            sign * ratio / (k as f64 - 1.0) * inv_sqrt_2pi
        }
    }
}

/// Table of ReLU Hermite coefficients up to a maximum order.
#[derive(Debug, Clone)]
pub struct HermiteCoeffsRelu {
    max_order: usize,
    c: Vec<f64>,
}

impl HermiteCoeffsRelu {
    pub fn new(max_order: usize) -> Self {
        let c = (0..=max_order).map(relu_hermite_coeff).collect();
        HermiteCoeffsRelu { max_order, c }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// `c_k`, for k up to the table's maximum order.
    pub fn coeff(&self, k: usize) -> f64 {
        self.c[k]
    }

    /// Partial sum `sum_{k<=K} c_k/k! He_k(x)` of the ReLU expansion.
    pub fn partial_sum(&self, max_k: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        let mut fact = 1.0;
        for k in 0..=max_k.min(self.max_order) {
            if k > 0 {
                fact *= k as f64;
            }
            acc += self.c[k] / fact * hermite1d(k, x);
        }
        acc
    }
}
