//! Dense k-tensor algebra: symmetrization, tensor action, entrywise map
//! action, and outer powers.
//!
//! Tensors are stored flat in row-major order over a single dimension `d`,
//! so an order-k tensor holds `d^k` entries. The pipeline only needs k <= 4
//! at desk scale, which keeps dense storage cheap and the code simple.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    /// Flat value buffer does not hold exactly dim^order entries.
    #[error("expected {expected} values for order {order} over dim {dim}, got {got}")]
    BadLength {
        order: usize,
        dim: usize,
        expected: usize,
        got: usize,
    },
    /// Two tensors that must share a dimension do not.
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    /// Contraction order exceeds the order of the contracted tensor.
    #[error("cannot contract {l} trailing indices of an order-{k} tensor")]
    OrderMismatch { k: usize, l: usize },
}

/// Dense tensor of a fixed order over one dimension, flat row-major storage.
///
/// The order-0 tensor is a scalar (one entry). Entry `(i_1, ..., i_k)` lives
/// at flat offset `i_1 * d^{k-1} + ... + i_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    order: usize,
    dim: usize,
    values: Vec<f64>,
}

fn pow_len(dim: usize, order: usize) -> usize {
    dim.checked_pow(order as u32)
        .expect("tensor size overflows usize")
}

impl DenseTensor {
    /// All-zero tensor of the given order and dimension.
    pub fn zeros(order: usize, dim: usize) -> Self {
        assert!(dim > 0, "tensor dimension must be positive");
        DenseTensor {
            order,
            dim,
            values: vec![0.0; pow_len(dim, order)],
        }
    }

    /// Wraps a flat row-major buffer, checking its length.
    pub fn from_values(order: usize, dim: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected = pow_len(dim, order);
        if values.len() != expected {
            return Err(TensorError::BadLength {
                order,
                dim,
                expected,
                got: values.len(),
            });
        }
        Ok(DenseTensor { order, dim, values })
    }

    /// Order-0 tensor holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        DenseTensor {
            order: 0,
            dim: 1,
            values: vec![v],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The single entry of an order-0 tensor.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.order, 0, "as_scalar on tensor of order {}", self.order);
        self.values[0]
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        let mut flat = 0;
        for &i in idx {
            debug_assert!(i < self.dim);
            flat = flat * self.dim + i;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = self.flat_index(idx);
        self.values[flat] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        DenseTensor {
            order: self.order,
            dim: self.dim,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Entrywise sum of two tensors of identical shape.
    pub fn add(&self, other: &DenseTensor) -> Result<Self, TensorError> {
        if self.dim != other.dim {
            return Err(TensorError::DimMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        if self.order != other.order {
            return Err(TensorError::OrderMismatch {
                k: self.order,
                l: other.order,
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseTensor {
            order: self.order,
            dim: self.dim,
            values,
        })
    }

    /// Order-1 tensor viewed as a column vector.
    pub fn to_vector(&self) -> DVector<f64> {
        assert_eq!(self.order, 1, "to_vector on tensor of order {}", self.order);
        DVector::from_column_slice(&self.values)
    }

    /// Order-2 tensor viewed as a square matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        assert_eq!(self.order, 2, "to_matrix on tensor of order {}", self.order);
        DMatrix::from_row_slice(self.dim, self.dim, &self.values)
    }
}

/// Symmetrization: averages the tensor over all permutations of its indices.
///
/// Idempotent, and never increases the Frobenius norm.
pub fn sym(t: &DenseTensor) -> DenseTensor {
    let k = t.order();
    if k <= 1 {
        return t.clone();
    }
    let d = t.dim();
    let perms: Vec<Vec<usize>> = (0..k).permutations(k).collect();
    let scale = 1.0 / perms.len() as f64;
    let mut out = DenseTensor::zeros(k, d);
    let mut idx = vec![0usize; k];
    let mut permuted = vec![0usize; k];
    for flat in 0..out.values.len() {
        let mut rem = flat;
        for pos in (0..k).rev() {
            idx[pos] = rem % d;
            rem /= d;
        }
        let mut acc = 0.0;
        for perm in &perms {
            for (pos, &src) in perm.iter().enumerate() {
                permuted[pos] = idx[src];
            }
            acc += t.get(&permuted);
        }
        out.values[flat] = acc * scale;
    }
    out
}

/// Tensor action `A(B)`: contracts the trailing `B.order()` indices of `A`
/// against `B`, producing a tensor of order `A.order() - B.order()`.
///
/// For equal orders this is the Frobenius inner product (returned as an
/// order-0 tensor).
pub fn tensor_action(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, TensorError> {
    let (k, l) = (a.order(), b.order());
    if l > k {
        return Err(TensorError::OrderMismatch { k, l });
    }
    if l > 0 && a.dim() != b.dim() {
        return Err(TensorError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let block = b.values.len();
    let out_order = k - l;
    let out_dim = if out_order == 0 { 1 } else { a.dim() };
    let mut out = DenseTensor {
        order: out_order,
        dim: out_dim,
        values: vec![0.0; pow_len(a.dim(), out_order).max(1)],
    };
    if out_order == 0 {
        out.dim = 1;
        out.values = vec![0.0];
    }
    for (i, chunk) in a.values.chunks(block).enumerate() {
        out.values[i] = chunk.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    }
    Ok(out)
}

/// Map action `M^{circle k}`: applies the matrix `M` (d x r) to every index of
/// an order-k tensor over r, producing an order-k tensor over d.
///
/// For orthonormal columns (`M^T M = I_r`) the Frobenius norm is preserved.
pub fn map_action(m: &DMatrix<f64>, t: &DenseTensor) -> Result<DenseTensor, TensorError> {
    let (d, r) = (m.nrows(), m.ncols());
    if t.dim() != r {
        return Err(TensorError::DimMismatch {
            left: r,
            right: t.dim(),
        });
    }
    let k = t.order();
    if k == 0 {
        return Ok(t.clone());
    }
    // One mode at a time: after transforming the leading `done` modes the
    // buffer has shape d^done x r^(k-done), stored row-major.
    let mut values = t.values().to_vec();
    let mut lead = 1usize;
    let mut trail = pow_len(r, k - 1);
    for _done in 0..k {
        let mut next = vec![0.0; lead * d * trail];
        for a in 0..lead {
            for j in 0..r {
                let src_base = (a * r + j) * trail;
                for i in 0..d {
                    let m_ij = m[(i, j)];
                    if m_ij == 0.0 {
                        continue;
                    }
                    let dst_base = (a * d + i) * trail;
                    for b in 0..trail {
                        next[dst_base + b] += m_ij * values[src_base + b];
                    }
                }
            }
        }
        values = next;
        lead *= d;
        trail = if trail >= r && r > 0 { trail / r } else { 1 };
    }
    DenseTensor::from_values(k, d, values)
}

/// Outer power `v^{circle k}`, the symmetric tensor with entries
/// `v_{i1} * ... * v_{ik}`. `k = 0` yields the scalar 1.
pub fn outer_power(v: &DVector<f64>, k: usize) -> DenseTensor {
    let d = v.len();
    if k == 0 {
        return DenseTensor::scalar(1.0);
    }
    let mut values = vec![1.0];
    for _ in 0..k {
        let mut next = Vec::with_capacity(values.len() * d);
        for &p in &values {
            for i in 0..d {
                next.push(p * v[i]);
            }
        }
        values = next;
    }
    DenseTensor::from_values(k, d, values).expect("outer power length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(order: usize, dim: usize, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..pow_len(dim, order))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        DenseTensor::from_values(order, dim, values).unwrap()
    }

    #[test]
    fn sym_of_strictly_upper_matrix_averages_with_transpose() {
        let t = DenseTensor::from_values(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = sym(&t);
        assert_eq!(s.values(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn sym_fixes_symmetric_tensors() {
        let v = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        let t = outer_power(&v, 3);
        let s = sym(&t);
        for (a, b) in t.values().iter().zip(s.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn sym_matches_brute_force_permutation_average_for_3_tensor() {
        let t = random_tensor(3, 2, 7);
        let s = sym(&t);
        // All six permutations of three indices, written out.
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let idx = [i, j, k];
                    let mut acc = 0.0;
                    for p in &perms {
                        acc += t.get(&[idx[p[0]], idx[p[1]], idx[p[2]]]);
                    }
                    assert_abs_diff_eq!(s.get(&idx), acc / 6.0, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn tensor_action_on_vector_is_matrix_vector_product() {
        let a = DenseTensor::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = DenseTensor::from_values(1, 2, vec![5.0, 6.0]).unwrap();
        let out = tensor_action(&a, &v).unwrap();
        assert_eq!(out.values(), &[17.0, 39.0]);
    }

    #[test]
    fn full_contraction_is_squared_frobenius_norm() {
        let t = random_tensor(3, 3, 11);
        let out = tensor_action(&t, &t).unwrap();
        assert_abs_diff_eq!(
            out.as_scalar(),
            t.frobenius_norm().powi(2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_tensor_sees_only_the_symmetric_part_of_its_argument() {
        let c = sym(&random_tensor(3, 2, 3));
        let b = random_tensor(2, 2, 5);
        let direct = tensor_action(&c, &b).unwrap();
        let symmetrized = tensor_action(&c, &sym(&b)).unwrap();
        for (x, y) in direct.values().iter().zip(symmetrized.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn tensor_action_rejects_mismatched_dimensions() {
        let a = random_tensor(2, 3, 1);
        let b = random_tensor(1, 2, 2);
        assert_eq!(
            tensor_action(&a, &b),
            Err(TensorError::DimMismatch { left: 3, right: 2 })
        );
    }

    #[test]
    fn map_action_by_identity_is_identity() {
        let t = random_tensor(3, 3, 13);
        let id = DMatrix::<f64>::identity(3, 3);
        let out = map_action(&id, &t).unwrap();
        for (x, y) in t.values().iter().zip(out.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn map_action_on_order_1_is_matrix_vector_product() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, -1.0, 4.0, 0.5]);
        let t = DenseTensor::from_values(1, 2, vec![2.0, 3.0]).unwrap();
        let out = map_action(&m, &t).unwrap();
        let expected = &m * DVector::from_vec(vec![2.0, 3.0]);
        for i in 0..3 {
            assert_abs_diff_eq!(out.values()[i], expected[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn orthonormal_map_preserves_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let qr = g.qr();
        let q = qr.q();
        let t = random_tensor(3, 3, 17);
        let out = map_action(&q, &t).unwrap();
        assert_abs_diff_eq!(
            out.frobenius_norm(),
            t.frobenius_norm(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn outer_power_of_basis_vector_hits_single_entry() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let t = outer_power(&e1, 2);
        assert_eq!(t.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn outer_power_order_one_is_the_vector() {
        let v = DVector::from_vec(vec![0.5, -2.0, 3.0]);
        let t = outer_power(&v, 1);
        assert_eq!(t.values(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn outer_power_entry_is_coordinate_product() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let t = outer_power(&v, 3);
        assert_abs_diff_eq!(t.get(&[1, 1, 0]), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn from_values_rejects_wrong_length() {
        assert!(matches!(
            DenseTensor::from_values(2, 3, vec![0.0; 8]),
            Err(TensorError::BadLength { expected: 9, .. })
        ));
    }

    proptest! {
        #[test]
        fn sym_is_idempotent(seed in 0u64..1000, order in 1usize..=4, dim in 1usize..=4) {
            let t = random_tensor(order, dim, seed);
            let once = sym(&t);
            let twice = sym(&once);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn sym_never_increases_frobenius_norm(seed in 0u64..1000, order in 1usize..=4, dim in 1usize..=4) {
            let t = random_tensor(order, dim, seed);
            prop_assert!(sym(&t).frobenius_norm() <= t.frobenius_norm() + 1e-12);
        }

        #[test]
        fn orthonormal_map_action_is_an_isometry(seed in 0u64..1000, order in 1usize..=3, r in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let d = r + 2;
            let g = DMatrix::from_fn(d, r, |_, _| rng.gen_range(-1.0..1.0));
            let q = g.qr().q();
            let t = random_tensor(order, r, seed);
            let out = map_action(&q, &t).unwrap();
            prop_assert!((out.frobenius_norm() - t.frobenius_norm()).abs() <= 1e-12);
        }
    }
}
