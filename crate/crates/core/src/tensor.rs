//! Dense complex tensors and the multi-mode contraction behind tensor-product
//! grid evaluation.
//!
//! A [`DenseTensor`] is an immutable-shape, row-major array of complex
//! numbers. [`tucker_apply`] contracts a coefficient tensor with one matrix per
//! mode, which is how a separable expansion is evaluated on a product grid
//! without ever forming the full multivariate sum.

use num_complex::Complex64;

use crate::error::TensorError;

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

/// Row-major dense complex tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl DenseTensor {
    /// Builds a tensor, rejecting zero-sized axes, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::LengthMismatch {
                expected: len,
                actual: data.len(),
            });
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&s| s > 0),
            "tensor shape must be non-empty with positive axes"
        );
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![C64::new(0.0, 0.0); len],
        }
    }

    /// Real-valued tensor with zero imaginary parts.
    pub fn from_real(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    /// `n x n` identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = C64::new(1.0, 0.0);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    /// Mutable access to the entries. The shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                assert!(i < s, "index {i} out of bounds for axis of length {s}");
                acc * s + i
            })
    }

    pub fn get(&self, index: &[usize]) -> C64 {
        self.data[self.offset(index)]
    }

    /// Contracts mode `mode` with the `P x N_mode` matrix `m`, replacing that
    /// axis by `P`.
    pub fn mode_contract(&self, mode: usize, m: &DenseTensor) -> Result<DenseTensor, TensorError> {
        if mode >= self.rank() {
            return Err(TensorError::ModeOutOfRange {
                mode,
                rank: self.rank(),
            });
        }
        if m.rank() != 2 || m.shape[1] != self.shape[mode] {
            return Err(TensorError::DimensionMismatch(format!(
                "mode {mode} has length {}, matrix has shape {:?}",
                self.shape[mode], m.shape
            )));
        }
        let rows = m.shape[0];
        let data = kernels::contract_mode(&self.data, &self.shape, mode, &m.data, rows);
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        Ok(DenseTensor { shape, data })
    }

    /// Largest absolute entrywise difference to `other` (shapes must agree).
    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Order in which to contract modes: descending `N_j / P_j`, so the modes that
/// shrink the intermediate the most go first.
pub fn contraction_order(inner: &[usize], outer: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..inner.len()).collect();
    // stable sort keeps ties in axis order, which keeps results reproducible
    order.sort_by(|&a, &b| {
        let ra = inner[a] as f64 / outer[a] as f64;
        let rb = inner[b] as f64 / outer[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Multi-mode contraction `out[p_1..p_d] = sum_k c[k_1..k_d] prod_j F_j[p_j, k_j]`.
///
/// Computed as `d` successive [`DenseTensor::mode_contract`] calls.
pub fn tucker_apply(coeffs: &DenseTensor, factors: &[DenseTensor]) -> Result<DenseTensor, TensorError> {
    if factors.len() != coeffs.rank() {
        return Err(TensorError::DimensionMismatch(format!(
            "{} factors for a rank-{} tensor",
            factors.len(),
            coeffs.rank()
        )));
    }
    for (j, f) in factors.iter().enumerate() {
        if f.rank() != 2 || f.shape[1] != coeffs.shape[j] {
            return Err(TensorError::DimensionMismatch(format!(
                "factor {j} has shape {:?}, expected (_, {})",
                f.shape, coeffs.shape[j]
            )));
        }
    }
    let outer: Vec<usize> = factors.iter().map(|f| f.shape[0]).collect();
    let mut current = coeffs.clone();
    for j in contraction_order(&coeffs.shape, &outer) {
        current = current.mode_contract(j, &factors[j])?;
    }
    Ok(current)
}

/// Raw contraction kernels shared by [`DenseTensor`] and the autodiff tape.
pub(crate) mod kernels {
    use super::C64;
    use matrixmultiply::{zgemm, CGemmOption};

    fn as_raw(s: &[C64]) -> *const [f64; 2] {
        s.as_ptr() as *const [f64; 2]
    }

    fn as_raw_mut(s: &mut [C64]) -> *mut [f64; 2] {
        s.as_mut_ptr() as *mut [f64; 2]
    }

    /// `C (m x n) = A (m x k) B (k x n)` with arbitrary strides, overwriting C
    /// when `accumulate` is false.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[C64],
        rsa: usize,
        csa: usize,
        b: &[C64],
        rsb: usize,
        csb: usize,
        c: &mut [C64],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        let last = |r: usize, rs: usize, cc: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
        if k > 0 {
            assert!(last(m, rsa, k, csa) < a.len(), "gemm: A out of bounds");
            assert!(last(k, rsb, n, csb) < b.len(), "gemm: B out of bounds");
        }
        assert!(last(m, rsc, n, csc) < c.len(), "gemm: C out of bounds");
        let beta = if accumulate { [1.0, 0.0] } else { [0.0, 0.0] };
        // SAFETY: every index touched by the kernel is bounded by the asserts
        // above; A and B are only read, C is exclusively borrowed.
        unsafe {
            zgemm(
                CGemmOption::Standard,
                CGemmOption::Standard,
                m,
                k,
                n,
                [1.0, 0.0],
                as_raw(a),
                rsa as isize,
                csa as isize,
                as_raw(b),
                rsb as isize,
                csb as isize,
                beta,
                as_raw_mut(c),
                rsc as isize,
                csc as isize,
            );
        }
    }

    /// Real `C (m x n) = A (m x k) B (k x n)` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn real_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: usize,
        csa: usize,
        b: &[f64],
        rsb: usize,
        csb: usize,
        c: &mut [f64],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k > 0 {
            assert!((m - 1) * rsa + (k - 1) * csa < a.len());
            assert!((k - 1) * rsb + (n - 1) * csb < b.len());
        }
        assert!((m - 1) * rsc + (n - 1) * csc < c.len());
        // SAFETY: all accessed offsets are bounded by the asserts above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                if accumulate { 1.0 } else { 0.0 },
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }

    fn split(shape: &[usize], mode: usize) -> (usize, usize, usize) {
        let outer = shape[..mode].iter().product();
        let inner = shape[mode + 1..].iter().product();
        (outer, shape[mode], inner)
    }

    /// Contracts axis `mode` of `src` with the row-major `rows x shape[mode]`
    /// matrix `mat`.
    pub(crate) fn contract_mode(src: &[C64], shape: &[usize], mode: usize, mat: &[C64], rows: usize) -> Vec<C64> {
        let (outer, n, inner) = split(shape, mode);
        debug_assert_eq!(mat.len(), rows * n);
        let mut out = vec![C64::new(0.0, 0.0); outer * rows * inner];
        if inner == 1 {
            // out (outer x rows) = src (outer x n) * mat^T (n x rows)
            gemm(outer, n, rows, src, n, 1, mat, 1, n, &mut out, rows, 1, false);
        } else {
            for o in 0..outer {
                let s = &src[o * n * inner..(o + 1) * n * inner];
                let d = &mut out[o * rows * inner..(o + 1) * rows * inner];
                gemm(rows, n, inner, mat, n, 1, s, inner, 1, d, inner, 1, false);
            }
        }
        out
    }

    /// Adjoint of [`contract_mode`] with respect to `src`: contracts the
    /// `rows`-sized axis of `grad` with `mat^H`.
    pub(crate) fn contract_mode_adjoint(
        grad: &[C64],
        out_shape: &[usize],
        mode: usize,
        mat: &[C64],
        n: usize,
    ) -> Vec<C64> {
        let rows = out_shape[mode];
        // mat^H stored row-major as n x rows
        let mut adj = vec![C64::new(0.0, 0.0); n * rows];
        for p in 0..rows {
            for k in 0..n {
                adj[k * rows + p] = mat[p * n + k].conj();
            }
        }
        contract_mode(grad, out_shape, mode, &adj, n)
    }

    /// Gradient of [`contract_mode`] with respect to the matrix:
    /// `G_M[p, k] = sum_{o,i} grad[o, p, i] * conj(src[o, k, i])`.
    pub(crate) fn contract_mode_matrix_grad(
        grad: &[C64],
        src: &[C64],
        src_shape: &[usize],
        mode: usize,
        rows: usize,
    ) -> Vec<C64> {
        let (outer, n, inner) = split(src_shape, mode);
        let conj_src: Vec<C64> = src.iter().map(|z| z.conj()).collect();
        let mut gm = vec![C64::new(0.0, 0.0); rows * n];
        if inner == 1 {
            // G_M (rows x n) = grad^T (rows x outer) * conj(src) (outer x n)
            gemm(rows, outer, n, grad, 1, rows, &conj_src, n, 1, &mut gm, n, 1, false);
        } else {
            for o in 0..outer {
                let g = &grad[o * rows * inner..(o + 1) * rows * inner];
                let s = &conj_src[o * n * inner..(o + 1) * n * inner];
                // G_M += g (rows x inner) * s^T (inner x n)
                gemm(rows, inner, n, g, inner, 1, s, 1, inner, &mut gm, n, 1, o > 0);
            }
        }
        gm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        DenseTensor::new(shape, data).unwrap()
    }

    #[test]
    fn two_mode_identity_coefficients() {
        let c = DenseTensor::identity(2);
        let f1 = DenseTensor::from_real(vec![1, 2], &[1.0, 2.0]).unwrap();
        let f2 = DenseTensor::from_real(vec![1, 2], &[3.0, 4.0]).unwrap();
        let out = tucker_apply(&c, &[f1, f2]).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        // 1*3 + 2*4
        assert_eq!(out.data()[0], C64::new(11.0, 0.0));
    }

    #[test]
    fn single_mode_is_matrix_vector() {
        let c = DenseTensor::from_real(vec![1], &[5.0]).unwrap();
        let f = DenseTensor::from_real(vec![2, 1], &[1.0, 2.0]).unwrap();
        let out = tucker_apply(&c, &[f]).unwrap();
        assert_eq!(out.data(), &[C64::new(5.0, 0.0), C64::new(10.0, 0.0)]);
    }

    #[test]
    fn three_mode_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_tensor(&mut rng, vec![2, 3, 2]);
        let f: Vec<DenseTensor> = [(4, 2), (3, 3), (5, 2)]
            .iter()
            .map(|&(p, n)| random_tensor(&mut rng, vec![p, n]))
            .collect();
        let out = tucker_apply(&c, &f).unwrap();
        let mut worst: f64 = 0.0;
        for p0 in 0..4 {
            for p1 in 0..3 {
                for p2 in 0..5 {
                    let mut acc = C64::new(0.0, 0.0);
                    for k0 in 0..2 {
                        for k1 in 0..3 {
                            for k2 in 0..2 {
                                acc += c.get(&[k0, k1, k2])
                                    * f[0].get(&[p0, k0])
                                    * f[1].get(&[p1, k1])
                                    * f[2].get(&[p2, k2]);
                            }
                        }
                    }
                    worst = worst.max((acc - out.get(&[p0, p1, p2])).norm());
                }
            }
        }
        assert!(worst < 1e-12, "max deviation {worst}");
    }

    #[test]
    fn identity_contraction_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, vec![3, 4, 2]);
        for mode in 0..3 {
            let out = t.mode_contract(mode, &DenseTensor::identity(t.shape()[mode])).unwrap();
            assert_eq!(out, t);
        }
    }

    #[test]
    fn scalar_contraction() {
        let t = DenseTensor::new(vec![1, 1], vec![C64::new(2.0, -1.0)]).unwrap();
        let m = DenseTensor::new(vec![1, 1], vec![C64::new(0.5, 3.0)]).unwrap();
        let out = t.mode_contract(1, &m).unwrap();
        assert_eq!(out.data()[0], C64::new(0.5, 3.0) * C64::new(2.0, -1.0));
    }

    #[test]
    fn last_mode_contraction_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, vec![2, 3]);
        let m = random_tensor(&mut rng, vec![4, 3]);
        let out = t.mode_contract(1, &m).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        for i in 0..2 {
            for p in 0..4 {
                let want: C64 = (0..3).map(|k| m.get(&[p, k]) * t.get(&[i, k])).sum();
                assert!((want - out.get(&[i, p])).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let t = DenseTensor::zeros(vec![2, 3]);
        let m = DenseTensor::zeros(vec![4, 2]);
        assert!(matches!(t.mode_contract(1, &m), Err(TensorError::DimensionMismatch(_))));
        assert!(matches!(t.mode_contract(2, &m), Err(TensorError::ModeOutOfRange { .. })));
        assert!(tucker_apply(&t, &[m]).is_err());
        assert!(DenseTensor::new(vec![2], vec![C64::new(f64::NAN, 0.0); 2]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![3], vec![C64::new(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn adjoint_kernels_satisfy_inner_product_identity() {
        // <A x, y> == <x, A^H y> for the mode contraction viewed as a linear map
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = [3, 4, 5];
        for mode in 0..3 {
            let x = random_tensor(&mut rng, shape.to_vec());
            let m = random_tensor(&mut rng, vec![6, shape[mode]]);
            let ax = x.mode_contract(mode, &m).unwrap();
            let y = random_tensor(&mut rng, ax.shape().to_vec());
            let ahy = kernels::contract_mode_adjoint(y.data(), ax.shape(), mode, m.data(), shape[mode]);
            let lhs: C64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b.conj()).sum();
            let rhs: C64 = x.data().iter().zip(&ahy).map(|(a, b)| a * b.conj()).sum();
            assert!((lhs - rhs).norm() < 1e-10);

            // matrix gradient: d<A x, y>/dA against an explicit loop
            let gm = kernels::contract_mode_matrix_grad(y.data(), x.data(), &shape, mode, 6);
            let mut idx_out = ax.shape().to_vec();
            for p in 0..6 {
                for k in 0..shape[mode] {
                    let mut acc = C64::new(0.0, 0.0);
                    for flat in 0..ax.len() {
                        let mut rem = flat;
                        for ax_i in (0..3).rev() {
                            idx_out[ax_i] = rem % ax.shape()[ax_i];
                            rem /= ax.shape()[ax_i];
                        }
                        if idx_out[mode] != p {
                            continue;
                        }
                        let mut idx_in = idx_out.clone();
                        idx_in[mode] = k;
                        acc += y.data()[flat] * x.get(&idx_in).conj();
                    }
                    assert!((acc - gm[p * shape[mode] + k]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn contraction_order_prefers_shrinking_modes() {
        assert_eq!(contraction_order(&[64, 96, 84], &[8, 288, 112]), vec![0, 2, 1]);
        assert_eq!(contraction_order(&[2, 2], &[3, 3]), vec![0, 1]);
    }
}
