//! Raw numeric kernels shared by the tape's forward and backward passes.

use super::Float;

/// Row-major matrix view: `rows x cols` with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatRef {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatRef {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Below this many multiply-adds, packing costs more than it saves.
const SMALL_GEMM: usize = 8192;

fn small_gemm<F: Float>(a: &[F], av: MatRef, b: &[F], bv: MatRef, c: &mut [F], accumulate: bool) {
    let (k, n) = (av.cols, bv.cols);
    if !accumulate {
        c.iter_mut().for_each(|x| *x = F::zero());
    }
    let at = |i: usize, j: usize, v: MatRef| (i as isize * v.rs + j as isize * v.cs) as usize;
    if bv.cs == 1 {
        // Rows of `b` are contiguous: axpy into each output row.
        for (i, row) in c.chunks_mut(n).enumerate() {
            for p in 0..k {
                let x = a[at(i, p, av)];
                let br = &b[at(p, 0, bv)..at(p, 0, bv) + n];
                row.iter_mut().zip(br).for_each(|(o, &y)| *o += x * y);
            }
        }
    } else if av.cs == 1 && bv.rs == 1 {
        // Rows of `a` and columns of `b` are contiguous: dot products.
        for (i, row) in c.chunks_mut(n).enumerate() {
            let ar = &a[at(i, 0, av)..at(i, 0, av) + k];
            for (j, out) in row.iter_mut().enumerate() {
                let bc = &b[at(0, j, bv)..at(0, j, bv) + k];
                *out += ar.iter().zip(bc).fold(F::zero(), |s, (&x, &y)| s + x * y);
            }
        }
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            for p in 0..k {
                let x = a[at(i, p, av)];
                for (j, out) in row.iter_mut().enumerate() {
                    *out += x * b[at(p, j, bv)];
                }
            }
        }
    }
}

/// `c (+)= a * b` for dense row-major `c` of shape `a.rows x b.cols`.
pub(crate) fn gemm<F: Float>(a: &[F], av: MatRef, b: &[F], bv: MatRef, c: &mut [F], accumulate: bool) {
    debug_assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(a, av, b, bv, c, accumulate);
        return;
    }
    // SAFETY: views were built from slices of the stated sizes and `c` is a
    // distinct dense buffer of m*n elements.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax over each row of width `cols`.
pub fn softmax_rows<F: Float>(x: &[F], cols: usize) -> Vec<F> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Layer norm over rows of width `cols` with population variance.
///
/// Returns `(y, xhat, inv_std)`.
pub fn layer_norm_rows<F: Float>(
    x: &[F],
    cols: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / cols.max(1);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let n = F::of(cols as f64);
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let base = r * cols;
        for j in 0..cols {
            let h = (row[j] - mean) * inv;
            xhat[base + j] = h;
            y[base + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, inv_std)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) gelu: `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// d/dx of [`gelu_scalar`]: `Phi(x) + x * phi(x)`.
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key of the random stream for one (seed, step, node).
pub(crate) fn stream_key(seed: u64, step: u64, node: u64) -> u64 {
    splitmix64(seed ^ splitmix64(step ^ splitmix64(node)))
}

/// Counter-based uniform in [0, 1) at `index` of the stream `key`.
pub(crate) fn uniform_at(key: u64, index: u64) -> f64 {
    (splitmix64(key ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based uniform in [0, 1) keyed by (seed, step, node, element).
#[cfg(test)]
pub(crate) fn keyed_uniform(seed: u64, step: u64, node: u64, index: u64) -> f64 {
    uniform_at(stream_key(seed, step, node), index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_symmetric_pair() {
        let y = softmax_rows(&[0.0f64, 0.0], 2);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        for row in softmax_rows(&x, 8).chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        let (y, _, _) = layer_norm_rows(&[1.0f64, 2.0, 3.0], 3, &[1.0; 3], &[0.0; 3], 0.0);
        // (x - 2) / sqrt(2/3)
        assert_abs_diff_eq!(y[0], -1.224_744_871, epsilon = 1e-6);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[2], 1.224_744_871, epsilon = 1e-6);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Phi(1) = 0.841344746...
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.841_345, epsilon = 1e-5);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad_scalar(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn keyed_uniform_is_replayable() {
        let a: Vec<f64> = (0..100).map(|i| keyed_uniform(7, 3, 11, i)).collect();
        let b: Vec<f64> = (0..100).map(|i| keyed_uniform(7, 3, 11, i)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&u| (0.0..1.0).contains(&u)));
        let c: Vec<f64> = (0..100).map(|i| keyed_uniform(7, 4, 11, i)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(&a, MatRef::dense(2, 2), &b, MatRef::dense(2, 2).t(), &mut c, false);
        // a * b^T
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(&a, MatRef::dense(2, 2).t(), &b, MatRef::dense(2, 2), &mut c, true);
        // + a^T * b
        assert_eq!(c, [17.0 + 26.0, 23.0 + 30.0, 39.0 + 38.0, 53.0 + 44.0]);
    }
}
