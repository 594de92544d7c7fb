//! Plain slice kernels shared by the gradient tape and tape-free inference.
//!
//! Every kernel processes rows independently and in a fixed order, so a row's
//! result never depends on which other rows were computed alongside it.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. When `trans_a` is set, `a` is
/// stored as `k x m`; when `trans_b` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides and extents describe exactly the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i + offset` is
/// masked to zero, where `offset = cols - rows` so that the last row sees
/// every column.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, causal: bool, out: &mut [f64]) {
    let offset = cols.saturating_sub(rows);
    for i in 0..rows {
        let visible = if causal { (i + offset + 1).min(cols) } else { cols };
        let src = &x[i * cols..i * cols + visible];
        let dst = &mut out[i * cols..(i + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst[..visible].iter_mut() {
            *d /= total;
        }
        for d in dst[visible..].iter_mut() {
            *d = 0.0;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Writes the normalised (pre-affine) values to
/// `xhat` and each row's inverse standard deviation to `inv_std`.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    let rows = x.len() / cols;
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..cols {
            let h = (row[j] - mean) * inv;
            xhat[i * cols + j] = h;
            out[i * cols + j] = h * gain[j] + bias[j];
        }
    }
}

/// Log-softmax of a single row, accumulated in `f64`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Squared Euclidean distance.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of the given rows of `x` in a canonical order: rows are sorted
/// lexicographically by value before accumulation, so the result depends only
/// on the multiset of rows and not on their indices.
pub fn canonical_row_sum(x: &[f64], cols: usize, rows: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    match rows.len() {
        0 => {}
        1 => out.copy_from_slice(&x[rows[0] * cols..(rows[0] + 1) * cols]),
        _ => {
            let mut order: Vec<usize> = rows.to_vec();
            order.sort_by(|&p, &q| {
                let a = &x[p * cols..(p + 1) * cols];
                let b = &x[q * cols..(q + 1) * cols];
                a.iter()
                    .zip(b)
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for r in order {
                for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
        }
    }
}
