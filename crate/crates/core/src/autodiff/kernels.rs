//! Raw numeric kernels over flat buffers. No tape bookkeeping here.

use crate::tensor::strides_of;
use crate::{Error, Result};

/// `c[m,p] += a[m,k] * b[k,p]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `c[m,k] += a[m,p] * b[k,p]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for kk in 0..k {
            let b_row = &b[kk * p..(kk + 1) * p];
            c[i * k + kk] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,p] += a[m,k]^T * b[m,p]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * p..(kk + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`: zero where broadcast.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// For every linear index of `out`, yields the matching offsets into both operands.
pub(crate) fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let numel: usize = out.iter().product();
    let mut counter = vec![0usize; out.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut offsets = Vec::with_capacity(numel);
    for _ in 0..numel {
        offsets.push((oa, ob));
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if counter[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
    offsets
}

pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gathered: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            src += gathered[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= gathered[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending, take the largest `k` with `1 + k z_(k) > sum_{j<=k} z_(j)`,
/// then `tau = (sum_{j<=k} z_(j) - 1) / k` and `p_i = max(z_i - tau, 0)`.
/// Returns the threshold `tau`.
pub fn sparsemax_row(z: &[f64], out: &mut [f64]) -> f64 {
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut support = 0usize;
    let mut support_sum = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumulative {
            support = i + 1;
            support_sum = cumulative;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    if support == 1 {
        // A unique maximum: emit the exact one-hot rather than `v - tau`.
        for (o, &v) in out.iter_mut().zip(z) {
            *o = if v == sorted[0] { 1.0 } else { 0.0 };
        }
        return tau;
    }
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - tau).max(0.0);
    }
    tau
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op,
            reason: "NaN input".into(),
        });
    }
    if data.iter().any(|v| v.is_infinite()) {
        return Err(Error::Numeric {
            op,
            reason: "infinite input".into(),
        });
    }
    Ok(())
}
