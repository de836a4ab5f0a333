//! Raw loops behind the graph operations. All arrays are row-major slices.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · bᵀ` where `b` is `[n×k]`.
pub(crate) fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`.
pub(crate) fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    // Four independent partial sums let the compiler vectorise.
    let mut acc = [R::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of one strided convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_out: usize,
}

/// Zero-pads `[t_in × c_in]` to `[(t_in + 2·pad) × c_in]`.
pub(crate) fn pad_rows<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let mut out = vec![R::zero(); (g.t_in + 2 * g.pad) * g.c_in];
    out[g.pad * g.c_in..(g.pad + g.t_in) * g.c_in].copy_from_slice(x);
    out
}

/// Reorders a `[c_out × c_in × k]` kernel to `[c_out × k × c_in]` so each output
/// is one contiguous dot product against the padded input.
pub(crate) fn kernel_to_window_major<R: Real>(w: &[R], g: &ConvGeom) -> Vec<R> {
    let mut out = vec![R::zero(); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for j in 0..g.k {
                out[(co * g.k + j) * g.c_in + ci] = w[(co * g.c_in + ci) * g.k + j];
            }
        }
    }
    out
}

pub(crate) fn kernel_from_window_major<R: Real>(w: &[R], g: &ConvGeom) -> Vec<R> {
    let mut out = vec![R::zero(); w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for j in 0..g.k {
                out[(co * g.c_in + ci) * g.k + j] = w[(co * g.k + j) * g.c_in + ci];
            }
        }
    }
    out
}

pub(crate) fn conv1d_forward<R: Real>(x: &[R], w: &[R], b: &[R], g: &ConvGeom) -> Vec<R> {
    let xp = pad_rows(x, g);
    let wr = kernel_to_window_major(w, g);
    let span = g.k * g.c_in;
    let mut out = vec![R::zero(); g.t_out * g.c_out];
    for t in 0..g.t_out {
        let window = &xp[t * g.stride * g.c_in..t * g.stride * g.c_in + span];
        let row = &mut out[t * g.c_out..(t + 1) * g.c_out];
        for (co, o) in row.iter_mut().enumerate() {
            *o = b[co] + dot(window, &wr[co * span..(co + 1) * span]);
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)` for upstream gradient `grad`.
pub(crate) fn conv1d_backward<R: Real>(
    x: &[R],
    w: &[R],
    grad: &[R],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let span = g.k * g.c_in;
    let mut db = vec![R::zero(); g.c_out];
    for t in 0..g.t_out {
        for co in 0..g.c_out {
            db[co] += grad[t * g.c_out + co];
        }
    }
    let mut dx = Vec::new();
    if need_input {
        let wr = kernel_to_window_major(w, g);
        let mut dxp = vec![R::zero(); (g.t_in + 2 * g.pad) * g.c_in];
        for t in 0..g.t_out {
            let off = t * g.stride * g.c_in;
            let window = &mut dxp[off..off + span];
            for co in 0..g.c_out {
                let gv = grad[t * g.c_out + co];
                if gv != R::zero() {
                    axpy(gv, &wr[co * span..(co + 1) * span], window);
                }
            }
        }
        dx = dxp[g.pad * g.c_in..(g.pad + g.t_in) * g.c_in].to_vec();
    }
    let mut dw = Vec::new();
    if need_kernel {
        let xp = pad_rows(x, g);
        let mut dwr = vec![R::zero(); g.c_out * span];
        for t in 0..g.t_out {
            let off = t * g.stride * g.c_in;
            let window = &xp[off..off + span];
            for co in 0..g.c_out {
                let gv = grad[t * g.c_out + co];
                if gv != R::zero() {
                    axpy(gv, window, &mut dwr[co * span..(co + 1) * span]);
                }
            }
        }
        dw = kernel_from_window_major(&dwr, g);
    }
    (dx, dw, db)
}

/// Numerically stable `log Σ exp(v)`.
pub(crate) fn log_sum_exp<R: Real>(v: &[R]) -> R {
    let max = v.iter().copied().fold(R::neg_infinity(), R::max);
    if max == R::neg_infinity() {
        return max;
    }
    let s: R = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}
