//! Numeric kernels shared by the graph ops and the streaming engine.

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is `m x k` and
/// `b` is `k x n` after the optional transposes. A transposed operand is
/// stored in its untransposed row-major layout (`k x m` for `a`, `n x k`
/// for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// `out = x · w + b` for a single row.
pub(crate) fn linear_row(x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let n = out.len();
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|v| *v = 0.0),
    }
    for (i, &xi) in x.iter().enumerate() {
        let wr = &w[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xi * wv;
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Returns `(normalized, inv_std)`; `out = normalized * gain + bias`.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    normalized: &mut [f64],
) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        normalized[i] = (x[i] - mean) * inv;
        out[i] = normalized[i] * gain[i] + bias[i];
    }
    inv
}

/// Multi-head scaled dot-product attention over `t` frames of width `d`.
///
/// Query `i` attends to keys `0..=i` when `causal`, all keys otherwise.
/// Returns the output (`t x d`) and the attention probabilities
/// (`heads x t x t`, zero where masked).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let keys = if causal { i + 1 } else { t };
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + keys];
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *pj = dot(qi, kj) * scale;
            }
            softmax_in_place(p);
            let o = &mut out[i * d + off..i * d + off + dh];
            for (j, &pj) in p.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (oc, &vc) in o.iter_mut().zip(vj) {
                    *oc += pj * vc;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] w.r.t. `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let keys = if causal { i + 1 } else { t };
            let p = &probs[(h * t + i) * t..(h * t + i) * t + keys];
            let doi = &dout[i * d + off..i * d + off + dh];
            for j in 0..keys {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = dot(doi, vj);
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (a, &g) in dvj.iter_mut().zip(doi) {
                    *a += p[j] * g;
                }
            }
            let inner: f64 = (0..keys).map(|j| p[j] * dp[j]).sum();
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..keys {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (a, &kc) in dqi.iter_mut().zip(kj) {
                    *a += ds * kc;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (a, &qc) in dkj.iter_mut().zip(qi) {
                    *a += ds * qc;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
