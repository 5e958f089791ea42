// Dense kernels over row-major slices. Weights are stored `[in, out]` so that
// `y = x·W + b`.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `out[rows, n] = x[rows, m] · w[m, n] + b[n]`
pub(crate) fn linear(out: &mut [f64], x: &[f64], w: &[f64], b: &[f64], rows: usize, m: usize, n: usize) {
    debug_assert_eq!(out.len(), rows * n);
    debug_assert_eq!(x.len(), rows * m);
    debug_assert_eq!(w.len(), m * n);
    for i in 0..rows {
        let o = &mut out[i * n..(i + 1) * n];
        o.copy_from_slice(b);
        let xi = &x[i * m..(i + 1) * m];
        for (k, &xik) in xi.iter().enumerate() {
            let wk = &w[k * n..(k + 1) * n];
            for (oj, &wkj) in o.iter_mut().zip(wk) {
                *oj += xik * wkj;
            }
        }
    }
}

/// Accumulates gradients of [`linear`] into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    m: usize,
    n: usize,
) {
    for i in 0..rows {
        let d = &dout[i * n..(i + 1) * n];
        for (dbj, &dj) in db.iter_mut().zip(d) {
            *dbj += dj;
        }
        let xi = &x[i * m..(i + 1) * m];
        let dxi = &mut dx[i * m..(i + 1) * m];
        for k in 0..m {
            let wk = &w[k * n..(k + 1) * n];
            let dwk = &mut dw[k * n..(k + 1) * n];
            let xik = xi[k];
            let mut acc = 0.0;
            for j in 0..n {
                dwk[j] += xik * d[j];
                acc += d[j] * wk[j];
            }
            dxi[k] += acc;
        }
    }
}

/// Layer norm over the last axis. Writes normalized output and the per-row
/// mean and reciprocal standard deviation needed by the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    d: usize,
) {
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let m = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[i] = m;
        rstd[i] = r;
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            oi[j] = (xi[j] - m) * r * gain[j] + bias[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    x: &[f64],
    mean: &[f64],
    rstd: &[f64],
    gain: &[f64],
    rows: usize,
    d: usize,
) {
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let di = &dout[i * d..(i + 1) * d];
        let (m, r) = (mean[i], rstd[i]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (xi[j] - m) * r;
            dxhat[j] = di[j] * gain[j];
            dgain[j] += di[j] * xhat[j];
            dbias[j] += di[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxi = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxi[j] += r * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
}

pub(crate) fn gelu(out: &mut [f64], u: &[f64]) {
    for (o, &x) in out.iter_mut().zip(u) {
        let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
        *o = 0.5 * x * (1.0 + th);
    }
}

pub(crate) fn gelu_backward(du: &mut [f64], dout: &[f64], u: &[f64]) {
    for ((d, &g), &x) in du.iter_mut().zip(dout).zip(u) {
        let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
        let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
        *d += g * (0.5 * (1.0 + th) + 0.5 * x * dth);
    }
}

/// In-place numerically stable softmax of one row.
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

/// `log Σ exp(row)`, stable.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1000.0, 999.0, -5.0, 0.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[0] > row[1]);
    }

    #[test]
    fn log_sum_exp_of_zeros() {
        let row = vec![0.0; 64];
        assert!((log_sum_exp(&row) - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_naive() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0];
        let b = [0.1, 0.2, 0.3];
        let mut out = [0.0; 6];
        linear(&mut out, &x, &w, &b, 2, 2, 3);
        let expected = [5.1, 0.7, 1.3, 11.1, 1.7, 1.3];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }
}
