//! Row-major dense kernels with their backward passes.

use alloc::vec;
use alloc::vec::Vec;

const RMS_EPS: f64 = 1e-6;

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out (k x n) += a^T * g` for `a (m x k)`, `g (m x n)`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `g (m x n) * b^T` for `b (k x n)`, giving `m x k`.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn col_sum_acc(g: &[f64], n: usize, out: &mut [f64]) {
    for row in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub(crate) fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Parameter-free RMS normalization of each row; returns the normalized rows
/// and the per-row inverse RMS.
pub(crate) fn rms_norm(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = dot(row, row) / d as f64;
        let s = 1.0 / libm::sqrt(ms + RMS_EPS);
        inv[r] = s;
        for (o, v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v * s;
        }
    }
    (y, inv)
}

pub(crate) fn rms_norm_backward(y: &[f64], inv: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (r, &s) in inv.iter().enumerate() {
        let (yr, dyr) = (&y[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
        let m = dot(yr, dyr) / d as f64;
        for ((o, &yv), &gv) in dx[r * d..(r + 1) * d].iter_mut().zip(yr).zip(dyr) {
            *o = (gv - yv * m) * s;
        }
    }
    dx
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-a))
}

pub(crate) fn silu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_backward(a: &[f64], dg: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(dg)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub(crate) fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn softmax_rows_backward(p: &[f64], dp: &[f64], n: usize) -> Vec<f64> {
    let mut ds = vec![0.0; p.len()];
    for ((out, pr), dpr) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)).zip(dp.chunks_exact(n)) {
        let inner = dot(pr, dpr);
        for ((o, &pv), &gv) in out.iter_mut().zip(pr).zip(dpr) {
            *o = pv * (gv - inner);
        }
    }
    ds
}

/// Sinusoidal features of an integer timestep.
pub(crate) fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = libm::exp(-libm::log(1000.0) * j as f64 / half as f64);
        let arg = t as f64 * freq;
        out[j] = libm::sin(arg);
        out[half + j] = libm::cos(arg);
    }
    out
}

/// Merges each 2x2 neighbourhood of an `h x w` token grid into one token
/// with the four children concatenated on the channel axis.
pub(crate) fn merge_2x2(x: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * 4 * d];
    for y in 0..ho {
        for xx in 0..wo {
            let base = (y * wo + xx) * 4 * d;
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let src = ((2 * y + dy) * w + 2 * xx + dx) * d;
                out[base + k * d..base + (k + 1) * d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

pub(crate) fn merge_2x2_backward(g: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; h * w * d];
    for y in 0..ho {
        for xx in 0..wo {
            let base = (y * wo + xx) * 4 * d;
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let dst = ((2 * y + dy) * w + 2 * xx + dx) * d;
                out[dst..dst + d].copy_from_slice(&g[base + k * d..base + (k + 1) * d]);
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of an `h x w` token grid to `2h x 2w`.
pub(crate) fn upsample_2x(x: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; ho * wo * d];
    for y in 0..ho {
        for xx in 0..wo {
            let src = ((y / 2) * w + xx / 2) * d;
            out[(y * wo + xx) * d..(y * wo + xx + 1) * d].copy_from_slice(&x[src..src + d]);
        }
    }
    out
}

pub(crate) fn upsample_2x_backward(g: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; h * w * d];
    for y in 0..2 * h {
        for xx in 0..wo {
            let dst = ((y / 2) * w + xx / 2) * d;
            add_assign(&mut out[dst..dst + d], &g[(y * wo + xx) * d..(y * wo + xx + 1) * d]);
        }
    }
    out
}

/// Concatenates two row sets on the channel axis.
pub(crate) fn concat_cols(a: &[f64], da: usize, b: &[f64], db: usize) -> Vec<f64> {
    let rows = a.len() / da;
    let mut out = Vec::with_capacity(rows * (da + db));
    for r in 0..rows {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

pub(crate) fn split_cols(g: &[f64], da: usize, db: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = g.len() / (da + db);
    let (mut a, mut b) = (Vec::with_capacity(rows * da), Vec::with_capacity(rows * db));
    for row in g.chunks_exact(da + db) {
        a.extend_from_slice(&row[..da]);
        b.extend_from_slice(&row[da..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let g = [1.0, -1.0, 0.5, 2.0]; // 2x2
        let mut at_g = vec![0.0; 6];
        matmul_tn_acc(&a, &g, 2, 3, 2, &mut at_g);
        assert_eq!(at_g, vec![3.0, 7.0, 4.5, 8.0, 6.0, 9.0]);
        // g * b^T with b viewed as 3x2
        assert_eq!(matmul_nt(&g, &b, 2, 2, 3), vec![1.0, -3.0, -0.5, 0.5, 3.5, 2.25]);
    }

    #[test]
    fn rms_norm_gradient() {
        let x = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let w = [0.5, -0.3, 1.1, 0.2, -0.9, 0.4];
        let f = |x: &[f64]| dot(&rms_norm(x, 3).0, &w);
        let (y, inv) = rms_norm(&x, 3);
        close(&rms_norm_backward(&y, &inv, &w, 3), &numeric(f, &x), 1e-7);
    }

    #[test]
    fn silu_and_softmax_gradients() {
        let x = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let w = [0.5, -0.3, 1.1, 0.2, -0.9, 0.4];
        close(&silu_backward(&x, &w), &numeric(|x| dot(&silu(x), &w), &x), 1e-7);
        let f = |x: &[f64]| {
            let mut p = x.to_vec();
            softmax_rows(&mut p, 3);
            dot(&p, &w)
        };
        let mut p = x.to_vec();
        softmax_rows(&mut p, 3);
        close(&softmax_rows_backward(&p, &w, 3), &numeric(f, &x), 1e-7);
    }

    #[test]
    fn merge_and_upsample_are_adjoint_shaped() {
        let x: Vec<f64> = (0..4 * 4 * 2).map(|v| v as f64).collect();
        let m = merge_2x2(&x, 4, 4, 2);
        assert_eq!(merge_2x2_backward(&m, 4, 4, 2), x);
        let u = upsample_2x(&x, 4, 4, 2);
        assert_eq!(u.len(), 8 * 8 * 2);
        let back = upsample_2x_backward(&u, 4, 4, 2);
        assert!(back.iter().zip(&x).all(|(b, v)| *b == 4.0 * v));
    }
}
