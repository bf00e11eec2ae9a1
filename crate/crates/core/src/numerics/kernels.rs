//! Raw compute kernels behind the graph ops.
//!
//! Layout convention is row-major with the time axis innermost, so every
//! hot loop runs over a contiguous slice.

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

/// out[co, t] = sum_{ci, j} x[ci, t*stride + j - pad] * ker[co, ci, j]
pub fn conv1d_fwd(
    x: &[f64],
    (ci_n, l): (usize, usize),
    ker: &[f64],
    (co_n, klen): (usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [f64],
    l_out: usize,
) {
    for co in 0..co_n {
        let orow = &mut out[co * l_out..(co + 1) * l_out];
        for ci in 0..ci_n {
            let xrow = &x[ci * l..(ci + 1) * l];
            let krow = &ker[(co * ci_n + ci) * klen..(co * ci_n + ci + 1) * klen];
            for (t, o) in orow.iter_mut().enumerate() {
                let start = t * stride;
                let mut acc = 0.0;
                for (j, &w) in krow.iter().enumerate() {
                    let src = start + j;
                    if src >= pad && src - pad < l {
                        acc += w * xrow[src - pad];
                    }
                }
                *o += acc;
            }
        }
    }
}

/// Gradients of conv1d w.r.t. input and kernel.
pub fn conv1d_bwd(
    x: &[f64],
    (ci_n, l): (usize, usize),
    ker: &[f64],
    (co_n, klen): (usize, usize),
    stride: usize,
    pad: usize,
    dy: &[f64],
    l_out: usize,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    if let Some(dk) = dk {
        for co in 0..co_n {
            let dyrow = &dy[co * l_out..(co + 1) * l_out];
            for ci in 0..ci_n {
                let xrow = &x[ci * l..(ci + 1) * l];
                let dkrow = &mut dk[(co * ci_n + ci) * klen..(co * ci_n + ci + 1) * klen];
                for (j, dw) in dkrow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (t, &g) in dyrow.iter().enumerate() {
                        let src = t * stride + j;
                        if src >= pad && src - pad < l {
                            acc += g * xrow[src - pad];
                        }
                    }
                    *dw += acc;
                }
            }
        }
    }
    if let Some(dx) = dx {
        for co in 0..co_n {
            let dyrow = &dy[co * l_out..(co + 1) * l_out];
            for ci in 0..ci_n {
                let dxrow = &mut dx[ci * l..(ci + 1) * l];
                let krow = &ker[(co * ci_n + ci) * klen..(co * ci_n + ci + 1) * klen];
                for (t, &g) in dyrow.iter().enumerate() {
                    let start = t * stride;
                    for (j, &w) in krow.iter().enumerate() {
                        let src = start + j;
                        if src >= pad && src - pad < l {
                            dxrow[src - pad] += g * w;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution over a (C, F, T) map with independent symmetric/asymmetric
/// frequency padding and symmetric time padding. Stride applies to both axes.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    (ci_n, f_in, t_in): (usize, usize, usize),
    ker: &[f64],
    (co_n, kf, kt): (usize, usize, usize),
    stride: usize,
    (pf_top, pf_bot): (usize, usize),
    pt: usize,
    out: &mut [f64],
    (f_out, t_out): (usize, usize),
) {
    debug_assert_eq!(f_out, (f_in + pf_top + pf_bot - kf) / stride + 1);
    debug_assert_eq!(t_out, (t_in + 2 * pt - kt) / stride + 1);
    for co in 0..co_n {
        for fo in 0..f_out {
            let orow = &mut out[(co * f_out + fo) * t_out..(co * f_out + fo + 1) * t_out];
            for ci in 0..ci_n {
                for jf in 0..kf {
                    let fi = fo * stride + jf;
                    if fi < pf_top || fi - pf_top >= f_in {
                        continue;
                    }
                    let xrow = &x[(ci * f_in + (fi - pf_top)) * t_in
                        ..(ci * f_in + (fi - pf_top) + 1) * t_in];
                    let kbase = ((co * ci_n + ci) * kf + jf) * kt;
                    for jt in 0..kt {
                        let w = ker[kbase + jt];
                        if stride == 1 {
                            // contiguous fast path: valid t range for this tap
                            let lo = pt.saturating_sub(jt);
                            let hi = (t_in + pt - jt).min(t_out);
                            if lo >= hi {
                                continue;
                            }
                            let src = &xrow[lo + jt - pt..hi + jt - pt];
                            for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                                *o += w * v;
                            }
                        } else {
                            for (to, o) in orow.iter_mut().enumerate() {
                                let ti = to * stride + jt;
                                if ti >= pt && ti - pt < t_in {
                                    *o += w * xrow[ti - pt];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv2d w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f64],
    (ci_n, f_in, t_in): (usize, usize, usize),
    ker: &[f64],
    (co_n, kf, kt): (usize, usize, usize),
    stride: usize,
    (pf_top, pf_bot): (usize, usize),
    pt: usize,
    dy: &[f64],
    (f_out, t_out): (usize, usize),
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let _ = pf_bot;
    for co in 0..co_n {
        for fo in 0..f_out {
            let dyrow = &dy[(co * f_out + fo) * t_out..(co * f_out + fo + 1) * t_out];
            for ci in 0..ci_n {
                for jf in 0..kf {
                    let fi = fo * stride + jf;
                    if fi < pf_top || fi - pf_top >= f_in {
                        continue;
                    }
                    let xbase = (ci * f_in + (fi - pf_top)) * t_in;
                    let kbase = ((co * ci_n + ci) * kf + jf) * kt;
                    for jt in 0..kt {
                        if stride == 1 {
                            let lo = pt.saturating_sub(jt);
                            let hi = (t_in + pt - jt).min(t_out);
                            if lo >= hi {
                                continue;
                            }
                            let off = jt - pt + lo; // xrow offset aligned with dyrow[lo..]
                            if let Some(dk) = dk.as_deref_mut() {
                                let src = &x[xbase + off..xbase + off + (hi - lo)];
                                let mut acc = 0.0;
                                for (&g, &v) in dyrow[lo..hi].iter().zip(src) {
                                    acc += g * v;
                                }
                                dk[kbase + jt] += acc;
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let w = ker[kbase + jt];
                                let dst = &mut dx[xbase + off..xbase + off + (hi - lo)];
                                for (d, &g) in dst.iter_mut().zip(&dyrow[lo..hi]) {
                                    *d += w * g;
                                }
                            }
                        } else {
                            for (to, &g) in dyrow.iter().enumerate() {
                                let ti = to * stride + jt;
                                if ti >= pt && ti - pt < t_in {
                                    if let Some(dk) = dk.as_deref_mut() {
                                        dk[kbase + jt] += g * x[xbase + ti - pt];
                                    }
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xbase + ti - pt] += g * ker[kbase + jt];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matmul: out(m,n) += a(m,k) * b(k,n).
pub fn matmul(a: &[f64], b: &[f64], (m, k, n): (usize, usize, usize), out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(n,m) = transpose of a(m,n).
pub fn transpose(a: &[f64], (m, n): (usize, usize), out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
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

/// Stable softmax of a row in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable log-softmax of a binary logit pair; returns log-probabilities.
pub fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let z = ((a - m).exp() + (b - m).exp()).ln() + m;
    (a - z, b - z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_reference_points() {
        assert_eq!(selu(0.0), 0.0);
        assert!((selu(1.0) - SELU_LAMBDA).abs() < 1e-12);
        // limit x -> -inf equals -lambda*alpha
        assert!((selu(-60.0) - (-SELU_LAMBDA * SELU_ALPHA)).abs() < 1e-12);
        assert!((-SELU_LAMBDA * SELU_ALPHA - (-1.7581)).abs() < 1e-4);
    }

    #[test]
    fn softmax_row_normalizes_and_is_shift_invariant() {
        let mut a = vec![0.3, -1.0, 2.0, 0.0];
        let mut b: Vec<f64> = a.iter().map(|v| v + 123.0).collect();
        softmax_row(&mut a);
        softmax_row(&mut b);
        let s: f64 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_matches_sliding_dot_product() {
        // random-ish 1x1x3 kernel over a 1x5 input, stride 1, no pad
        let x = [0.5, -1.0, 2.0, 0.25, -0.75];
        let k = [0.2, -0.4, 1.1];
        let l_out = conv1d_out_len(5, 3, 1, 0);
        let mut out = vec![0.0; l_out];
        conv1d_fwd(&x, (1, 5), &k, (1, 3), 1, 0, &mut out, l_out);
        for t in 0..l_out {
            let direct: f64 = (0..3).map(|j| x[t + j] * k[j]).sum();
            assert!((out[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_unit_impulse_is_identity() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let k = [0.0, 1.0, 0.0];
        let l_out = conv1d_out_len(16, 3, 1, 1);
        assert_eq!(l_out, 16);
        let mut out = vec![0.0; l_out];
        conv1d_fwd(&x, (1, 16), &k, (1, 3), 1, 1, &mut out, l_out);
        for (a, b) in out.iter().zip(&x) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv1d_output_length_formula() {
        assert_eq!(conv1d_out_len(64600, 129, 1, 0), 64472);
    }

    #[test]
    fn conv2d_matches_window_sums() {
        // 1x3x3 input, one 2x2 all-ones kernel, stride 1, no pad -> 2x2 window sums
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let k = vec![1.0; 4];
        let mut out = vec![0.0; 4];
        conv2d_fwd(&x, (1, 3, 3), &k, (1, 2, 2), 1, (0, 0), 0, &mut out, (2, 2));
        let expect = [1.0 + 2.0 + 4.0 + 5.0, 2.0 + 3.0 + 5.0 + 6.0, 4.0 + 5.0 + 7.0 + 8.0, 5.0 + 6.0 + 8.0 + 9.0];
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_small_case() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &b, (2, 2, 2), &mut out);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }
}
