//! Dense math kernels shared by the graph ops.
//!
//! All kernels are deterministic: parallel variants split output rows across
//! threads so every element is written by exactly one thread and no floating
//! point reduction order depends on scheduling.

use rayon::prelude::*;

/// Work threshold below which matmuls stay single-threaded.
const PAR_FLOPS: usize = 1 << 18;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [f64], i: usize| {
        out_row.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..p * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(out_row, i));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, i);
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n] — accumulates into out.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    // Row p of out gathers column p of a; outer loop over k keeps writes disjoint.
    let row = |out_row: &mut [f64], p: usize| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..i * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, out_row)| row(out_row, p));
    } else {
        for (p, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, p);
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]^T — accumulates into out.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    let row = |out_row: &mut [f64], i: usize| {
        let arow = &a[i * n..i * n + n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let brow = &b[p * n..p * n + n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out_row)| row(out_row, i));
    } else {
        for (i, out_row) in out.chunks_mut(k).enumerate() {
            row(out_row, i);
        }
    }
}

/// y[co,ho,wo] = sum_{ci,r,s} x[ci, ho*stride-pad+r, wo*stride-pad+s] * w[co,ci,r,s]
pub fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), co * ho * wo);
    out.fill(0.0);
    for oc in 0..co {
        for icc in 0..ci {
            let wbase = (oc * ci + icc) * kh * kw;
            let xbase = icc * h * wd;
            for oy in 0..ho {
                for r in 0..kh {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wd;
                    let orow = (oc * ho + oy) * wo;
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for s in 0..kw {
                            let ix = (ox * stride + s) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * w[wbase + r * kw + s];
                        }
                        out[orow + ox] += acc;
                    }
                }
            }
        }
    }
}

/// gx[ci,h,w] += sum gy[co,ho,wo] * w[co,ci,r,s] over receptive fields (transpose of conv2d_fwd).
pub fn conv2d_grad_x(
    gy: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut [f64],
) {
    debug_assert_eq!(gx.len(), ci * h * wd);
    for oc in 0..co {
        for icc in 0..ci {
            let wbase = (oc * ci + icc) * kh * kw;
            let xbase = icc * h * wd;
            for oy in 0..ho {
                for r in 0..kh {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wd;
                    let orow = (oc * ho + oy) * wo;
                    for ox in 0..wo {
                        let g = gy[orow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for s in 0..kw {
                            let ix = (ox * stride + s) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gx[xrow + ix as usize] += g * w[wbase + r * kw + s];
                        }
                    }
                }
            }
        }
    }
}

/// gw[co,ci,r,s] += sum x[ci, ...] * gy[co, ...] over output positions.
pub fn conv2d_grad_w(
    x: &[f64],
    gy: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gw: &mut [f64],
) {
    debug_assert_eq!(gw.len(), co * ci * kh * kw);
    for oc in 0..co {
        for icc in 0..ci {
            let wbase = (oc * ci + icc) * kh * kw;
            let xbase = icc * h * wd;
            for oy in 0..ho {
                for r in 0..kh {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wd;
                    let orow = (oc * ho + oy) * wo;
                    for ox in 0..wo {
                        let g = gy[orow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for s in 0..kw {
                            let ix = (ox * stride + s) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            gw[wbase + r * kw + s] += g * x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1., 2., 3., 4.]; // 2x2
        let b = [5., 6., 7., 8.];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_transposes_agree_with_naive() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64).sin()).collect();
        // at_b: a^T @ b -> [k, n]
        let mut got = vec![0.0; k * n];
        matmul_at_b_acc(&a, &b, m, k, n, &mut got);
        for p in 0..k {
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + p] * b[i * n + j];
                }
                assert!((got[p * n + j] - want).abs() < 1e-12);
            }
        }
        // a_bt: a2[m,n] @ b2[k,n]^T -> [m, k]
        let a2: Vec<f64> = (0..m * n).map(|i| i as f64 + 0.5).collect();
        let b2: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut got2 = vec![0.0; m * k];
        matmul_a_bt_acc(&a2, &b2, m, n, k, &mut got2);
        for i in 0..m {
            for p in 0..k {
                let mut want = 0.0;
                for j in 0..n {
                    want += a2[i * n + j] * b2[p * n + j];
                }
                assert!((got2[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let w = [1.0];
        let mut y = vec![0.0; 9];
        conv2d_fwd(&x, &w, 1, 3, 3, 1, 1, 1, 1, 0, 3, 3, &mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn conv_shapes_invert_for_stride2_k4_p1() {
        for h in [8usize, 16, 32] {
            let o = conv_out_size(h, 4, 2, 1);
            assert_eq!(o, h / 2);
        }
    }
}
