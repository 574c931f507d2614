//! Raw slice kernels shared by forward and backward passes.
//!
//! All matrices are row-major. Accumulating kernels add into `out`.

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += dot(a_row, b_row);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
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
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators; fixed association order keeps results
    // reproducible while letting the compiler vectorise.
    let mut acc = [0.0f64; 4];
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

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &[f64], out: &mut [f64], cols: usize) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Extents of a 3×3, stride-1, zero-padded convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

/// Iterates the in-bounds taps `(tap_index, input_pixel)` for output pixel (y, x).
#[inline]
fn taps(d: ConvDims, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).flat_map(move |dy| {
        (0..3usize).filter_map(move |dx| {
            let yy = (y + dy).checked_sub(1)?;
            let xx = (x + dx).checked_sub(1)?;
            if yy < d.h && xx < d.w {
                Some((dy * 3 + dx, yy * d.w + xx))
            } else {
                None
            }
        })
    })
}

/// out[h,w,cout] = bias + Σ x[h+dy-1, w+dx-1, ci] · k[dy,dx,ci,co]
pub fn conv3x3_forward(x: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64], d: ConvDims) {
    let ConvDims { h, w, cin, cout } = d;
    for y in 0..h {
        for xpos in 0..w {
            let o = (y * w + xpos) * cout;
            let out_px = &mut out[o..o + cout];
            out_px.copy_from_slice(bias);
            for (tap, px) in taps(d, y, xpos) {
                let x_px = &x[px * cin..(px + 1) * cin];
                let k_tap = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &xv) in x_px.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let k_row = &k_tap[ci * cout..(ci + 1) * cout];
                    for (ov, &kv) in out_px.iter_mut().zip(k_row) {
                        *ov += xv * kv;
                    }
                }
            }
        }
    }
}

/// Accumulates input, kernel and bias gradients for [`conv3x3_forward`].
/// Any of the outputs may be skipped by passing `None`.
pub fn conv3x3_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_k: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
    d: ConvDims,
) {
    let ConvDims { h, w, cin, cout } = d;
    if let Some(gb) = grad_b {
        for g_px in grad_out.chunks_exact(cout) {
            for (b, &g) in gb.iter_mut().zip(g_px) {
                *b += g;
            }
        }
    }
    for y in 0..h {
        for xpos in 0..w {
            let o = (y * w + xpos) * cout;
            let g_px = &grad_out[o..o + cout];
            for (tap, px) in taps(d, y, xpos) {
                let kb = tap * cin * cout;
                if let Some(gx) = grad_x.as_deref_mut() {
                    let gx_px = &mut gx[px * cin..(px + 1) * cin];
                    for (ci, gxv) in gx_px.iter_mut().enumerate() {
                        *gxv += dot(&kernel[kb + ci * cout..kb + (ci + 1) * cout], g_px);
                    }
                }
                if let Some(gk) = grad_k.as_deref_mut() {
                    let x_px = &x[px * cin..(px + 1) * cin];
                    for (ci, &xv) in x_px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let gk_row = &mut gk[kb + ci * cout..kb + (ci + 1) * cout];
                        for (gkv, &g) in gk_row.iter_mut().zip(g_px) {
                            *gkv += xv * g;
                        }
                    }
                }
            }
        }
    }
}
