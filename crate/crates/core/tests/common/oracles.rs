//! Straight-line reference implementations written with plain nested
//! vectors, independent of the graph engine.

type Mat = Vec<Vec<f64>>;

pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    assert_eq!(data.len(), rows * cols);
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct CitWeights {
    pub pos: Mat,
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// T_in = [cam; lidar] + P; Z_i = softmax(Q_i K_iᵀ/√d) V_i;
/// Ẑ = [Z_1..Z_h] Wo; T_out = relu(Ẑ W1 + b1) W2 + b2 + T_in.
/// Returns (T_out, head-averaged α).
pub fn cit_forward(cam_tokens: &Mat, lidar_tokens: &Mat, w: &CitWeights) -> (Mat, Mat) {
    let mut t_in: Mat = cam_tokens.iter().chain(lidar_tokens).cloned().collect();
    for (r, p) in t_in.iter_mut().zip(&w.pos) {
        for (v, pv) in r.iter_mut().zip(p) {
            *v += pv;
        }
    }
    let n = t_in.len();
    let heads = w.wq.len();
    let mut concat: Mat = vec![Vec::new(); n];
    let mut alpha_avg = vec![vec![0.0; n]; n];
    for i in 0..heads {
        let q = matmul(&t_in, &w.wq[i]);
        let k = matmul(&t_in, &w.wk[i]);
        let v = matmul(&t_in, &w.wv[i]);
        let d = q[0].len() as f64;
        let logits = matmul(&q, &transpose(&k));
        let alpha: Mat = logits
            .iter()
            .map(|r| softmax_row(&r.iter().map(|x| x / d.sqrt()).collect::<Vec<_>>()))
            .collect();
        for (ra, r) in alpha_avg.iter_mut().zip(&alpha) {
            for (a, v) in ra.iter_mut().zip(r) {
                *a += v / heads as f64;
            }
        }
        let z = matmul(&alpha, &v);
        for (c, zr) in concat.iter_mut().zip(z) {
            c.extend(zr);
        }
    }
    let zhat = matmul(&concat, &w.wo);
    let hidden: Mat = matmul(&zhat, &w.w1)
        .into_iter()
        .map(|r| r.iter().zip(&w.b1).map(|(a, b)| (a + b).max(0.0)).collect())
        .collect();
    let out: Mat = matmul(&hidden, &w.w2)
        .into_iter()
        .zip(&t_in)
        .map(|(r, t)| r.iter().zip(&w.b2).zip(t).map(|((a, b), t)| a + b + t).collect())
        .collect();
    (out, alpha_avg)
}

/// Grid as [h][w][c].
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn grid(h: usize, w: usize, c: usize, data: &[f64]) -> Grid {
    (0..h)
        .map(|y| (0..w).map(|x| data[(y * w + x) * c..(y * w + x + 1) * c].to_vec()).collect())
        .collect()
}

/// 3×3 zero-padded convolution, kernel indexed [dy][dx][ci][co].
pub fn conv3x3(x: &Grid, kernel: &[f64], bias: &[f64], cout: usize) -> Grid {
    let h = x.len();
    let w = x[0].len();
    let cin = x[0][0].len();
    let k = |dy: usize, dx: usize, ci: usize, co: usize| kernel[((dy * 3 + dx) * cin + ci) * cout + co];
    (0..h)
        .map(|y| {
            (0..w)
                .map(|xx| {
                    (0..cout)
                        .map(|co| {
                            let mut s = bias[co];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let yy = y as isize + dy as isize - 1;
                                    let xs = xx as isize + dx as isize - 1;
                                    if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        s += x[yy as usize][xs as usize][ci] * k(dy, dx, ci, co);
                                    }
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// w = σ(γ(mean_hw(cam + lidar))), γ(v) = v·G + g_b with G [C×C].
pub fn ddf_gate(cam: &Grid, lidar: &Grid, gamma_w: &[f64], gamma_b: &[f64]) -> Vec<f64> {
    let c = cam[0][0].len();
    let n = (cam.len() * cam[0].len()) as f64;
    let mut pooled = vec![0.0; c];
    for (rc, rl) in cam.iter().zip(lidar) {
        for (pc, pl) in rc.iter().zip(rl) {
            for ch in 0..c {
                pooled[ch] += (pc[ch] + pl[ch]) / n;
            }
        }
    }
    (0..c)
        .map(|j| sigmoid(gamma_b[j] + (0..c).map(|i| pooled[i] * gamma_w[i * c + j]).sum::<f64>()))
        .collect()
}

/// F = Adaptive(Conv([w·cam, (1-w)·lidar])), Adaptive(F) = σ(a·mean_c(F) + b)·F.
#[allow(clippy::too_many_arguments)]
pub fn ddf_forward(
    cam: &Grid,
    lidar: &Grid,
    gamma_w: &[f64],
    gamma_b: &[f64],
    kernel: &[f64],
    bias: &[f64],
    adapt_w: f64,
    adapt_b: f64,
) -> Grid {
    let w = ddf_gate(cam, lidar, gamma_w, gamma_b);
    let cat: Grid = cam
        .iter()
        .zip(lidar)
        .map(|(rc, rl)| {
            rc.iter()
                .zip(rl)
                .map(|(pc, pl)| {
                    let mut v: Vec<f64> = pc.iter().zip(&w).map(|(a, g)| g * a).collect();
                    v.extend(pl.iter().zip(&w).map(|(a, g)| (1.0 - g) * a));
                    v
                })
                .collect()
        })
        .collect();
    let c = cam[0][0].len();
    let fused = conv3x3(&cat, kernel, bias, c);
    fused
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|px| {
                    let m = px.iter().sum::<f64>() / px.len() as f64;
                    let s = sigmoid(adapt_w * m + adapt_b);
                    px.into_iter().map(|v| s * v).collect()
                })
                .collect()
        })
        .collect()
}

pub fn flatten(g: &Grid) -> Vec<f64> {
    g.iter().flatten().flatten().copied().collect()
}

/// Reference BCE with logits, written out from the log-sum-exp form.
pub fn bce(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Direct enumeration: IoU at every grid threshold from explicit sets.
pub fn brute_force_sweep(probs: &[f64], mask: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in (1..=19).map(|i| i as f64 / 20.0) {
        let pred: Vec<bool> = probs.iter().map(|&p| p >= t).collect();
        let truth: Vec<bool> = mask.iter().map(|&m| m == 1.0).collect();
        let inter = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let union = pred.iter().zip(&truth).filter(|(a, b)| **a || **b).count();
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let closer = (t - 0.5f64).abs() < (best.1 - 0.5f64).abs();
        if iou > best.0 || (iou == best.0 && closer) {
            best = (iou, t);
        }
    }
    best
}
