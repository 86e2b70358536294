//! Scalar-loop reference implementations, written independently of the
//! library's matrix routines. Used only from tests.
#![allow(dead_code, clippy::needless_range_loop)]

use smoothlab::fusion::{gate_fuse, FusionInput, GateParams};
use smoothlab::transformer::BlockParams;
use smoothlab::Matrix;

fn at(m: &Matrix, i: usize, j: usize) -> f64 {
    m.as_slice()[i * m.cols() + j]
}

fn loop_layer_norm(rows: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mut mean = 0.0;
            for &x in r {
                mean += x;
            }
            mean /= d;
            let mut var = 0.0;
            for &x in r {
                var += (x - mean) * (x - mean);
            }
            var /= d;
            let denom = (var + eps).sqrt();
            let mut out = vec![0.0; r.len()];
            for j in 0..r.len() {
                out[j] = (r[j] - mean) / denom * gamma[j] + beta[j];
            }
            out
        })
        .collect()
}

/// One block evaluated entry by entry.
pub fn block_forward_loops(x: &Matrix, p: &BlockParams) -> Vec<Vec<f64>> {
    let n = x.rows();
    let d = x.cols();
    let d_ff = p.b1.len();
    let mut pre1 = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            pre1[i][j] = at(x, i, j) + p.attn_bias[j];
        }
    }
    for head in &p.heads {
        let d_h = head.wq.cols();
        let mut q = vec![vec![0.0; d_h]; n];
        let mut k = vec![vec![0.0; d_h]; n];
        for i in 0..n {
            for c in 0..d_h {
                for t in 0..d {
                    q[i][c] += at(x, i, t) * at(&head.wq, t, c);
                    k[i][c] += at(x, i, t) * at(&head.wk, t, c);
                }
            }
        }
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..d_h {
                    s += q[i][c] * k[j][c];
                }
                a[i][j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for j in 0..n {
                a[i][j] = (a[i][j] - max).exp();
                z += a[i][j];
            }
            for j in 0..n {
                a[i][j] /= z;
            }
        }
        // (Â X) Wvo
        for i in 0..n {
            let mut ax = vec![0.0; d];
            for t in 0..d {
                for j in 0..n {
                    ax[t] += a[i][j] * at(x, j, t);
                }
            }
            for c in 0..d {
                let mut s = 0.0;
                for t in 0..d {
                    s += ax[t] * at(&head.wvo, t, c);
                }
                pre1[i][c] += s;
            }
        }
    }
    let z = loop_layer_norm(&pre1, &p.ln1.gamma, &p.ln1.beta, p.ln1.eps);
    let mut pre2 = z.clone();
    for i in 0..n {
        let mut hid = vec![0.0; d_ff];
        for f in 0..d_ff {
            let mut s = p.b1[f];
            for t in 0..d {
                s += z[i][t] * at(&p.w1, t, f);
            }
            hid[f] = if s > 0.0 { s } else { 0.0 };
        }
        for c in 0..d {
            let mut s = p.b2[c];
            for f in 0..d_ff {
                s += hid[f] * at(&p.w2, f, c);
            }
            pre2[i][c] += s;
        }
    }
    loop_layer_norm(&pre2, &p.ln2.gamma, &p.ln2.beta, p.ln2.eps)
}

pub fn max_abs_diff(m: &Matrix, rows: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            worst = worst.max((at(m, i, j) - v).abs());
        }
    }
    worst
}

/// `min_C ‖H − 1C‖_F` by least squares: the normal equations
/// `(1ᵀ1) C = 1ᵀH` are solved explicitly for each column, then the residual
/// is summed entry by entry.
pub fn distance_least_squares(h: &Matrix) -> f64 {
    let n = h.rows();
    let d = h.cols();
    let gram = n as f64; // 1ᵀ1
    let mut sq = 0.0;
    for j in 0..d {
        let mut rhs = 0.0; // 1ᵀ h_j
        for i in 0..n {
            rhs += at(h, i, j);
        }
        let c = rhs / gram;
        for i in 0..n {
            let r = at(h, i, j) - c;
            sq += r * r;
        }
    }
    sq.sqrt()
}

/// Same distance through pairwise row differences:
/// `d_M² = (1/2n) Σ_{i,j} ‖h_i − h_j‖²`.
pub fn distance_pairwise(h: &Matrix) -> f64 {
    let n = h.rows();
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            for c in 0..h.cols() {
                let diff = at(h, i, c) - at(h, j, c);
                sq += diff * diff;
            }
        }
    }
    (sq / (2.0 * n as f64)).sqrt()
}

/// `⟨upstream, gate_fuse(input; w, b)⟩`.
pub fn gate_loss(layers: &[Matrix], w: &[f64], b: f64, upstream: &Matrix) -> f64 {
    let input = FusionInput::new(layers.to_vec()).unwrap();
    let (out, _) = gate_fuse(&input, &GateParams { w: w.to_vec(), b }).unwrap();
    out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
}

pub const FD_STEP: f64 = 1e-6;

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Relative error with a floor of 1e-3 on the scale, so that gradients at
/// the finite-difference noise level are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn with_entry(m: &Matrix, i: usize, j: usize, v: f64) -> Matrix {
    let mut data = m.as_slice().to_vec();
    data[i * m.cols() + j] = v;
    Matrix::new(m.rows(), m.cols(), data).unwrap()
}
