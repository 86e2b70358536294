//! Hierarchical fusion of per-layer representations.
//!
//! - concat: `Σ_k α_k H_k` with one scalar per layer
//! - max: elementwise maximum over layers
//! - gate: per token `t`, scores `s_k = w·H_k^t + b`, weights
//!   `I^t = softmax(s)`, output row `Σ_k I_k^t H_k^t`; `(w, b)` is shared
//!   across layers

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::linalg::{dot, softmax_in_place, Matrix};

/// `L ≥ 1` representations of identical shape `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    layers: Vec<Matrix>,
}

impl FusionInput {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid("fusion needs at least one layer"))?;
        let want = first.shape();
        if let Some(k) = layers.iter().position(|m| m.shape() != want) {
            return Err(shape(
                "FusionInput",
                format!("layer {} is {:?}, layer 1 is {want:?}", k + 1, layers[k].shape()),
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.layers[0].shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatParams {
    pub alphas: Vec<f64>,
}

impl ConcatParams {
    /// `α_k = 1/L`.
    pub fn uniform(layers: usize) -> Self {
        Self {
            alphas: vec![1.0 / layers as f64; layers],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Importance weights, `n × L`; row `t` is the softmax over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(pub Matrix);

impl GateWeights {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn concat_fuse(input: &FusionInput, p: &ConcatParams) -> Result<Matrix> {
    if p.alphas.len() != input.num_layers() {
        return Err(shape(
            "concat_fuse",
            format!("{} alphas for {} layers", p.alphas.len(), input.num_layers()),
        ));
    }
    let (n, d) = input.shape();
    let mut out = Matrix::zeros(n, d);
    for (h, &a) in input.layers.iter().zip(&p.alphas) {
        out.add_assign(&h.scale(a))?;
    }
    Ok(out)
}

pub fn max_fuse(input: &FusionInput) -> Matrix {
    let mut out = input.layers[0].clone();
    for h in &input.layers[1..] {
        out = Matrix::from_fn(out.rows(), out.cols(), |i, j| out.get(i, j).max(h.get(i, j)));
    }
    out
}

fn check_gate(input: &FusionInput, p: &GateParams) -> Result<()> {
    let d = input.shape().1;
    if p.w.len() != d {
        return Err(shape("gate_fuse", format!("gate weight has length {}, d = {d}", p.w.len())));
    }
    if !p.b.is_finite() || p.w.iter().any(|v| !v.is_finite()) {
        return Err(invalid("gate parameters must be finite"));
    }
    Ok(())
}

fn gate_scores(input: &FusionInput, p: &GateParams, t: usize) -> Vec<f64> {
    let mut s: Vec<f64> = input.layers.iter().map(|h| dot(&p.w, h.row(t)) + p.b).collect();
    softmax_in_place(&mut s);
    s
}

pub fn gate_fuse(input: &FusionInput, p: &GateParams) -> Result<(Matrix, GateWeights)> {
    check_gate(input, p)?;
    let (n, d) = input.shape();
    let l = input.num_layers();
    let mut out = Matrix::zeros(n, d);
    let mut weights = Matrix::zeros(n, l);
    for t in 0..n {
        let imp = gate_scores(input, p, t);
        let row = out.row_mut(t);
        for (h, &ik) in input.layers.iter().zip(&imp) {
            for (o, x) in row.iter_mut().zip(h.row(t)) {
                *o += ik * x;
            }
        }
        weights.row_mut(t).copy_from_slice(&imp);
    }
    Ok((out, GateWeights(weights)))
}

/// Gradients of `⟨upstream, gate_fuse(input)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGradient {
    pub w: Vec<f64>,
    pub b: f64,
    pub layers: Vec<Matrix>,
}

/// Analytic gradient through the per-token softmax Jacobian
/// `diag(I) − I Iᵀ`.
pub fn gate_fuse_grad(input: &FusionInput, p: &GateParams, upstream: &Matrix) -> Result<GateGradient> {
    check_gate(input, p)?;
    let (n, d) = input.shape();
    if upstream.shape() != (n, d) {
        return Err(shape(
            "gate_fuse_grad",
            format!("upstream is {:?}, output is {:?}", upstream.shape(), (n, d)),
        ));
    }
    let l = input.num_layers();
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    let mut grad_layers = vec![Matrix::zeros(n, d); l];
    for t in 0..n {
        let imp = gate_scores(input, p, t);
        let u = upstream.row(t);
        // ∂loss/∂I_k
        let a: Vec<f64> = input.layers.iter().map(|h| dot(u, h.row(t))).collect();
        let mean_a = dot(&imp, &a);
        for k in 0..l {
            let ds = imp[k] * (a[k] - mean_a);
            let h = input.layers[k].row(t);
            for (g, x) in grad_w.iter_mut().zip(h) {
                *g += ds * x;
            }
            grad_b += ds;
            for ((g, &uj), &wj) in grad_layers[k].row_mut(t).iter_mut().zip(u).zip(&p.w) {
                *g = imp[k] * uj + ds * wj;
            }
        }
    }
    Ok(GateGradient {
        w: grad_w,
        b: grad_b,
        layers: grad_layers,
    })
}
