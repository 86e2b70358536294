//! Attention as a weighted directed graph over tokens.
//!
//! The adjacency weight of edge `i → j` is `exp(L_ij)` with `L = Q Kᵀ`. It is
//! kept in log form (logits plus per-row log-degree) so that large logits do
//! not overflow; the random-walk normalization `D⁻¹A` is then exactly the
//! row softmax of the logits.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{log_sum_exp, softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGraph {
    pub n: usize,
    pub logits: Matrix,
    /// `log d_i = log Σ_j exp(L_ij)`.
    pub log_degrees: Vec<f64>,
    /// `D⁻¹A`, row-stochastic.
    pub rw_normalized: Matrix,
}

impl AttentionGraph {
    /// Degrees `d_i`; may overflow to `inf` for large logits.
    pub fn degrees(&self) -> Vec<f64> {
        self.log_degrees.iter().map(|l| l.exp()).collect()
    }

    /// Raw adjacency `exp(L)`. Only meaningful for small logits.
    pub fn adjacency(&self) -> Matrix {
        self.logits.map(f64::exp)
    }

    /// Graph of an already-normalized attention matrix, using `log Â` as
    /// logits (zero entries are clamped to the smallest positive double).
    pub fn from_attention(attn: &Matrix) -> Result<Self> {
        if !attn.is_square() {
            return Err(shape("AttentionGraph::from_attention", format!("{:?} is not square", attn.shape())));
        }
        if attn.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(invalid("attention weights must be finite and non-negative"));
        }
        let logits = attn.map(|v| v.max(f64::MIN_POSITIVE).ln());
        let log_degrees = logits.row_iter().map(log_sum_exp).collect();
        Ok(Self {
            n: attn.rows(),
            logits,
            log_degrees,
            rw_normalized: attn.clone(),
        })
    }
}

pub fn graph_from_logits(logits: &Matrix) -> Result<AttentionGraph> {
    if !logits.is_square() {
        return Err(shape("graph_from_logits", format!("{:?} is not square", logits.shape())));
    }
    let rw_normalized = softmax_rows(logits)?;
    let log_degrees = logits.row_iter().map(log_sum_exp).collect();
    Ok(AttentionGraph {
        n: logits.rows(),
        logits: logits.clone(),
        log_degrees,
        rw_normalized,
    })
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of a positive matrix.
pub fn sym_normalize(weights: &Matrix) -> Result<Matrix> {
    if !weights.is_square() {
        return Err(shape("sym_normalize", format!("{:?} is not square", weights.shape())));
    }
    let deg: Vec<f64> = weights.row_iter().map(|r| r.iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&s| !(s > 0.0)) {
        return Err(invalid(format!("row {i} has non-positive degree {}", deg[i])));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n = weights.rows();
    Ok(Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * weights.get(i, j) * inv_sqrt[j]))
}

/// One residual GCN layer: `X + ReLU(Â X W)`.
pub fn resgcn_forward(x: &Matrix, ahat: &Matrix, w: &Matrix) -> Result<Matrix> {
    if ahat.shape() != (x.rows(), x.rows()) || w.shape() != (x.cols(), x.cols()) {
        return Err(shape(
            "resgcn_forward",
            format!("X {:?}, Â {:?}, W {:?}", x.shape(), ahat.shape(), w.shape()),
        ));
    }
    x.add(&ahat.matmul(x)?.matmul(w)?.relu())
}

pub const SINKHORN_TOL: f64 = 1e-12;
pub const SINKHORN_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub matrix: Matrix,
    pub iterations: usize,
    /// Max deviation of any row or column sum from 1 at exit.
    pub deviation: f64,
    pub converged: bool,
}

fn marginal_deviation(m: &Matrix) -> f64 {
    let cols = m
        .col_sums()
        .into_iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    m.row_stochastic_error().max(cols)
}

/// Sinkhorn–Knopp: alternate row then column scaling until every row and
/// column sum is within `tol` of 1.
pub fn sinkhorn(a: &Matrix, tol: f64, max_iter: usize) -> Result<SinkhornResult> {
    if !a.is_square() {
        return Err(shape("sinkhorn", format!("{:?} is not square", a.shape())));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("sinkhorn tolerance must be positive, got {tol}")));
    }
    if a.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("sinkhorn needs an entrywise positive finite matrix"));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut deviation = marginal_deviation(&m);
    if deviation < tol {
        return Ok(SinkhornResult { matrix: m, iterations: 0, deviation, converged: true });
    }
    for it in 1..=max_iter {
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let cs = m.col_sums();
        for i in 0..n {
            for (v, s) in m.row_mut(i).iter_mut().zip(&cs) {
                *v /= s;
            }
        }
        deviation = marginal_deviation(&m);
        if deviation < tol {
            return Ok(SinkhornResult { matrix: m, iterations: it, deviation, converged: true });
        }
    }
    Ok(SinkhornResult { matrix: m, iterations: max_iter, deviation, converged: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    EdgeList,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "edge-list" | "edgelist" | "tsv" => Ok(Self::EdgeList),
            other => Err(invalid(format!("unknown graph format `{other}` (expected dot or edge-list)"))),
        }
    }
}

/// Display threshold used when none is given.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.05;

/// Edges `i → j`, `i ≠ j`, whose normalized weight exceeds `threshold`.
pub fn edges_above(g: &AttentionGraph, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 0..g.n {
        for j in 0..g.n {
            let w = g.rw_normalized.get(i, j);
            if i != j && w > threshold {
                edges.push((i, j, w));
            }
        }
    }
    edges
}

/// Renders the graph as DOT (`label` carries the weight to 4 decimals) or as
/// tab-separated `i j weight` lines. Self-loops are dropped.
pub fn export_graph(g: &AttentionGraph, format: GraphFormat, threshold: f64) -> Result<String> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let edges = edges_above(g, threshold);
    let mut out = String::new();
    match format {
        GraphFormat::Dot => {
            out.push_str("digraph attention {\n");
            for i in 0..g.n {
                let _ = writeln!(out, "  {i};");
            }
            for (i, j, w) in edges {
                let _ = writeln!(out, "  {i} -> {j} [label=\"{w:.4}\"];");
            }
            out.push_str("}\n");
        }
        GraphFormat::EdgeList => {
            for (i, j, w) in edges {
                let _ = writeln!(out, "{i}\t{j}\t{w:.6}");
            }
        }
    }
    Ok(out)
}
