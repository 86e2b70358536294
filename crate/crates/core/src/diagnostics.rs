//! Over-smoothing measurements and contraction checks.
//!
//! `M` is the subspace of `n × d` matrices with identical rows and `d_M(H)`
//! the Frobenius distance to it, i.e. the norm of `H` with its column means
//! removed. For a block with largest relevant singular value `s`, largest
//! centered attention eigenvalue `λ`, `h` heads and minimal pre-LayerNorm
//! token standard deviations `σ₁`, `σ₂`, the output satisfies
//! `d_M(H_out) ≤ v · d_M(H_in)` with `v = (1+s²)(1+√λ·h·s)/(σ₁σ₂)`.

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{dot, lambda_max_centered_estimate, norm, sigma_max_estimate, Matrix};
use crate::transformer::{BlockParams, BlockTrace, StackTrace};

/// Relative slack allowed on every proved inequality.
pub const BOUND_SLACK: f64 = 1e-9;

/// Tolerance on row sums for a matrix to count as row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-10;

/// Mean cosine similarity over ordered pairs of distinct token rows.
pub fn cos_sim(h: &Matrix) -> Result<f64> {
    let n = h.rows();
    if n < 2 {
        return Err(invalid(format!("cos_sim needs at least 2 tokens, got {n}")));
    }
    let mut units = Vec::with_capacity(n);
    for (i, r) in h.row_iter().enumerate() {
        let len = norm(r);
        if len == 0.0 {
            return Err(invalid(format!("cos_sim: token {i} has a zero representation")));
        }
        units.push(r.iter().map(|x| x / len).collect::<Vec<_>>());
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 2.0 * dot(&units[i], &units[j]);
        }
    }
    Ok((total / (n * (n - 1)) as f64).clamp(-1.0, 1.0))
}

/// `d_M(H) = ‖(I − eeᵀ)H‖_F`.
pub fn distance_to_m(h: &Matrix) -> f64 {
    let n = h.rows();
    if n == 0 {
        return 0.0;
    }
    // Measure against row 0 first: translation along M does not change the
    // distance, and identical rows then give exactly zero.
    let base = h.row(0);
    let d = h.cols();
    let mut mean = vec![0.0; d];
    for r in h.row_iter() {
        for ((m, x), b) in mean.iter_mut().zip(r).zip(base) {
            *m += x - b;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sq = 0.0;
    for r in h.row_iter() {
        for ((x, b), m) in r.iter().zip(base).zip(&mean) {
            let dev = (x - b) - m;
            sq += dev * dev;
        }
    }
    sq.sqrt()
}

/// One checked inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

impl InequalityCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, slack: rhs - lhs }
    }

    pub fn holds(&self) -> bool {
        self.slack >= -BOUND_SLACK * self.rhs.abs().max(1.0)
    }
}

/// The four subspace-distance inequalities, in order: linear map, ReLU,
/// non-negative combination, attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Report {
    pub linear: InequalityCheck,
    pub relu: InequalityCheck,
    pub combination: InequalityCheck,
    pub attention: InequalityCheck,
}

impl Lemma1Report {
    pub fn records(&self) -> [InequalityCheck; 4] {
        [self.linear, self.relu, self.combination, self.attention]
    }

    pub fn all_hold(&self) -> bool {
        self.records().iter().all(InequalityCheck::holds)
    }
}

pub const LEMMA1_NAMES: [&str; 4] = ["linear", "relu", "combination", "attention"];

/// Evaluates both sides of
/// `d_M(HW) ≤ s·d_M(H)`, `d_M(ReLU H) ≤ d_M(H)`,
/// `d_M(a₁H + a₂B) ≤ a₁d_M(H) + a₂d_M(B)` and `d_M(ÂH) ≤ √λ·d_M(H)`.
pub fn verify_lemma1(h: &Matrix, b: &Matrix, w: &Matrix, ahat: &Matrix, a1: f64, a2: f64) -> Result<Lemma1Report> {
    let (n, d) = h.shape();
    if b.shape() != (n, d) || w.rows() != d || ahat.shape() != (n, n) {
        return Err(shape(
            "verify_lemma1",
            format!("H {:?}, B {:?}, W {:?}, Â {:?}", h.shape(), b.shape(), w.shape(), ahat.shape()),
        ));
    }
    if !(a1 >= 0.0 && a2 >= 0.0) {
        return Err(invalid(format!("combination weights must be non-negative, got {a1}, {a2}")));
    }
    let err = ahat.row_stochastic_error();
    if err > STOCHASTIC_TOL {
        return Err(Error::NotRowStochastic(err));
    }
    let dm_h = distance_to_m(h);
    let s = sigma_max_estimate(w).value;
    let lambda = lambda_max_centered_estimate(ahat)?.value;
    let combo = h.scale(a1).add(&b.scale(a2))?;
    Ok(Lemma1Report {
        linear: InequalityCheck::new(distance_to_m(&h.matmul(w)?), s * dm_h),
        relu: InequalityCheck::new(distance_to_m(&h.relu()), dm_h),
        combination: InequalityCheck::new(distance_to_m(&combo), a1 * dm_h + a2 * distance_to_m(b)),
        attention: InequalityCheck::new(distance_to_m(&ahat.matmul(h)?), lambda.sqrt() * dm_h),
    })
}

/// Per-block contraction quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub heads: usize,
    /// Largest singular value over every head's `Wvo`, `W1` and `W2`.
    pub s: f64,
    /// Largest eigenvalue of `Âᵀ(I − eeᵀ)Â` over the block's heads.
    pub lambda: f64,
    /// Minimum raw (pre-eps) token std entering the first LayerNorm.
    pub sigma1: f64,
    pub sigma2: f64,
    /// Same minima with the LayerNorm eps folded in, `sqrt(σ² + eps)`.
    pub sigma1_eps: f64,
    pub sigma2_eps: f64,
    pub v: f64,
    pub dm_in: f64,
    pub dm_out: f64,
    pub bound_holds: bool,
    /// Whether every power iteration behind `s` and `lambda` converged.
    pub spectral_converged: bool,
}

impl ContractionReport {
    /// `(1+s²)(1+√λ·h·s)/(σ₁σ₂)`; infinite when either σ is zero.
    pub fn contraction_factor(s: f64, lambda: f64, heads: usize, sigma1: f64, sigma2: f64) -> f64 {
        if sigma1 == 0.0 || sigma2 == 0.0 {
            return f64::INFINITY;
        }
        (1.0 + s * s) * (1.0 + lambda.sqrt() * heads as f64 * s) / (sigma1 * sigma2)
    }

    /// `dm_out / dm_in`, or `None` when the input already lies in `M`.
    pub fn ratio(&self) -> Option<f64> {
        (self.dm_in > 0.0).then(|| self.dm_out / self.dm_in)
    }

    pub fn slack(&self) -> f64 {
        self.v * self.dm_in - self.dm_out
    }
}

fn min_or_zero(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    if m.is_finite() {
        m.max(0.0)
    } else {
        0.0
    }
}

/// Largest singular value over the matrices the contraction bound covers.
pub fn block_s(p: &BlockParams) -> (f64, bool) {
    let mut s = 0.0f64;
    let mut converged = true;
    for m in p.heads.iter().map(|h| &h.wvo).chain([&p.w1, &p.w2]) {
        let est = sigma_max_estimate(m);
        s = s.max(est.value);
        converged &= est.converged;
    }
    (s, converged)
}

pub fn contraction_report(t: &BlockTrace, p: &BlockParams) -> Result<ContractionReport> {
    if t.attn_matrices.len() != p.num_heads() {
        return Err(shape(
            "contraction_report",
            format!("trace has {} heads, params {}", t.attn_matrices.len(), p.num_heads()),
        ));
    }
    let (s, mut converged) = block_s(p);
    let mut lambda = 0.0f64;
    for a in &t.attn_matrices {
        let est = lambda_max_centered_estimate(a)?;
        lambda = lambda.max(est.value);
        converged &= est.converged;
    }
    let sigma1 = min_or_zero(&t.pre_ln1_std);
    let sigma2 = min_or_zero(&t.pre_ln2_std);
    let v = ContractionReport::contraction_factor(s, lambda, p.num_heads(), sigma1, sigma2);
    let dm_in = distance_to_m(&t.input);
    let dm_out = distance_to_m(&t.output);
    let bound_holds = !v.is_finite() || dm_out <= v * dm_in + BOUND_SLACK * dm_in;
    Ok(ContractionReport {
        heads: p.num_heads(),
        s,
        lambda,
        sigma1,
        sigma2,
        sigma1_eps: (sigma1 * sigma1 + p.ln1.eps).sqrt(),
        sigma2_eps: (sigma2 * sigma2 + p.ln2.eps).sqrt(),
        v,
        dm_in,
        dm_out,
        bound_holds,
        spectral_converged: converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackReport {
    pub layers: Vec<ContractionReport>,
    /// `Π_l v_l`.
    pub v_product: f64,
    /// `d_M(H_L) / d_M(H_0)`; `None` when `d_M(H_0) = 0`.
    pub dm_ratio: Option<f64>,
}

pub fn check_stack(trace: &StackTrace, params: &[BlockParams]) -> Result<StackReport> {
    if trace.blocks.len() != params.len() {
        return Err(shape(
            "check_stack",
            format!("trace has {} layers, params {}", trace.blocks.len(), params.len()),
        ));
    }
    let layers = trace
        .blocks
        .iter()
        .zip(params)
        .map(|(t, p)| contraction_report(t, p))
        .collect::<Result<Vec<_>>>()?;
    let v_product = layers.iter().map(|r| r.v).product();
    let dm0 = distance_to_m(&trace.embeddings);
    let dm_last = trace.representations().last().map_or(dm0, |h| distance_to_m(h));
    Ok(StackReport {
        layers,
        v_product,
        dm_ratio: (dm0 > 0.0).then(|| dm_last / dm0),
    })
}

/// `σ₁σ₂` of layer `layer` (1-based), min-over-token convention.
pub fn sigma_product(trace: &StackTrace, layer: usize) -> Result<f64> {
    let block = layer
        .checked_sub(1)
        .and_then(|i| trace.blocks.get(i))
        .ok_or_else(|| invalid(format!("layer {layer} is not in 1..={}", trace.blocks.len())))?;
    Ok(min_or_zero(&block.pre_ln1_std) * min_or_zero(&block.pre_ln2_std))
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl DensityEstimate {
    pub fn density(&self, x: f64) -> f64 {
        let b = self.bandwidth;
        let sum: f64 = self
            .samples
            .iter()
            .map(|xi| {
                let u = (x - xi) / b;
                (-0.5 * u * u).exp()
            })
            .sum();
        INV_SQRT_2PI * sum / (self.samples.len() as f64 * b)
    }

    pub fn evaluate(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.density(x)).collect()
    }
}

/// Scott's rule `m^{-1/5}·std`, with the sample (n−1) standard deviation.
/// Falls back to 1 when the spread is zero.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let std = var.sqrt();
    if std > 0.0 && std.is_finite() {
        (m as f64).powf(-0.2) * std
    } else {
        1.0
    }
}

pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(invalid("kde needs at least one sample"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kde"));
    }
    let bandwidth = match bandwidth {
        Some(b) if !(b > 0.0 && b.is_finite()) => {
            return Err(invalid(format!("bandwidth must be positive, got {b}")))
        }
        Some(b) => b,
        None => scott_bandwidth(samples),
    };
    Ok(DensityEstimate {
        samples: samples.to_vec(),
        bandwidth,
    })
}

/// Cosine similarity of flattened multi-head attention between consecutive
/// layers; entry `l-1` compares layers `l` and `l+1`.
pub fn attn_layer_similarity(trace: &StackTrace) -> Result<Vec<f64>> {
    let l = trace.blocks.len();
    if l < 2 {
        return Err(invalid(format!("attention similarity needs at least 2 layers, got {l}")));
    }
    let flat: Vec<Vec<f64>> = trace
        .blocks
        .iter()
        .map(|b| b.attn_matrices.iter().flat_map(|a| a.as_slice().iter().copied()).collect())
        .collect();
    flat.windows(2)
        .map(|w| {
            if w[0].len() != w[1].len() {
                return Err(shape("attn_layer_similarity", "layers have different head counts or token counts"));
            }
            Ok(cosine(&w[0], &w[1]))
        })
        .collect()
}

/// Cosine of two vectors. Bitwise-equal inputs give exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(x·x) is exact in IEEE arithmetic, so identical vectors give dot/na = 1
    dot(a, b) / (na * nb).sqrt()
}
