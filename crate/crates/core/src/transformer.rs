//! Post-LayerNorm Transformer blocks and stacks with per-layer tracing.
//!
//! A block computes
//!
//! ```text
//! Z = LN1(X + Σ_k Â_k X Wvo_k + 1·attn_biasᵀ)
//! Y = LN2(Z + ReLU(Z W1 + 1·b1ᵀ) W2 + 1·b2ᵀ)
//! ```
//!
//! with `Â_k = softmax(X Wq_k (X Wk_k)ᵀ)` and no `1/√d_h` scaling. Heads are
//! combined through the pre-multiplied value-output matrix `Wvo`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::linalg::{layer_norm, softmax_rows, LayerNormParams, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::sharing::{share_sources, ShareConfig};

/// Weights of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `d × d_h`
    pub wq: Matrix,
    /// `d × d_h`
    pub wk: Matrix,
    /// `d × d`, the product `W^V W^{Oᵀ}`.
    pub wvo: Matrix,
}

/// All weights of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub attn_bias: Vec<f64>,
    /// `d × d_ff`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_ff × d`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl BlockParams {
    pub fn d_model(&self) -> usize {
        self.attn_bias.len()
    }

    pub fn d_ff(&self) -> usize {
        self.b1.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Checks every shape against `d = attn_bias.len()` and `d_ff = b1.len()`.
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let d_ff = self.d_ff();
        let h = self.heads.len();
        if h == 0 {
            return Err(invalid("a block needs at least one head"));
        }
        if d_ff == 0 {
            return Err(invalid("d_ff must be at least 1"));
        }
        if !d.is_multiple_of(h) {
            return Err(invalid(format!("{h} heads do not divide d={d}")));
        }
        let d_h = d / h;
        for (k, head) in self.heads.iter().enumerate() {
            for (name, m, want) in [
                ("wq", &head.wq, (d, d_h)),
                ("wk", &head.wk, (d, d_h)),
                ("wvo", &head.wvo, (d, d)),
            ] {
                if m.shape() != want {
                    return Err(shape(
                        "BlockParams",
                        format!("head {k} {name} is {:?}, expected {want:?}", m.shape()),
                    ));
                }
            }
        }
        if self.w1.shape() != (d, d_ff) {
            return Err(shape("BlockParams", format!("w1 is {:?}, expected {:?}", self.w1.shape(), (d, d_ff))));
        }
        if self.w2.shape() != (d_ff, d) {
            return Err(shape("BlockParams", format!("w2 is {:?}, expected {:?}", self.w2.shape(), (d_ff, d))));
        }
        if self.b2.len() != d {
            return Err(shape("BlockParams", format!("b2 has length {}, expected {d}", self.b2.len())));
        }
        for (name, ln) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            ln.validate()?;
            if ln.dim() != d {
                return Err(shape("BlockParams", format!("{name} has dimension {}, expected {d}", ln.dim())));
            }
        }
        Ok(())
    }
}

/// Everything recorded while running one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub input: Matrix,
    /// One row-stochastic `n × n` matrix per head.
    pub attn_matrices: Vec<Matrix>,
    pub pre_ln1_std: Vec<f64>,
    pub pre_ln2_std: Vec<f64>,
    /// Output of the attention sub-layer; `None` for traces ingested from
    /// files that did not record it.
    pub post_attn: Option<Matrix>,
    pub output: Matrix,
}

/// Per-layer record of a stack run. Layer 0 is the embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StackTrace {
    pub embeddings: Matrix,
    pub blocks: Vec<BlockTrace>,
    /// `share_map[l-1]` is the 1-based layer whose attention layer `l` used.
    pub share_map: Option<Vec<usize>>,
}

impl StackTrace {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `H_l` for `l` in `0..=L`.
    pub fn layer_output(&self, l: usize) -> Option<&Matrix> {
        match l {
            0 => Some(&self.embeddings),
            _ => self.blocks.get(l - 1).map(|b| &b.output),
        }
    }

    /// `H_0, H_1, …, H_L`.
    pub fn representations(&self) -> Vec<&Matrix> {
        std::iter::once(&self.embeddings)
            .chain(self.blocks.iter().map(|b| &b.output))
            .collect()
    }
}

/// Attention logits `X Wq (X Wk)ᵀ` for one head.
pub fn attention_logits(x: &Matrix, head: &HeadParams) -> Result<Matrix> {
    if head.wq.shape() != head.wk.shape() {
        return Err(shape(
            "attention_logits",
            format!("wq {:?} vs wk {:?}", head.wq.shape(), head.wk.shape()),
        ));
    }
    let q = x.matmul(&head.wq)?;
    let k = x.matmul(&head.wk)?;
    q.matmul_transposed(&k)
}

/// `softmax(X Wq (X Wk)ᵀ)`, unscaled.
pub fn attention_matrix(x: &Matrix, head: &HeadParams) -> Result<Matrix> {
    softmax_rows(&attention_logits(x, head)?)
}

/// Runs one block, computing fresh attention matrices.
pub fn block_forward(x: &Matrix, p: &BlockParams) -> Result<(Matrix, BlockTrace)> {
    block_forward_with(x, p, None)
}

/// Runs one block. When `shared_attention` is given, those matrices replace
/// the block's own attention (one per head).
pub fn block_forward_with(
    x: &Matrix,
    p: &BlockParams,
    shared_attention: Option<&[Matrix]>,
) -> Result<(Matrix, BlockTrace)> {
    p.validate()?;
    let (n, d) = x.shape();
    if d != p.d_model() {
        return Err(shape("block_forward", format!("input has d={d}, block expects {}", p.d_model())));
    }

    let attn_matrices = match shared_attention {
        Some(shared) => {
            if shared.len() != p.num_heads() || shared.iter().any(|a| a.shape() != (n, n)) {
                return Err(shape(
                    "block_forward",
                    format!("shared attention must be {} matrices of {n}x{n}", p.num_heads()),
                ));
            }
            shared.to_vec()
        }
        None => p
            .heads
            .iter()
            .map(|head| attention_matrix(x, head))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut pre_ln1 = x.clone();
    for (a, head) in attn_matrices.iter().zip(&p.heads) {
        pre_ln1.add_assign(&a.matmul(x)?.matmul(&head.wvo)?)?;
    }
    pre_ln1.add_row_broadcast(&p.attn_bias)?;
    let (z, pre_ln1_std) = layer_norm(&pre_ln1, &p.ln1)?;

    let mut hidden = z.matmul(&p.w1)?;
    hidden.add_row_broadcast(&p.b1)?;
    let mut pre_ln2 = hidden.relu().matmul(&p.w2)?;
    pre_ln2.add_row_broadcast(&p.b2)?;
    pre_ln2.add_assign(&z)?;
    let (y, pre_ln2_std) = layer_norm(&pre_ln2, &p.ln2)?;

    let trace = BlockTrace {
        input: x.clone(),
        attn_matrices,
        pre_ln1_std,
        pre_ln2_std,
        post_attn: Some(z),
        output: y.clone(),
    };
    Ok((y, trace))
}

/// Runs blocks in sequence. Layers inside a shared range reuse the attention
/// matrices of their source layer as given by [`share_sources`].
pub fn stack_forward(x0: &Matrix, blocks: &[BlockParams], share: Option<&ShareConfig>) -> Result<StackTrace> {
    let share_map = match share {
        Some(cfg) => {
            if cfg.layers != blocks.len() {
                return Err(invalid(format!(
                    "share config is for {} layers, stack has {}",
                    cfg.layers,
                    blocks.len()
                )));
            }
            Some(share_sources(cfg)?)
        }
        None => None,
    };
    stack_forward_mapped(x0, blocks, share_map)
}

/// Like [`stack_forward`] but with an explicit layer → source-layer map
/// (1-based, each source `≤` its layer).
pub fn stack_forward_mapped(
    x0: &Matrix,
    blocks: &[BlockParams],
    share_map: Option<Vec<usize>>,
) -> Result<StackTrace> {
    if let Some(map) = &share_map {
        if map.len() != blocks.len() {
            return Err(invalid(format!("share map has {} entries for {} layers", map.len(), blocks.len())));
        }
        for (i, &src) in map.iter().enumerate() {
            if src == 0 || src > i + 1 {
                return Err(invalid(format!("layer {} cannot take attention from layer {src}", i + 1)));
            }
        }
    }
    for (i, b) in blocks.iter().enumerate() {
        b.validate()
            .map_err(|e| invalid(format!("layer {}: {e}", i + 1)))?;
    }

    let mut traces: Vec<BlockTrace> = Vec::with_capacity(blocks.len());
    let mut h = x0.clone();
    for (i, block) in blocks.iter().enumerate() {
        let layer = i + 1;
        let src = share_map.as_ref().map_or(layer, |m| m[i]);
        let shared = (src != layer).then(|| traces[src - 1].attn_matrices.as_slice());
        let (out, trace) = block_forward_with(&h, block, shared)?;
        traces.push(trace);
        h = out;
    }
    Ok(StackTrace {
        embeddings: x0.clone(),
        blocks: traces,
        share_map,
    })
}

/// Seeded random block. Every weight and bias entry is i.i.d. uniform in
/// `[-weight_scale, weight_scale]`, drawn from a SplitMix64 stream in field
/// order; LayerNorms are the identity (`gamma = 1`, `beta = 0`,
/// `eps = 1e-12`). `n` does not influence the weights.
pub fn random_block(seed: u64, _n: usize, d: usize, h: usize, d_ff: usize, weight_scale: f64) -> Result<BlockParams> {
    if h == 0 || d == 0 || !d.is_multiple_of(h) {
        return Err(invalid(format!("{h} heads do not divide d={d}")));
    }
    if d_ff == 0 {
        return Err(invalid("d_ff must be at least 1"));
    }
    if !(weight_scale >= 0.0 && weight_scale.is_finite()) {
        return Err(invalid(format!("weight_scale must be a finite non-negative number, got {weight_scale}")));
    }
    let d_h = d / h;
    let mut rng = SplitMix64::new(seed);
    let mut mat = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.uniform(-weight_scale, weight_scale) + 0.0);
    let heads = (0..h)
        .map(|_| HeadParams {
            wq: mat(d, d_h),
            wk: mat(d, d_h),
            wvo: mat(d, d),
        })
        .collect();
    let attn_bias = mat(1, d).into_vec();
    let w1 = mat(d, d_ff);
    let b1 = mat(1, d_ff).into_vec();
    let w2 = mat(d_ff, d);
    let b2 = mat(1, d).into_vec();
    Ok(BlockParams {
        heads,
        attn_bias,
        w1,
        b1,
        w2,
        b2,
        ln1: LayerNormParams::identity(d),
        ln2: LayerNormParams::identity(d),
    })
}

/// `layers` random blocks, block `l` seeded with `derive_seed(seed, l)`.
pub fn random_stack(
    seed: u64,
    n: usize,
    d: usize,
    h: usize,
    d_ff: usize,
    layers: usize,
    weight_scale: f64,
) -> Result<Vec<BlockParams>> {
    (0..layers)
        .map(|l| random_block(derive_seed(seed, l as u64), n, d, h, d_ff, weight_scale))
        .collect()
}

/// Seeded `n × d` matrix with entries uniform in `[-scale, scale]`.
pub fn random_matrix(seed: u64, n: usize, d: usize, scale: f64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(n, d, |_, _| rng.uniform(-scale, scale))
}
