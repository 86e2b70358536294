//! Seeded random instances for the inequality trial suites.
//!
//! A trial is reproducible from its seed alone, so suites can be spread over
//! worker threads and any failure replayed from the seed it reports.

use crate::diagnostics::{check_stack, contraction_report, verify_lemma1, ContractionReport, Lemma1Report, StackReport};
use crate::error::{invalid, Result};
use crate::linalg::{softmax_rows, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::transformer::{
    block_forward, random_block, random_matrix, random_stack, stack_forward, BlockParams, StackTrace,
};

/// Size limits for random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSizes {
    pub max_n: usize,
    pub max_d: usize,
    pub max_heads: usize,
    pub max_dff: usize,
}

impl TrialSizes {
    /// `n, d ≤ 8` for the subspace-distance inequalities.
    pub const LEMMA1: TrialSizes = TrialSizes { max_n: 8, max_d: 8, max_heads: 1, max_dff: 1 };
    /// `n ≤ 8, d ≤ 16, h ≤ 2, d_ff ≤ 32` for whole blocks.
    pub const BLOCK: TrialSizes = TrialSizes { max_n: 8, max_d: 16, max_heads: 2, max_dff: 32 };
}

fn uniform_matrix(rng: &mut SplitMix64, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.uniform(-scale, scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Trial {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub report: Lemma1Report,
}

/// Random `H, B, W, Â, a₁, a₂` with `n, d` drawn from the size limits.
pub fn lemma1_trial(seed: u64, sizes: TrialSizes) -> Result<Lemma1Trial> {
    let mut rng = SplitMix64::new(seed);
    let n = rng.range_inclusive(1, sizes.max_n.max(1));
    let d = rng.range_inclusive(1, sizes.max_d.max(1));
    let d_out = rng.range_inclusive(1, sizes.max_d.max(1));
    let h_scale = rng.uniform(0.1, 5.0);
    let h = uniform_matrix(&mut rng, n, d, h_scale);
    let b_scale = rng.uniform(0.1, 5.0);
    let b = uniform_matrix(&mut rng, n, d, b_scale);
    let w_scale = rng.uniform(0.1, 3.0);
    let w = uniform_matrix(&mut rng, d, d_out, w_scale);
    let logit_scale = rng.uniform(0.0, 6.0);
    let ahat = softmax_rows(&uniform_matrix(&mut rng, n, n, logit_scale))?;
    let a1 = rng.uniform(0.0, 2.0);
    let a2 = rng.uniform(0.0, 2.0);
    let report = verify_lemma1(&h, &b, &w, &ahat, a1, a2)?;
    Ok(Lemma1Trial { seed, n, d, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrial {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub weight_scale: f64,
    pub report: ContractionReport,
}

/// A random block applied to a random input.
pub fn block_trial(seed: u64, sizes: TrialSizes) -> Result<BlockTrial> {
    let mut rng = SplitMix64::new(seed);
    let n = rng.range_inclusive(1, sizes.max_n.max(1));
    let heads = rng.range_inclusive(1, sizes.max_heads.max(1));
    let max_dh = (sizes.max_d / heads).max(1);
    let min_dh = if heads == 1 { 2 } else { 1 };
    let d = heads * rng.range_inclusive(min_dh, max_dh.max(min_dh));
    let d_ff = rng.range_inclusive(1, sizes.max_dff.max(1));
    let weight_scale = rng.uniform(0.05, 1.5);
    let x_scale = rng.uniform(0.1, 4.0);
    let block = random_block(rng.next_u64(), n, d, heads, d_ff, weight_scale)?;
    let x = uniform_matrix(&mut rng, n, d, x_scale);
    let (_, trace) = block_forward(&x, &block)?;
    let report = contraction_report(&trace, &block)?;
    Ok(BlockTrial { seed, n, d, heads, d_ff, weight_scale, report })
}

/// Fixed weight scale of the demo stack; keeps `s` well below 1.
pub const DEMO_WEIGHT_SCALE: f64 = 0.1;
pub const DEMO_MAX_STEPS: usize = 40;

/// A stack built so that every layer's contraction factor is below 1.
#[derive(Debug, Clone)]
pub struct ContractionDemo {
    /// Scale of the attention and second feed-forward biases that was needed.
    pub bias_scale: f64,
    pub steps: usize,
    pub blocks: Vec<BlockParams>,
    pub trace: StackTrace,
    pub report: StackReport,
}

/// Builds a seeded stack with small weights and sweeps the magnitude of the
/// `attn_bias` and `b2` vectors geometrically (factor 2, at most 40 steps)
/// until every layer reports `v < 1`.
///
/// The biases add a token-independent vector in front of each LayerNorm,
/// which raises every token's standard deviation (and so `σ₁σ₂`) without
/// touching `s` or `λ`. Scaling LayerNorm `gamma` instead would not work:
/// the bound only holds for `|gamma| ≤ 1`.
pub fn contraction_demo(
    seed: u64,
    n: usize,
    d: usize,
    heads: usize,
    d_ff: usize,
    layers: usize,
) -> Result<ContractionDemo> {
    let x0 = random_matrix(derive_seed(seed, u64::MAX), n, d, 1.0);
    let base = random_stack(seed, n, d, heads, d_ff, layers, DEMO_WEIGHT_SCALE)?;
    let mut bias_scale = 1.0;
    for step in 0..DEMO_MAX_STEPS {
        let factor = bias_scale / DEMO_WEIGHT_SCALE;
        let blocks: Vec<BlockParams> = base
            .iter()
            .map(|b| {
                let mut b = b.clone();
                b.attn_bias.iter_mut().for_each(|v| *v *= factor);
                b.b2.iter_mut().for_each(|v| *v *= factor);
                b
            })
            .collect();
        let trace = stack_forward(&x0, &blocks, None)?;
        let report = check_stack(&trace, &blocks)?;
        if report.layers.iter().all(|r| r.v < 1.0) {
            return Ok(ContractionDemo { bias_scale, steps: step + 1, blocks, trace, report });
        }
        bias_scale *= 2.0;
    }
    Err(invalid(format!("no bias scale within {DEMO_MAX_STEPS} doublings gave v < 1 in every layer")))
}
