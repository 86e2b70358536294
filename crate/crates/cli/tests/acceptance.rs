//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use smoothlab::diagnostics::{attn_layer_similarity, distance_to_m};
use smoothlab::fusion::{gate_fuse_grad, FusionInput, GateParams};
use smoothlab::graphview::{graph_from_logits, sinkhorn, SINKHORN_MAX_ITER, SINKHORN_TOL};
use smoothlab::linalg::{lambda_max_centered, Matrix};
use smoothlab::rng::{derive_seed, SplitMix64};
use smoothlab::sharing::{format_sig, share_sources, ShareConfig};
use smoothlab::transformer::{attention_matrix, block_forward, random_block, random_matrix, random_stack, stack_forward, HeadParams};
use smoothlab::trials::{block_trial, contraction_demo, lemma1_trial, TrialSizes};
use smoothlab_cli::commands::{share_table, ShareTableArgs, TableFormat};

use oracles::{
    block_forward_loops, central_difference, distance_least_squares, gate_loss, max_abs_diff, rel_err, with_entry,
};

const SEED: u64 = 0x5300_7411;

/// Published FLOP column, in GFLOPs at 2 significant figures, for the ranges
/// none, 11-12, 9-12, 7-12, 5-12, 3-12, 1-12.
const PUBLISHED_G: [&str; 7] = ["2.7", "2.4", "2.1", "1.8", "1.5", "1.2", "1.1"];
const PUBLISHED_STARTS: [Option<usize>; 7] = [None, Some(11), Some(9), Some(7), Some(5), Some(3), Some(1)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_matrix(rng: &mut SplitMix64, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.uniform(lo, hi))
}

fn flop_table() -> Outcome {
    let mut args = ShareTableArgs {
        n: 128,
        d: 768,
        layers: 12,
        share: Vec::new(),
        format: TableFormat::Tsv,
        out: None,
    };
    for s in PUBLISHED_STARTS {
        args.share.push(s.map_or("none".to_string(), |s| format!("{s}..12")));
    }
    let mut buf = Vec::new();
    if let Err(e) = share_table(&args, &mut buf) {
        return outcome(false, e.to_string());
    }
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let giga: Vec<String> = rows.iter().map(|r| r[2].trim_end_matches('G').to_string()).collect();
    let saved: f64 = rows[4][3].parse().unwrap_or(f64::NAN);
    let pass = giga == PUBLISHED_G && (saved - 0.444).abs() <= 0.001;
    outcome(pass, format!("gflops {giga:?}, saved fraction for 5-12 {saved}"))
}

fn lemma_suite() -> Outcome {
    let mut violations = [0usize; 4];
    let mut worst = f64::INFINITY;
    for i in 0..1000 {
        let seed = derive_seed(SEED, i);
        match lemma1_trial(seed, TrialSizes::LEMMA1) {
            Ok(t) => {
                for (k, c) in t.report.records().iter().enumerate() {
                    if !c.holds() {
                        violations[k] += 1;
                    }
                    worst = worst.min(c.slack / c.rhs.abs().max(1.0));
                }
            }
            Err(e) => return outcome(false, format!("trial {i}: {e}")),
        }
    }
    outcome(
        violations == [0; 4],
        format!("1000 instances per inequality, violations {violations:?}, smallest relative slack {worst:.3e}"),
    )
}

fn block_suite() -> Outcome {
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    let mut unconverged = 0;
    for i in 0..200 {
        match block_trial(derive_seed(SEED ^ 2, i), TrialSizes::BLOCK) {
            Ok(t) => {
                let r = &t.report;
                if !(t.n <= 8 && t.d <= 16 && (1..=2).contains(&t.heads) && t.d_ff <= 32) {
                    return outcome(false, format!("trial {i} out of size range"));
                }
                if !(r.dm_out <= r.v * r.dm_in + 1e-9 * r.dm_in) || !r.bound_holds {
                    violations += 1;
                }
                if !r.spectral_converged {
                    unconverged += 1;
                }
                if r.v.is_finite() && r.dm_in > 0.0 {
                    max_ratio = max_ratio.max(r.dm_out / (r.v * r.dm_in));
                }
            }
            Err(e) => return outcome(false, format!("trial {i}: {e}")),
        }
    }
    outcome(
        violations == 0,
        format!("200 blocks, {violations} violations, tightest d_out/(v d_in) {max_ratio:.4}, {unconverged} unconverged spectral estimates"),
    )
}

fn demo() -> Outcome {
    let d = match contraction_demo(SEED, 8, 16, 2, 32, 12) {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let dms: Vec<f64> = d.trace.representations().iter().map(|h| distance_to_m(h)).collect();
    let all_below = d.report.layers.iter().all(|r| r.v < 1.0);
    let decreasing = dms.windows(2).all(|w| w[1] < w[0]);
    let ratio = dms[12] / dms[0];
    let bound = d.report.v_product;
    let pass = d.trace.num_layers() == 12 && all_below && decreasing && ratio <= bound + 1e-9;
    outcome(
        pass,
        format!(
            "bias scale {}, max v {:.4}, d_M {:.3e} -> {:.3e}, ratio {ratio:.3e} <= prod v {bound:.3e}",
            d.bias_scale,
            d.report.layers.iter().map(|r| r.v).fold(0.0, f64::max),
            dms[0],
            dms[12]
        ),
    )
}

fn sinkhorn_suite() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..500 {
        let mut rng = SplitMix64::new(derive_seed(SEED ^ 3, i));
        let n = rng.range_inclusive(1, 10);
        let spread = rng.uniform(0.0, 4.0);
        let a = Matrix::from_fn(n, n, |_, _| rng.uniform(-spread, spread).exp());
        let lam = sinkhorn(&a, SINKHORN_TOL, SINKHORN_MAX_ITER)
            .and_then(|r| if r.converged { lambda_max_centered(&r.matrix) } else { Ok(f64::INFINITY) });
        match lam {
            Ok(l) => {
                worst = worst.max(l);
                if !(l < 1.0 - 1e-9) {
                    failures += 1;
                }
            }
            Err(e) => return outcome(false, format!("matrix {i}: {e}")),
        }
    }
    outcome(failures == 0, format!("500 matrices, largest lambda {worst:.6}, {failures} failures"))
}

fn graph_identity() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = SplitMix64::new(derive_seed(SEED ^ 4, i));
        let n = rng.range_inclusive(1, 10);
        let d = rng.range_inclusive(1, 12);
        let dh = rng.range_inclusive(1, d);
        let scale = rng.uniform(0.1, 2.0);
        let x = rand_matrix(&mut rng, n, d, -1.0, 1.0);
        let head = HeadParams {
            wq: rand_matrix(&mut rng, d, dh, -scale, scale),
            wk: rand_matrix(&mut rng, d, dh, -scale, scale),
            wvo: Matrix::zeros(d, d),
        };
        let q = x.matmul(&head.wq).unwrap();
        let k = x.matmul(&head.wk).unwrap();
        let g = graph_from_logits(&q.matmul_transposed(&k).unwrap()).unwrap();
        let a = attention_matrix(&x, &head).unwrap();
        worst = worst.max(g.rw_normalized.max_abs_diff(&a));
    }
    outcome(worst <= 1e-12, format!("100 pairs, max abs diff {worst:.3e}"))
}

fn gate_gradient() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = SplitMix64::new(derive_seed(SEED ^ 5, i));
        let l = rng.range_inclusive(1, 4);
        let n = rng.range_inclusive(1, 4);
        let d = rng.range_inclusive(1, 5);
        let layers: Vec<Matrix> = (0..l).map(|_| rand_matrix(&mut rng, n, d, -1.5, 1.5)).collect();
        let up = rand_matrix(&mut rng, n, d, -1.0, 1.0);
        let w: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b = rng.uniform(-1.0, 1.0);
        let input = FusionInput::new(layers.clone()).unwrap();
        let g = gate_fuse_grad(&input, &GateParams { w: w.clone(), b }, &up).unwrap();

        for j in 0..d {
            let fd = central_difference(
                |x| {
                    let mut w2 = w.clone();
                    w2[j] = x;
                    gate_loss(&layers, &w2, b, &up)
                },
                w[j],
            );
            worst = worst.max(rel_err(g.w[j], fd));
        }
        worst = worst.max(rel_err(g.b, central_difference(|x| gate_loss(&layers, &w, x, &up), b)));
        for k in 0..l {
            for t in 0..n {
                for j in 0..d {
                    let fd = central_difference(
                        |x| {
                            let mut ls = layers.clone();
                            ls[k] = with_entry(&layers[k], t, j, x);
                            gate_loss(&ls, &w, b, &up)
                        },
                        layers[k].get(t, j),
                    );
                    worst = worst.max(rel_err(g.layers[k].get(t, j), fd));
                }
            }
        }
    }
    outcome(worst < 1e-5, format!("100 instances, max relative error {worst:.3e}"))
}

fn sharing() -> Outcome {
    let layers = 6;
    let blocks = random_stack(SEED, 5, 8, 2, 16, layers, 0.8).unwrap();
    let x0 = random_matrix(SEED ^ 6, 5, 8, 1.0);
    let mut checked = 0;
    for start in 1..=layers {
        for end in start..=layers {
            let cfg = ShareConfig::new(start, end, layers).unwrap();
            let trace = stack_forward(&x0, &blocks, Some(&cfg)).unwrap();
            let sims = attn_layer_similarity(&trace).unwrap();
            for l in start..end {
                if sims[l - 1] != 1.0 {
                    return outcome(false, format!("range {start}-{end}: similarity {} between layers {l} and {}", sims[l - 1], l + 1));
                }
                checked += 1;
            }
        }
    }

    let (n, d) = (128u64, 768u64);
    let mut giga = Vec::new();
    for s in PUBLISHED_STARTS {
        let map: Vec<usize> = match s {
            Some(s) => share_sources(&ShareConfig::new(s, 12, 12).unwrap()).unwrap(),
            None => (1..=12).collect(),
        };
        let total: u64 = map
            .iter()
            .enumerate()
            .map(|(i, &src)| if src == i + 1 { 3 * n * d * d } else { n * d * d })
            .sum();
        giga.push(format_sig(total as f64 / 1e9, 2));
    }
    outcome(
        giga == PUBLISHED_G,
        format!("{checked} in-range layer pairs exactly 1.0, counting from source maps {giga:?}"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst_dm = 0.0f64;
    for i in 0..1000 {
        let mut rng = SplitMix64::new(derive_seed(SEED ^ 7, i));
        let n = rng.range_inclusive(1, 12);
        let d = rng.range_inclusive(1, 12);
        let offset = rng.uniform(-5.0, 5.0);
        let h = rand_matrix(&mut rng, n, d, offset - 1.0, offset + 1.0);
        let want = distance_least_squares(&h);
        let got = distance_to_m(&h);
        let rel = if want == 0.0 { got } else { (got - want).abs() / want };
        worst_dm = worst_dm.max(rel);
    }
    let mut worst_block = 0.0f64;
    for i in 0..50 {
        let mut rng = SplitMix64::new(derive_seed(SEED ^ 8, i));
        let n = rng.range_inclusive(1, 8);
        let heads = rng.range_inclusive(1, 2);
        let d = heads * rng.range_inclusive(if heads == 1 { 2 } else { 1 }, 16 / heads);
        let d_ff = rng.range_inclusive(1, 32);
        let scale = rng.uniform(0.05, 1.0);
        let p = random_block(rng.next_u64(), n, d, heads, d_ff, scale).unwrap();
        let x = rand_matrix(&mut rng, n, d, -2.0, 2.0);
        let (y, _) = block_forward(&x, &p).unwrap();
        worst_block = worst_block.max(max_abs_diff(&y, &block_forward_loops(&x, &p)));
    }
    outcome(
        worst_dm <= 1e-12 && worst_block <= 1e-12,
        format!("distance max relative error {worst_dm:.3e} over 1000 matrices, block max abs diff {worst_block:.3e} over 50 blocks"),
    )
}

/// Name, time budget and check of one criterion.
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("sharing FLOP table", Duration::from_secs(1), flop_table),
        ("subspace-distance inequalities", Duration::from_secs(30), lemma_suite),
        ("block contraction bound", Duration::from_secs(60), block_suite),
        ("12-layer contraction demo", Duration::from_secs(10), demo),
        ("Sinkhorn centered eigenvalue", Duration::from_secs(30), sinkhorn_suite),
        ("graph normalization identity", Duration::from_secs(5), graph_identity),
        ("gate gradient", Duration::from_secs(10), gate_gradient),
        ("attention sharing equality", Duration::from_secs(60), sharing),
        ("oracle equivalence", Duration::from_secs(60), oracle_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took <= *budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {} [{:.3}s, budget {}s{}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
