mod support;

use smoothlab::diagnostics::distance_to_m;
use smoothlab::fusion::{gate_fuse_grad, FusionInput, GateParams};
use smoothlab::rng::SplitMix64;
use smoothlab::transformer::{block_forward, random_block, random_matrix};

use support::oracles::*;

#[test]
fn block_forward_matches_loops() {
    let p = random_block(2024, 4, 8, 2, 16, 0.5).unwrap();
    let x = random_matrix(77, 4, 8, 1.0);
    let (y, _) = block_forward(&x, &p).unwrap();
    assert!(max_abs_diff(&y, &block_forward_loops(&x, &p)) < 1e-12);
}

#[test]
fn distance_matches_least_squares_and_pairwise() {
    for seed in 0..200 {
        let mut rng = SplitMix64::new(seed);
        let n = rng.range_inclusive(1, 9);
        let d = rng.range_inclusive(1, 9);
        let h = random_matrix(seed, n, d, 3.0);
        let got = distance_to_m(&h);
        let ls = distance_least_squares(&h);
        let pw = distance_pairwise(&h);
        assert!((got - ls).abs() <= 1e-12 * ls.max(1e-300), "seed {seed}");
        assert!((ls - pw).abs() <= 1e-10 * ls.max(1e-300), "seed {seed}");
    }
}

#[test]
fn gate_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let layers: Vec<_> = (0..3).map(|k| random_matrix(seed * 10 + k, 3, 4, 1.0)).collect();
        let up = random_matrix(seed + 1000, 3, 4, 1.0);
        let mut rng = SplitMix64::new(seed);
        let w: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b = rng.uniform(-1.0, 1.0);
        let input = FusionInput::new(layers.clone()).unwrap();
        let g = gate_fuse_grad(&input, &GateParams { w: w.clone(), b }, &up).unwrap();

        for j in 0..4 {
            let fd = central_difference(
                |x| {
                    let mut w2 = w.clone();
                    w2[j] = x;
                    gate_loss(&layers, &w2, b, &up)
                },
                w[j],
            );
            assert!(rel_err(g.w[j], fd) < 1e-5, "seed {seed} w[{j}]");
        }
        let fd = central_difference(|x| gate_loss(&layers, &w, x, &up), b);
        assert!(rel_err(g.b, fd) < 1e-5, "seed {seed} b");
        let fd = central_difference(
            |x| {
                let mut ls = layers.clone();
                ls[1] = with_entry(&layers[1], 2, 3, x);
                gate_loss(&ls, &w, b, &up)
            },
            layers[1].get(2, 3),
        );
        assert!(rel_err(g.layers[1].get(2, 3), fd) < 1e-5, "seed {seed} H");
    }
}
