use smoothlab::diagnostics::cos_sim;
use smoothlab::fusion::{max_fuse, FusionInput};
use smoothlab::transformer::{random_matrix, random_stack, stack_forward};

// Seeded 6-layer stack whose last layer is more similar than some earlier
// layer; max fusion over layers 1..L gives a lower similarity than layer L.
#[test]
fn max_fusion_lowers_similarity_on_fixture() {
    let blocks = random_stack(31, 8, 8, 2, 16, 6, 1.0).unwrap();
    let x0 = random_matrix(32, 8, 8, 1.0);
    let trace = stack_forward(&x0, &blocks, None).unwrap();
    let sims: Vec<f64> = trace.representations().iter().map(|h| cos_sim(h).unwrap()).collect();
    let last = *sims.last().unwrap();
    assert!(sims[1..].iter().any(|&s| s < last));
    let layers = trace.blocks.iter().map(|b| b.output.clone()).collect();
    let fused = max_fuse(&FusionInput::new(layers).unwrap());
    let fused_sim = cos_sim(&fused).unwrap();
    assert!(fused_sim <= last);
    assert!((last - 0.9997013721577707).abs() < 1e-12);
    assert!((fused_sim - 0.9701105269113645).abs() < 1e-12);
}
