//! Fixtures shared by the criterion benches.

use smoothlab::transformer::{random_matrix, random_stack};
use smoothlab::{BlockParams, Matrix};

/// A seeded stack together with an input of matching width.
pub fn stack_fixture(n: usize, d: usize, heads: usize, d_ff: usize, layers: usize) -> (Matrix, Vec<BlockParams>) {
    let blocks = random_stack(42, n, d, heads, d_ff, layers, 0.1).expect("valid dimensions");
    (random_matrix(7, n, d, 1.0), blocks)
}
