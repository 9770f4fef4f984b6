//! Shared fixtures for the criterion benchmarks.

use mziforge::imperfect::stream_rng;
use mziforge::linalg::{random_matrix, random_unitary};
use mziforge::network::{build_model, IpnnModel};
use mziforge::ComplexMatrix;
use num_complex::Complex64;

/// Haar-random unitary of size `n`, fixed per `n`.
pub fn unitary(n: usize) -> ComplexMatrix {
    random_unitary(n, &mut stream_rng(n as u64, 0))
}

/// Square model with `depth` random `n×n` layers.
pub fn model(n: usize, depth: usize) -> IpnnModel {
    let mut rng = stream_rng(1000 + n as u64, depth as u64);
    let weights: Vec<ComplexMatrix> = (0..depth).map(|_| random_matrix(n, n, &mut rng)).collect();
    build_model(&weights).expect("random weights decompose")
}

/// `count` random inputs of dimension `n`.
pub fn inputs(n: usize, count: usize) -> Vec<Vec<Complex64>> {
    let mut rng = stream_rng(2000 + n as u64, 0);
    (0..count).map(|_| random_matrix(n, 1, &mut rng).column(0)).collect()
}
