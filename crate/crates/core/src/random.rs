//! Seeded standard-normal fixtures. The same seed yields the same values on
//! every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Matrix, Shape4, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let data = normal_vec(&mut rng(seed), rows * cols);
    Matrix::new(rows, cols, data).expect("normal samples are finite")
}

pub fn random_tensor(shape: Shape4, seed: u64) -> Tensor4 {
    let data = normal_vec(&mut rng(seed), shape.len());
    Tensor4::new(shape, data).expect("normal samples are finite")
}
