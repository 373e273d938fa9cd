#![allow(dead_code)]

use cbr_core::operators::{build_dense_positive, DataVector, ForwardOperator, ImageVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub op: ForwardOperator,
    pub truth: ImageVector,
    pub clean: DataVector,
}

/// Dense positive operator of random size `n × m` with `n, m ≤ max_dim`, and
/// a random nonnegative image with a few exact zeros.
pub fn random_instance(seed: u64, min_dim: usize, max_dim: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(min_dim..=max_dim);
    let m = rng.random_range(min_dim..=max_dim);
    let op = build_dense_positive(n, m, seed, 0.05).unwrap();
    let truth = random_image(&mut rng, m);
    let clean = op.apply(&truth).unwrap();
    Instance { op, truth, clean }
}

pub fn random_image(rng: &mut impl Rng, m: usize) -> ImageVector {
    let mut v: Vec<f64> = (0..m)
        .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 10.0 })
        .collect();
    v[0] += 1.0;
    ImageVector::from_vec(v).unwrap()
}

pub fn positive_image(rng: &mut impl Rng, m: usize) -> ImageVector {
    ImageVector::from_vec((0..m).map(|_| 0.1 + rng.random::<f64>() * 5.0).collect()).unwrap()
}

/// `N × M` operator (`N ≥ M`) with an identity block on top plus positive
/// random coupling of size `coupling`, and a strictly positive image.
pub fn coupled_instance(seed: u64, coupling: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=16usize);
    let n = m + rng.random_range(0..=8usize);
    let entries = ndarray::Array2::from_shape_fn((n, m), |(i, j)| {
        coupling * (0.01 + rng.random::<f64>()) + if i == j { 1.0 } else { 0.0 }
    });
    let op = ForwardOperator::new(entries).unwrap();
    let truth = ImageVector::from_vec((0..m).map(|_| 0.5 + rng.random::<f64>() * 10.0).collect()).unwrap();
    let clean = op.apply(&truth).unwrap();
    Instance { op, truth, clean }
}
