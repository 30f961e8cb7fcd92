//! Seeded random instance generators for tests, benchmarks and the self-test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::measure::{Instance, PointCloud, VectorMeasure};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `len` points uniform in `[-1, 1]^n`.
pub fn random_cloud<R: Rng>(rng: &mut R, n: usize, len: usize) -> Result<PointCloud> {
    let coords = (0..n * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PointCloud::new(n, coords)
}

/// Weights uniform in `[-1, 1]^m` with the mean removed, so the total mass
/// vanishes up to rounding.
pub fn random_zero_mass<R: Rng>(rng: &mut R, m: usize, len: usize) -> Result<VectorMeasure> {
    let mut w: Vec<f64> = (0..m * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for c in 0..m {
        let mean = (0..len).map(|i| w[i * m + c]).sum::<f64>() / len as f64;
        (0..len).for_each(|i| w[i * m + c] -= mean);
    }
    VectorMeasure::new(m, w)
}

pub fn random_instance<R: Rng>(rng: &mut R, n: usize, m: usize, len: usize) -> Result<Instance> {
    let cloud = random_cloud(rng, n, len)?;
    let measure = random_zero_mass(rng, m, len)?;
    Instance::from_parts(cloud, measure)
}
