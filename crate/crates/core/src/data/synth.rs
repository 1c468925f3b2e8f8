use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset, Split};
use crate::numerics::Tensor;

/// Gaussian blobs: class `k` samples are `center_k + spread * N(0, I)`,
/// clamped to `[0, 1]`. Centers are uniform in `[0.1, 0.9]^d`. Samples are
/// ordered by class; the result is a function of the arguments only.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 || dim < classes {
        return Err(DataError::Invalid(format!(
            "blobs need c >= 2 and d >= c (c = {classes}, d = {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push((c + spread * z).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let features = Tensor::from_vec(&[n, dim], data).expect("length by construction");
    Dataset::new(features, labels, classes, Split::Train)
}
