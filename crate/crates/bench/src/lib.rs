//! Deterministic inputs shared by the benchmarks.

use great_core::dataset::normalize_coords;
use great_core::mhacot::KnowledgeRecord;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` normalised points scattered over a unit sphere shell.
pub fn cloud(seed: u64, n: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Array2<f64> = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0));
    for mut r in a.rows_mut() {
        let len: f64 = r.dot(&r).sqrt().max(1e-9);
        r /= len;
    }
    normalize_coords(&a)
}

pub fn pixels(seed: u64, size: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((3, size, size), || rng.random_range(0.0..1.0))
}

/// A prediction and a sparse soft label of length `n`.
pub fn heatmaps(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
    let label = (0..n)
        .map(|_| if rng.random_bool(0.2) { rng.random_range(0.5..1.0) } else { 0.0 })
        .collect();
    (phi, label)
}

pub fn record() -> KnowledgeRecord {
    KnowledgeRecord {
        image_id: "bench".into(),
        object_text: "the handle is a curved loop attached to the side of the cylindrical body".into(),
        affordance_texts: [
            "a hand wraps around the handle to lift the mug".into(),
            "carry a bucket by its handle".into(),
            "hold a pan by its grip".into(),
        ],
    }
}
