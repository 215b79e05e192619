//! Synthetic request sequences for training and testing the predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{FeatureFrame, Sample};

/// Zipf probabilities `p_k ∝ 1/(k+1)^s` over `n` items, item 0 most popular.
pub fn zipf_probs(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|k| 1.0 / ((k + 1) as f64).powf(s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Draws an index from a discrete distribution by inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfSequenceSpec {
    pub catalog: usize,
    pub exponent: f64,
    pub requests_per_slot: usize,
    pub window: usize,
    pub samples: usize,
    pub locations: usize,
    pub time_buckets: usize,
    /// Ranking is rotated by one item every `shift_every` slots (0 = static).
    pub shift_every: usize,
    pub seed: u64,
}

impl Default for ZipfSequenceSpec {
    fn default() -> Self {
        Self {
            catalog: 20,
            exponent: 1.0,
            requests_per_slot: 50,
            window: 5,
            samples: 200,
            locations: 1,
            time_buckets: 1,
            shift_every: 0,
            seed: 0,
        }
    }
}

fn slot_probs(base: &[f64], slot: usize, shift_every: usize) -> Vec<f64> {
    let n = base.len();
    let shift = if shift_every == 0 { 0 } else { (slot / shift_every) % n };
    (0..n).map(|i| base[(i + n - shift) % n]).collect()
}

/// Windows of normalized per-slot request counts with the next slot's
/// normalized counts as the target.
pub fn zipf_sequences(spec: &ZipfSequenceSpec) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = zipf_probs(spec.catalog, spec.exponent);
    let mut out = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let start = rng.random_range(0..1000usize);
        let location = rng.random_range(0..spec.locations.max(1));
        let mut frames = Vec::with_capacity(spec.window);
        let mut target = Vec::new();
        for t in 0..=spec.window {
            let slot = start + t;
            let probs = slot_probs(&base, slot, spec.shift_every);
            let mut counts = vec![0.0; spec.catalog];
            for _ in 0..spec.requests_per_slot {
                counts[sample_index(&probs, &mut rng)] += 1.0;
            }
            let f = FeatureFrame::from_counts(&counts, location, slot % spec.time_buckets.max(1), vec![0.0]);
            if t == spec.window {
                target = f.requests;
            } else {
                frames.push(f);
            }
        }
        out.push(Sample { frames, target });
    }
    out
}
