//! Deterministic inputs shared by the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqrank_core::synth::{generate_ensemble, EnsembleConfig};
use uqrank_core::{EmbeddingSet, GenerationRecord};

/// Two score vectors of length `n` with a sprinkling of ties.
pub fn score_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> {
        (0..n)
            .map(|_| (rng.random_range(0.0..1.0f64) * 1e3).round())
            .collect()
    };
    (draw(), draw())
}

/// Records of a single simulated model on one dataset.
pub fn cell_records(n_samples: usize, seed: u64) -> Vec<GenerationRecord> {
    let cfg = EnsembleConfig {
        n_models: 1,
        n_samples,
        seed,
        ..EnsembleConfig::default()
    };
    generate_ensemble(&cfg).expect("valid config").records
}

/// `n` Gaussian-ish rows of width `dim`.
pub fn embedding_set(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|i| {
            let v = (0..dim)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).sum())
                .collect();
            (format!("r{i}"), v)
        })
        .collect();
    EmbeddingSet::from_rows(rows).expect("non-empty rows")
}

/// Random candidate/reference sentences over a small vocabulary.
pub fn sentence_pairs(count: usize, seed: u64) -> Vec<(String, String)> {
    const WORDS: [&str; 12] = [
        "a", "red", "bus", "on", "the", "street", "two", "cats", "sitting", "near", "window", "yes",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..16);
        (0..n)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    (0..count)
        .map(|_| (sentence(&mut rng), sentence(&mut rng)))
        .collect()
}
