//! Deterministic synthetic model ensembles with known accuracy ordering.
//!
//! Every (model, sample) pair draws from its own ChaCha8 stream, so output
//! does not depend on thread count. Token texts are placeholder symbols.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{expand_answer, original_embedding_id, resample_embedding_id, OptionMap};
use crate::error::{Error, Result};
use crate::model::{
    CellKey, EmbeddingSet, GenerationRecord, PerformanceTable, ResampleEvent, TaskKind, TokenEvent,
};

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
const WORD_POOL: u64 = 400;
const BETA_CONCENTRATION: f64 = 12.0;
const MIN_PROB: f64 = 1e-12;
/// Stream slot reserved for per-sample (model-independent) draws.
const SAMPLE_SLOT: u64 = u32::MAX as u64;
/// Sample slot reserved for per-model draws.
const MODEL_SLOT: u64 = u32::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_models: usize,
    pub n_samples: usize,
    pub task_kind: TaskKind,
    pub accuracy_range: (f64, f64),
    /// Std. dev. of the per-model log-scale distortion of token NLLs.
    pub calibration_noise: f64,
    pub vocab_sizes: Vec<u64>,
    pub resamples_per_record: usize,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default = "default_dataset_id")]
    pub dataset_id: String,
}

fn default_dataset_id() -> String {
    "sim".into()
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_models: 10,
            n_samples: 200,
            task_kind: TaskKind::Vqa,
            accuracy_range: (0.2, 0.9),
            calibration_noise: 0.0,
            vocab_sizes: vec![32000],
            resamples_per_record: 5,
            temperature: 0.7,
            seed: 0,
            dataset_id: default_dataset_id(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.accuracy_range;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return bad(format!(
                "accuracy_range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            ));
        }
        if self.n_models < 2 {
            return bad(format!(
                "n_models must be at least 2, got {}",
                self.n_models
            ));
        }
        if self.n_samples == 0 || self.n_samples as u64 >= MODEL_SLOT {
            return bad(format!("n_samples out of range: {}", self.n_samples));
        }
        if self.n_models as u64 >= SAMPLE_SLOT {
            return bad(format!("n_models out of range: {}", self.n_models));
        }
        if !(self.calibration_noise.is_finite() && self.calibration_noise >= 0.0) {
            return bad(format!(
                "calibration_noise must be >= 0, got {}",
                self.calibration_noise
            ));
        }
        if self.vocab_sizes.is_empty() || self.vocab_sizes.iter().any(|&v| v < 2) {
            return bad("vocab_sizes must be non-empty with every size >= 2".into());
        }
        if self.resamples_per_record > 0
            && !(self.temperature.is_finite() && self.temperature > 0.0)
        {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.dataset_id.is_empty() {
            return bad("dataset_id must be non-empty".into());
        }
        Ok(())
    }

    /// Target accuracy of model `m`, evenly spaced over the range.
    pub fn target_accuracy(&self, m: usize) -> f64 {
        let (lo, hi) = self.accuracy_range;
        lo + (hi - lo) * m as f64 / (self.n_models - 1) as f64
    }

    pub fn model_id(&self, m: usize) -> String {
        format!("sim-m{m:0w$}", w = digits(self.n_models - 1).max(2))
    }

    pub fn sample_id(&self, s: usize) -> String {
        format!("s{s:0w$}", w = digits(self.n_samples - 1).max(4))
    }
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub records: Vec<GenerationRecord>,
    /// Realized accuracy per model.
    pub truth: PerformanceTable,
    /// Model ids by realized accuracy, best first; ties by id.
    pub true_order: Vec<String>,
}

fn stream(seed: u64, model: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((model << 32) | sample);
    rng
}

fn word(rng: &mut ChaCha8Rng, base: u64) -> String {
    format!("w{}", base + rng.random_range(0..WORD_POOL))
}

fn dataset_word_base(dataset_id: &str) -> u64 {
    let h = Sha256::digest(dataset_id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % 10_000
}

/// Model-independent content of one sample.
struct SamplePlan {
    gold: Vec<String>,
    prompt: String,
    options: Option<BTreeMap<String, String>>,
    vocab_base: u64,
}

fn sample_plan(cfg: &EnsembleConfig, s: usize) -> SamplePlan {
    let mut rng = stream(cfg.seed, SAMPLE_SLOT, s as u64);
    let base = dataset_word_base(&cfg.dataset_id);
    let prompt_len = rng.random_range(6..=10);
    let prompt = (0..prompt_len)
        .map(|_| word(&mut rng, base))
        .collect::<Vec<_>>()
        .join(" ");
    match cfg.task_kind {
        TaskKind::Mcvq => {
            let gold = LETTERS[rng.random_range(0..LETTERS.len())].to_owned();
            let options = LETTERS
                .iter()
                .map(|l| {
                    let n = rng.random_range(1..=3);
                    let text = (0..n).map(|_| word(&mut rng, base)).collect::<Vec<_>>();
                    (l.to_string(), text.join(" "))
                })
                .collect();
            SamplePlan {
                gold: vec![gold],
                prompt,
                options: Some(options),
                vocab_base: base,
            }
        }
        TaskKind::Vqa => {
            let len = rng.random_range(3..=12);
            SamplePlan {
                gold: (0..len).map(|_| word(&mut rng, base)).collect(),
                prompt,
                options: None,
                vocab_base: base,
            }
        }
    }
}

/// A different answer of the same kind; always differs from `answer`.
fn perturb(kind: TaskKind, answer: &[String], base: u64, rng: &mut ChaCha8Rng) -> Vec<String> {
    match kind {
        TaskKind::Mcvq => {
            let others: Vec<&str> = LETTERS
                .iter()
                .copied()
                .filter(|l| *l != answer[0])
                .collect();
            vec![others[rng.random_range(0..others.len())].to_owned()]
        }
        TaskKind::Vqa => {
            let mut out = answer.to_vec();
            let changes = rng.random_range(1..=out.len().div_ceil(2));
            // distinct positions, so a later change cannot restore the gold word
            for i in index::sample(rng, out.len(), changes) {
                let mut w = word(rng, base);
                while w == out[i] {
                    w = word(rng, base);
                }
                out[i] = w;
            }
            out
        }
    }
}

struct ModelParams {
    accuracy: f64,
    /// Multiplier applied to every token NLL.
    nll_bias: f64,
    vocab_size: u64,
}

fn model_params(cfg: &EnsembleConfig, m: usize) -> ModelParams {
    let mut rng = stream(cfg.seed, m as u64, MODEL_SLOT);
    let z: f64 = StandardNormal.sample(&mut rng);
    let vocab_size = cfg.vocab_sizes[rng.random_range(0..cfg.vocab_sizes.len())];
    ModelParams {
        accuracy: cfg.target_accuracy(m),
        nll_bias: (cfg.calibration_noise * z).exp(),
        vocab_size,
    }
}

/// Normalized entropy of the two-level distribution that puts `p` on the
/// chosen token and spreads `1 - p` evenly over the other `|W| - 1` tokens.
fn two_point_entropy(p: f64, vocab_size: u64) -> f64 {
    let rest = 1.0 - p;
    let mut h = if p > 0.0 { -p * p.ln() } else { 0.0 };
    if rest > 0.0 {
        h += -rest * rest.ln() + rest * ((vocab_size - 1) as f64).ln();
    }
    (h / (vocab_size as f64).ln()).clamp(0.0, 1.0)
}

fn generate_record(
    cfg: &EnsembleConfig,
    m: usize,
    s: usize,
    params: &ModelParams,
    plan: &SamplePlan,
) -> (GenerationRecord, bool) {
    let mut rng = stream(cfg.seed, m as u64, s as u64);
    let a = params.accuracy;
    let correct = rng.random::<f64>() < a;
    let answer = if correct {
        plan.gold.clone()
    } else {
        perturb(cfg.task_kind, &plan.gold, plan.vocab_base, &mut rng)
    };

    let mean = if correct {
        0.55 + 0.4 * a
    } else {
        0.2 + 0.4 * a
    };
    let beta = Beta::new(mean * BETA_CONCENTRATION, (1.0 - mean) * BETA_CONCENTRATION)
        .expect("positive shape parameters");
    let tokens = answer
        .iter()
        .map(|t| {
            let p: f64 = beta.sample(&mut rng).clamp(MIN_PROB, 1.0);
            let logprob = p.ln() * params.nll_bias;
            let entropy = two_point_entropy(logprob.exp(), params.vocab_size);
            TokenEvent::new(t.clone(), logprob).with_entropy(entropy)
        })
        .collect();

    let resamples = (cfg.resamples_per_record > 0).then(|| {
        let agree = (0.25 + 0.6 * a + if correct { 0.1 } else { -0.1 }).clamp(0.0, 1.0);
        (0..cfg.resamples_per_record)
            .map(|_| {
                let text = if rng.random::<f64>() < agree {
                    answer.join(" ")
                } else {
                    perturb(cfg.task_kind, &answer, plan.vocab_base, &mut rng).join(" ")
                };
                ResampleEvent {
                    temperature: cfg.temperature,
                    output_text: text,
                }
            })
            .collect()
    });

    let record = GenerationRecord {
        model_id: cfg.model_id(m),
        dataset_id: cfg.dataset_id.clone(),
        sample_id: cfg.sample_id(s),
        task_kind: cfg.task_kind,
        prompt: Some(plan.prompt.clone()),
        output_text: answer.join(" "),
        vocab_size: params.vocab_size,
        tokens,
        gold_answer: Some(plan.gold.join(" ")),
        correct: None,
        resamples,
    };
    (record, correct)
}

/// Generates one dataset's worth of records for every model, ordered by
/// model then sample.
pub fn generate_ensemble(cfg: &EnsembleConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let plans: Vec<SamplePlan> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| sample_plan(cfg, s))
        .collect();
    let params: Vec<ModelParams> = (0..cfg.n_models).map(|m| model_params(cfg, m)).collect();
    let generated: Vec<(GenerationRecord, bool)> = (0..cfg.n_models * cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let (m, s) = (i / cfg.n_samples, i % cfg.n_samples);
            generate_record(cfg, m, s, &params[m], &plans[s])
        })
        .collect();

    let mut truth = PerformanceTable::new("accuracy");
    let mut realized = Vec::with_capacity(cfg.n_models);
    for (m, chunk) in generated.chunks(cfg.n_samples).enumerate() {
        let hits = chunk.iter().filter(|(_, c)| *c).count();
        let acc = hits as f64 / cfg.n_samples as f64;
        truth.insert(CellKey::new(cfg.model_id(m), cfg.dataset_id.clone()), acc)?;
        realized.push((cfg.model_id(m), acc));
    }
    realized.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Ensemble {
        records: generated.into_iter().map(|(r, _)| r).collect(),
        truth,
        true_order: realized.into_iter().map(|(m, _)| m).collect(),
    })
}

/// Option texts for every MCVQ sample of `cfg`; empty for VQA.
pub fn option_map(cfg: &EnsembleConfig) -> Result<OptionMap> {
    cfg.validate()?;
    Ok((0..cfg.n_samples)
        .filter_map(|s| sample_plan(cfg, s).options.map(|o| (cfg.sample_id(s), o)))
        .collect())
}

/// Deterministic bag-of-words embedding: lowercase word counts hashed into
/// `dim` buckets, L2-normalized. Non-empty texts never embed as zero; an
/// empty text does.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0f64; dim];
    for w in text.split_whitespace() {
        let h = Sha256::digest(w.to_lowercase().as_bytes());
        let bucket = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % dim;
        v[bucket] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter()
        .map(|x| if norm > 0.0 { (x / norm) as f32 } else { 0.0 })
        .collect()
}

/// Embedding sets for self-consistency, one per (model, dataset) cell, with
/// rows for the original answer and each resample. With `options`, MCVQ
/// answers are expanded to their option text before embedding.
pub fn consistency_embeddings(
    records: &[GenerationRecord],
    dim: usize,
    options: Option<&OptionMap>,
) -> Result<BTreeMap<CellKey, EmbeddingSet>> {
    let mut rows: BTreeMap<CellKey, Vec<(String, Vec<f32>)>> = BTreeMap::new();
    for r in records {
        let text = |t: &str| -> Result<String> {
            match options {
                Some(opts) if r.task_kind == TaskKind::Mcvq => expand_answer(t, &r.sample_id, opts),
                _ => Ok(t.to_owned()),
            }
        };
        let cell = rows.entry(r.cell()).or_default();
        cell.push((
            original_embedding_id(&r.sample_id),
            hash_embedding(&text(&r.output_text)?, dim),
        ));
        for (i, re) in r.resamples.iter().flatten().enumerate() {
            cell.push((
                resample_embedding_id(&r.sample_id, i + 1),
                hash_embedding(&text(&re.output_text)?, dim),
            ));
        }
    }
    rows.into_iter()
        .map(|(k, v)| Ok((k, EmbeddingSet::from_rows(v)?)))
        .collect()
}

/// Prompt embeddings of one dataset, one row per distinct sample id.
pub fn prompt_embeddings(records: &[GenerationRecord], dim: usize) -> Result<EmbeddingSet> {
    let mut prompts: BTreeMap<&str, &str> = BTreeMap::new();
    for r in records {
        if let Some(p) = &r.prompt {
            prompts.entry(&r.sample_id).or_insert(p);
        }
    }
    EmbeddingSet::from_rows(
        prompts
            .into_iter()
            .map(|(id, p)| (id.to_owned(), hash_embedding(p, dim)))
            .collect(),
    )
}
