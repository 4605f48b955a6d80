//! Self-consistency scores: agreement between stochastic resamples and the
//! greedy answer, measured with unigram BLEU or embedding cosine similarity.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::extract_option_letter;
use crate::model::{EmbeddingSet, GenerationRecord, TaskKind};
use crate::numeric::stable_mean;
use crate::uncertainty::check_single_cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Bleu1,
    EmbedCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionRule {
    Raw,
    ExpandedAnswer,
}

/// Option texts per sample: `{sample_id: {letter: option_text}}`.
pub type OptionMap = BTreeMap<String, BTreeMap<String, String>>;

pub fn load_option_map(path: &Path) -> Result<OptionMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn bleu_tokens(s: &str) -> Vec<String> {
    let stripped: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase();
    stripped.split_whitespace().map(str::to_owned).collect()
}

/// Unigram BLEU: clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand = bleu_tokens(candidate);
    let refs = bleu_tokens(reference);
    if cand.is_empty() {
        return if refs.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *ref_counts.entry(t.as_str()).or_default() += 1;
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in &cand {
        *cand_counts.entry(t.as_str()).or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(t, &n)| n.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let precision = clipped as f64 / c;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    precision * bp
}

pub fn embed_cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Embedding row id of the greedy answer for `sample_id`.
pub fn original_embedding_id(sample_id: &str) -> String {
    format!("{sample_id}/orig")
}

/// Embedding row id of the `index`-th resample (1-based).
pub fn resample_embedding_id(sample_id: &str, index: usize) -> String {
    format!("{sample_id}/{index}")
}

/// Rewrites an option-letter answer as `"X. <option text>"`.
pub fn expand_answer(text: &str, sample_id: &str, options: &OptionMap) -> Result<String> {
    let record_err = |reason: String| Error::Record {
        record: sample_id.to_owned(),
        reason,
    };
    let letter = extract_option_letter(text)
        .ok_or_else(|| record_err(format!("no option letter in '{}'", text.trim())))?;
    let sample_opts = options
        .get(sample_id)
        .ok_or_else(|| record_err("sample missing from option map".into()))?;
    let option_text = sample_opts
        .get(letter.encode_utf8(&mut [0; 4]) as &str)
        .ok_or_else(|| record_err(format!("unknown option letter '{letter}'")))?;
    Ok(format!("{letter}. {option_text}"))
}

/// Inputs beyond the record that some similarity/expansion settings need.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConsistencyInputs<'a> {
    /// Rows keyed by [`original_embedding_id`] and [`resample_embedding_id`].
    pub embeddings: Option<&'a EmbeddingSet>,
    pub options: Option<&'a OptionMap>,
}

/// Mean similarity of each resample to the original answer.
///
/// With [`ExpansionRule::ExpandedAnswer`] both texts of an MCVQ record are
/// expanded to their full option text before comparison. Embedding rows are
/// precomputed, so under cosine similarity the supplied set must already hold
/// embeddings of the expanded texts; expansion is still applied to check that
/// every answer maps to a known option. Negative cosines count as 0.
pub fn self_consistency(
    record: &GenerationRecord,
    sim: SimilarityKind,
    expansion: ExpansionRule,
    inputs: ConsistencyInputs<'_>,
) -> Result<f64> {
    let record_err = |reason: String| Error::Record {
        record: record.label(),
        reason,
    };
    let resamples = record
        .resamples
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| record_err("no resamples".into()))?;

    let expand = expansion == ExpansionRule::ExpandedAnswer && record.task_kind == TaskKind::Mcvq;
    let prepare = |text: &str| -> Result<String> {
        if expand {
            let options = inputs
                .options
                .ok_or_else(|| record_err("expanded answers need an option map".into()))?;
            expand_answer(text, &record.sample_id, options).map_err(|e| record_err(e.to_string()))
        } else {
            Ok(text.to_owned())
        }
    };
    let original = prepare(&record.output_text)?;

    let mut sims = Vec::with_capacity(resamples.len());
    match sim {
        SimilarityKind::Bleu1 => {
            for r in resamples {
                sims.push(bleu1(&prepare(&r.output_text)?, &original));
            }
        }
        SimilarityKind::EmbedCosine => {
            let set = inputs
                .embeddings
                .ok_or_else(|| record_err("cosine similarity needs an embedding set".into()))?;
            let row = |id: String| {
                set.get(&id)
                    .ok_or_else(|| record_err(format!("missing embedding row '{id}'")))
            };
            let orig_vec = row(original_embedding_id(&record.sample_id))?;
            for (i, r) in resamples.iter().enumerate() {
                prepare(&r.output_text)?;
                let v = row(resample_embedding_id(&record.sample_id, i + 1))?;
                let c = embed_cosine(v, orig_vec).map_err(|e| record_err(e.to_string()))?;
                sims.push(c.max(0.0));
            }
        }
    }
    Ok(stable_mean(&sims).expect("non-empty").clamp(0.0, 1.0))
}

/// Mean self-consistency over the records of one (model, dataset) cell.
pub fn consistency_dataset_score(
    records: &[GenerationRecord],
    sim: SimilarityKind,
    expansion: ExpansionRule,
    inputs: ConsistencyInputs<'_>,
) -> Result<f64> {
    check_single_cell(records)?;
    let values = records
        .iter()
        .map(|r| self_consistency(r, sim, expansion, inputs))
        .collect::<Result<Vec<_>>>()?;
    Ok(stable_mean(&values).expect("non-empty"))
}
