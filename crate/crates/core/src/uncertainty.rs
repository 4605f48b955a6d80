//! Softmax-probability uncertainty scores.
//!
//! Token-level scores read the first or the last content token (the one just
//! before EOS). Sequence-level scores take the worst token or the mean over
//! all tokens. Entropies are normalized by `ln |W|` so models with different
//! vocabularies land on the same `[0, 1]` scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::MASS_TOLERANCE;
use crate::model::{GenerationRecord, MethodKind, TokenEvent};
use crate::numeric::stable_mean;

/// Floor applied to non-finite log-probabilities before use.
pub const LOGPROB_FLOOR: f64 = -700.0;

/// Share of fallback entropies above which a cell is flagged in reports.
pub const FALLBACK_FLAG_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    First,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqAggregation {
    WorstToken,
    Mean,
}

fn clamped_logprob(lp: f64) -> f64 {
    if lp.is_finite() {
        lp
    } else {
        LOGPROB_FLOOR
    }
}

fn nll(tok: &TokenEvent) -> f64 {
    // `+ 0.0` folds -0.0 into 0.0
    -clamped_logprob(tok.logprob) + 0.0
}

fn select(record: &GenerationRecord, pos: TokenPosition) -> &TokenEvent {
    match pos {
        TokenPosition::First => &record.tokens[0],
        TokenPosition::Penultimate => &record.tokens[record.tokens.len() - 1],
    }
}

/// Mean that never leaves `[min, max]` of its inputs, even after rounding.
fn bounded_mean(values: &[f64]) -> f64 {
    let sum: f64 = values.iter().sum();
    let mean = sum / values.len() as f64;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mean.clamp(lo, hi)
}

fn aggregate(values: &[f64], agg: SeqAggregation) -> f64 {
    match agg {
        SeqAggregation::WorstToken => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SeqAggregation::Mean => bounded_mean(values),
    }
}

/// Negative log-likelihood of the token at `pos`.
///
/// # Panics
/// If `record.tokens` is empty; ingestion never produces such records.
pub fn token_nll(record: &GenerationRecord, pos: TokenPosition) -> f64 {
    nll(select(record, pos))
}

pub fn sequence_nll(record: &GenerationRecord, agg: SeqAggregation) -> f64 {
    let values: Vec<f64> = record.tokens.iter().map(nll).collect();
    aggregate(&values, agg)
}

pub fn perplexity(record: &GenerationRecord) -> f64 {
    sequence_nll(record, SeqAggregation::Mean).exp()
}

/// Normalized entropy estimated from a top-k list, with the unlisted tail
/// mass lumped into one pseudo-token.
pub fn entropy_from_topk(top_logprobs: &[(String, f64)], vocab_size: u64) -> Result<f64> {
    if top_logprobs.is_empty() {
        return Err(Error::Empty("top_logprobs"));
    }
    if vocab_size < 2 {
        return Err(Error::InvalidInput(format!("vocab_size {vocab_size} < 2")));
    }
    let mut mass = 0.0;
    let mut plogp = 0.0;
    for (_, lp) in top_logprobs {
        let lp = clamped_logprob(*lp);
        let p = lp.exp();
        mass += p;
        plogp += p * lp;
    }
    if mass > 1.0 + MASS_TOLERANCE {
        return Err(Error::ProbabilityMass { mass });
    }
    let rest = (1.0 - mass).max(0.0);
    if rest > 0.0 {
        plogp += rest * rest.ln();
    }
    let h = -plogp / (vocab_size as f64).ln();
    Ok(h.clamp(0.0, 1.0))
}

/// Entropy of one token and whether the top-k fallback produced it.
fn token_entropy_sourced(
    record: &GenerationRecord,
    tok: &TokenEvent,
    position: &dyn Fn() -> String,
) -> Result<(f64, bool)> {
    if let Some(h) = tok.entropy_norm {
        return Ok((h, false));
    }
    match &tok.top_logprobs {
        Some(top) => Ok((entropy_from_topk(top, record.vocab_size)?, true)),
        None => Err(Error::MissingEntropy {
            record: record.label(),
            position: position(),
        }),
    }
}

pub fn token_entropy(record: &GenerationRecord, pos: TokenPosition) -> Result<f64> {
    let tok = select(record, pos);
    token_entropy_sourced(record, tok, &|| format!("{pos:?}").to_lowercase()).map(|(h, _)| h)
}

fn entropies(record: &GenerationRecord) -> Result<(Vec<f64>, usize)> {
    let mut fallbacks = 0;
    let mut values = Vec::with_capacity(record.tokens.len());
    for (j, tok) in record.tokens.iter().enumerate() {
        let (h, fell_back) = token_entropy_sourced(record, tok, &|| format!("token {j}"))?;
        fallbacks += usize::from(fell_back);
        values.push(h);
    }
    Ok((values, fallbacks))
}

pub fn sequence_entropy(record: &GenerationRecord, agg: SeqAggregation) -> Result<f64> {
    let (values, _) = entropies(record)?;
    Ok(aggregate(&values, agg))
}

/// Per-record score plus how many entropies came from the top-k fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordScore {
    pub value: f64,
    pub entropy_tokens: usize,
    pub fallback_tokens: usize,
}

pub fn record_score_detailed(record: &GenerationRecord, method: MethodKind) -> Result<RecordScore> {
    use MethodKind::*;
    use SeqAggregation::*;
    use TokenPosition::*;
    let plain = |value| RecordScore {
        value,
        entropy_tokens: 0,
        fallback_tokens: 0,
    };
    let single = |pos: TokenPosition| -> Result<RecordScore> {
        let tok = select(record, pos);
        let (h, fell_back) =
            token_entropy_sourced(record, tok, &|| format!("{pos:?}").to_lowercase())?;
        Ok(RecordScore {
            value: h,
            entropy_tokens: 1,
            fallback_tokens: usize::from(fell_back),
        })
    };
    let sequence = |agg: SeqAggregation| -> Result<RecordScore> {
        let (values, fallback_tokens) = entropies(record)?;
        Ok(RecordScore {
            value: aggregate(&values, agg),
            entropy_tokens: values.len(),
            fallback_tokens,
        })
    };
    if record.tokens.is_empty() {
        return Err(Error::Record {
            record: record.label(),
            reason: "no tokens".into(),
        });
    }
    match method {
        NllF => Ok(plain(token_nll(record, First))),
        NllP => Ok(plain(token_nll(record, Penultimate))),
        NllMin => Ok(plain(sequence_nll(record, WorstToken))),
        NllAvg => Ok(plain(sequence_nll(record, Mean))),
        EntF => single(First),
        EntP => single(Penultimate),
        EntMax => sequence(WorstToken),
        EntAvg => sequence(Mean),
        other => Err(Error::InvalidInput(format!(
            "{other} is not a probability-based method"
        ))),
    }
}

pub fn record_score(record: &GenerationRecord, method: MethodKind) -> Result<f64> {
    record_score_detailed(record, method).map(|s| s.value)
}

/// Dataset-level score for one (model, dataset) cell with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub score: f64,
    pub records: usize,
    /// Records with a single token scored at the penultimate position.
    pub single_token_records: usize,
    pub entropy_tokens: usize,
    pub fallback_tokens: usize,
}

impl CellScore {
    pub fn fallback_rate(&self) -> f64 {
        if self.entropy_tokens == 0 {
            0.0
        } else {
            self.fallback_tokens as f64 / self.entropy_tokens as f64
        }
    }

    pub fn fallback_flagged(&self) -> bool {
        self.fallback_rate() > FALLBACK_FLAG_RATE
    }
}

pub(crate) fn check_single_cell(records: &[GenerationRecord]) -> Result<()> {
    let first = records.first().ok_or(Error::Empty("records"))?;
    if let Some(other) = records
        .iter()
        .find(|r| r.model_id != first.model_id || r.dataset_id != first.dataset_id)
    {
        return Err(Error::InvalidInput(format!(
            "records span several cells: ({}, {}) and ({}, {})",
            first.model_id, first.dataset_id, other.model_id, other.dataset_id
        )));
    }
    Ok(())
}

pub fn score_cell(records: &[GenerationRecord], method: MethodKind) -> Result<CellScore> {
    check_single_cell(records)?;
    let mut values = Vec::with_capacity(records.len());
    let mut entropy_tokens = 0;
    let mut fallback_tokens = 0;
    for r in records {
        let s = record_score_detailed(r, method)?;
        values.push(s.value);
        entropy_tokens += s.entropy_tokens;
        fallback_tokens += s.fallback_tokens;
    }
    let penultimate = matches!(method, MethodKind::NllP | MethodKind::EntP);
    let single_token_records = if penultimate {
        records.iter().filter(|r| r.tokens.len() == 1).count()
    } else {
        0
    };
    Ok(CellScore {
        score: stable_mean(&values).expect("non-empty"),
        records: records.len(),
        single_token_records,
        entropy_tokens,
        fallback_tokens,
    })
}

/// Mean per-record score over records of one (model, dataset) cell.
pub fn dataset_score(records: &[GenerationRecord], method: MethodKind) -> Result<f64> {
    score_cell(records, method).map(|c| c.score)
}
