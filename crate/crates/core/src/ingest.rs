//! JSONL inference-log ingestion, validation and correctness scoring.
//!
//! Each line of a log is one [`GenerationRecord`]. Lines that fail to parse or
//! violate a record invariant are reported with a stable error code and never
//! silently dropped; accepted records keep file order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellKey, GenerationRecord, PerformanceTable, RecordKey};

/// Tolerance on the summed probability mass of a top-k list.
pub const MASS_TOLERANCE: f64 = 1e-6;

const REQUIRED_KEYS: [&str; 7] = [
    "model_id",
    "dataset_id",
    "sample_id",
    "task_kind",
    "output_text",
    "vocab_size",
    "tokens",
];

const OPTIONAL_KEYS: [&str; 4] = ["gold_answer", "correct", "prompt", "resamples"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    InvalidUtf8,
    MalformedJson,
    NotAnObject,
    MissingField,
    InvalidField,
    EmptyId,
    EmptyTokens,
    VocabTooSmall,
    LogprobPositive,
    EntropyOutOfRange,
    TopkInvalid,
    TopkNotDescending,
    TopkMassExceeds,
    InvalidTemperature,
    DuplicateKey,
    BlankLine,
    UnknownKey,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serializes");
        f.write_str(s.as_str().unwrap_or("UNKNOWN"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub line: usize,
    pub code: IssueCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records_accepted: usize,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    /// Appends `other` after `self`; merging is associative.
    pub fn merge(&mut self, other: ValidationReport) {
        self.records_accepted += other.records_accepted;
        self.errors.extend(other.errors);
        self.warnings.extend(other.warnings);
    }
}

/// Checks every per-record invariant, returning the first violation.
pub fn validate_record(record: &GenerationRecord) -> std::result::Result<(), (IssueCode, String)> {
    for (name, value) in [
        ("model_id", &record.model_id),
        ("dataset_id", &record.dataset_id),
        ("sample_id", &record.sample_id),
    ] {
        if value.is_empty() {
            return Err((IssueCode::EmptyId, format!("'{name}' is empty")));
        }
    }
    if record.vocab_size < 2 {
        return Err((
            IssueCode::VocabTooSmall,
            format!("vocab_size {} < 2", record.vocab_size),
        ));
    }
    if record.tokens.is_empty() {
        return Err((IssueCode::EmptyTokens, "tokens is empty".into()));
    }
    for (j, tok) in record.tokens.iter().enumerate() {
        if tok.logprob.is_nan() || tok.logprob > 0.0 {
            return Err((
                IssueCode::LogprobPositive,
                format!("token {j}: logprob {} > 0", tok.logprob),
            ));
        }
        if let Some(h) = tok.entropy_norm {
            if !(0.0..=1.0).contains(&h) {
                return Err((
                    IssueCode::EntropyOutOfRange,
                    format!("token {j}: entropy_norm {h} outside [0, 1]"),
                ));
            }
        }
        if let Some(top) = &tok.top_logprobs {
            if top.is_empty() {
                return Err((
                    IssueCode::TopkInvalid,
                    format!("token {j}: top_logprobs is empty"),
                ));
            }
            if let Some((t, lp)) = top.iter().find(|(_, lp)| lp.is_nan() || *lp > 0.0) {
                return Err((
                    IssueCode::TopkInvalid,
                    format!("token {j}: top_logprobs entry '{t}' has logprob {lp} > 0"),
                ));
            }
            if top.windows(2).any(|w| w[0].1 <= w[1].1) {
                return Err((
                    IssueCode::TopkNotDescending,
                    format!("token {j}: top_logprobs not strictly descending"),
                ));
            }
            let mass: f64 = top.iter().map(|(_, lp)| lp.exp()).sum();
            if mass > 1.0 + MASS_TOLERANCE {
                return Err((
                    IssueCode::TopkMassExceeds,
                    format!("token {j}: top_logprobs mass {mass} > 1"),
                ));
            }
        }
    }
    if let Some(resamples) = &record.resamples {
        for (i, r) in resamples.iter().enumerate() {
            if !(r.temperature.is_finite() && r.temperature > 0.0) {
                return Err((
                    IssueCode::InvalidTemperature,
                    format!("resample {i}: temperature {} must be > 0", r.temperature),
                ));
            }
        }
    }
    Ok(())
}

/// Stateful parser that enforces key uniqueness across every stream fed to it.
#[derive(Debug, Default)]
pub struct LogParser {
    seen: HashSet<RecordKey>,
    records: Vec<GenerationRecord>,
    report: ValidationReport,
}

impl LogParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse_stream<R: BufRead>(&mut self, mut reader: R, source: Option<&str>) -> Result<()> {
        let mut buf = Vec::new();
        let mut line_no = 0usize;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            while matches!(buf.last(), Some(b'\n' | b'\r')) {
                buf.pop();
            }
            self.parse_line(&buf, line_no, source);
        }
        Ok(())
    }

    pub fn parse_file(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        self.parse_stream(BufReader::new(file), Some(&name))
            .map_err(|e| match e {
                Error::Stream(io) => Error::io(path, io),
                other => other,
            })
    }

    fn issue(source: Option<&str>, line: usize, code: IssueCode, message: String) -> Issue {
        Issue {
            source: source.map(str::to_owned),
            line,
            code,
            message,
        }
    }

    fn parse_line(&mut self, bytes: &[u8], line: usize, source: Option<&str>) {
        let text = match std::str::from_utf8(bytes) {
            Ok(t) => t,
            Err(e) => {
                self.report.errors.push(Self::issue(
                    source,
                    line,
                    IssueCode::InvalidUtf8,
                    e.to_string(),
                ));
                return;
            }
        };
        if text.trim().is_empty() {
            self.report.warnings.push(Self::issue(
                source,
                line,
                IssueCode::BlankLine,
                "blank line skipped".into(),
            ));
            return;
        }
        match self.decode(text, line, source) {
            Ok(record) => {
                self.report.records_accepted += 1;
                self.records.push(record);
            }
            Err((code, message)) => {
                self.report
                    .errors
                    .push(Self::issue(source, line, code, message));
            }
        }
    }

    fn decode(
        &mut self,
        text: &str,
        line: usize,
        source: Option<&str>,
    ) -> std::result::Result<GenerationRecord, (IssueCode, String)> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| (IssueCode::MalformedJson, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| {
            (
                IssueCode::NotAnObject,
                "line is not a JSON object".to_string(),
            )
        })?;
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !obj.contains_key(**k)) {
            return Err((
                IssueCode::MissingField,
                format!("missing required key '{missing}'"),
            ));
        }
        for key in obj.keys() {
            if !REQUIRED_KEYS.contains(&key.as_str()) && !OPTIONAL_KEYS.contains(&key.as_str()) {
                self.report.warnings.push(Self::issue(
                    source,
                    line,
                    IssueCode::UnknownKey,
                    format!("unknown key '{key}' ignored"),
                ));
            }
        }
        let record: GenerationRecord =
            serde_json::from_value(value).map_err(|e| (IssueCode::InvalidField, e.to_string()))?;
        validate_record(&record)?;
        if !self.seen.insert(record.key()) {
            return Err((
                IssueCode::DuplicateKey,
                format!(
                    "duplicate (model_id, dataset_id, sample_id) = ({}, {}, {})",
                    record.model_id, record.dataset_id, record.sample_id
                ),
            ));
        }
        Ok(record)
    }

    pub fn finish(self) -> (Vec<GenerationRecord>, ValidationReport) {
        (self.records, self.report)
    }
}

/// Parses one JSONL byte stream into records plus a validation report.
pub fn parse_log_stream<R: BufRead>(
    reader: R,
) -> Result<(Vec<GenerationRecord>, ValidationReport)> {
    let mut parser = LogParser::new();
    parser.parse_stream(reader, None)?;
    Ok(parser.finish())
}

/// Parses several log files with uniqueness enforced across all of them.
pub fn parse_log_files<P: AsRef<Path>>(
    paths: &[P],
) -> Result<(Vec<GenerationRecord>, ValidationReport)> {
    let mut parser = LogParser::new();
    for p in paths {
        parser.parse_file(p.as_ref())?;
    }
    Ok(parser.finish())
}

pub fn write_jsonl<W: Write>(records: &[GenerationRecord], mut writer: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectnessRule {
    ExactNormalized,
    McvqOptionLetter,
    RelaxedNumeric { tolerance: f64 },
    ContainsNormalized,
}

impl CorrectnessRule {
    pub fn relaxed_numeric(tolerance: f64) -> Result<Self> {
        let rule = CorrectnessRule::RelaxedNumeric { tolerance };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if let CorrectnessRule::RelaxedNumeric { tolerance } = *self {
            if !(tolerance > 0.0 && tolerance < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "relaxed_numeric tolerance {tolerance} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercase, collapse whitespace, drop terminal punctuation and a leading article.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = collapsed
        .trim_end_matches(TERMINAL_PUNCT)
        .trim_end()
        .to_string();
    for article in ["a ", "an ", "the "] {
        if let Some(rest) = out.strip_prefix(article) {
            out = rest.trim_start().to_string();
            break;
        }
    }
    out
}

fn letter_of(c: char) -> Option<char> {
    ('A'..='H').contains(&c).then_some(c)
}

/// First standalone option letter `A`-`H` written as `X`, `X.`, `X)` or `(X)`.
pub fn extract_option_letter(text: &str) -> Option<char> {
    text.split_whitespace().find_map(|tok| {
        let chars: Vec<char> = tok.chars().collect();
        match chars.as_slice() {
            [c] => letter_of(*c),
            [c, '.'] | [c, ')'] => letter_of(*c),
            ['(', c, ')'] => letter_of(*c),
            _ => None,
        }
    })
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s.trim().chars().filter(|&c| c != ',').collect();
    let parse = |t: &str| t.parse::<f64>().ok().filter(|v| v.is_finite());
    parse(&cleaned).or_else(|| parse(cleaned.trim_end_matches(TERMINAL_PUNCT)))
}

/// Decides whether `record.output_text` matches its gold answer under `rule`.
pub fn score_correctness(record: &GenerationRecord, rule: &CorrectnessRule) -> Result<bool> {
    let gold = record
        .gold_answer
        .as_deref()
        .ok_or_else(|| Error::MissingGold(record.label()))?;
    let output = record.output_text.as_str();
    match *rule {
        CorrectnessRule::ExactNormalized => Ok(normalize_answer(output) == normalize_answer(gold)),
        CorrectnessRule::ContainsNormalized => {
            Ok(normalize_answer(output).contains(&normalize_answer(gold)))
        }
        CorrectnessRule::McvqOptionLetter => {
            let gold_letter = extract_option_letter(gold).ok_or_else(|| {
                Error::RuleInapplicable(format!(
                    "{}: gold answer '{gold}' has no option letter",
                    record.label()
                ))
            })?;
            Ok(extract_option_letter(output) == Some(gold_letter))
        }
        CorrectnessRule::RelaxedNumeric { tolerance } => {
            let (Some(out), Some(g)) = (parse_number(output), parse_number(gold)) else {
                return Err(Error::RuleInapplicable(format!(
                    "{}: relaxed_numeric needs numeric output and gold ('{}' vs '{}')",
                    record.label(),
                    output.trim(),
                    gold.trim()
                )));
            };
            if g == 0.0 {
                Ok(out == 0.0)
            } else {
                Ok((out - g).abs() <= tolerance * g.abs())
            }
        }
    }
}

/// Per-record correctness: a logged flag wins over rule evaluation.
pub fn record_correctness(
    record: &GenerationRecord,
    rule: Option<&CorrectnessRule>,
) -> Result<bool> {
    if let Some(c) = record.correct {
        return Ok(c);
    }
    let undecidable = |reason: String| Error::UndecidableCell {
        model_id: record.model_id.clone(),
        dataset_id: record.dataset_id.clone(),
        reason,
    };
    let rule = rule.ok_or_else(|| {
        undecidable(format!(
            "sample {} has no `correct` flag and no rule is configured",
            record.sample_id
        ))
    })?;
    if record.gold_answer.is_none() {
        return Err(undecidable(format!(
            "sample {} has neither `correct` nor gold_answer",
            record.sample_id
        )));
    }
    score_correctness(record, rule).map_err(|e| undecidable(e.to_string()))
}

/// Mean per-sample correctness for every (model, dataset) cell present.
pub fn build_performance_table(
    records: &[GenerationRecord],
    rules: &BTreeMap<String, CorrectnessRule>,
) -> Result<PerformanceTable> {
    let mut tallies: BTreeMap<CellKey, (usize, usize)> = BTreeMap::new();
    for r in records {
        let ok = record_correctness(r, rules.get(&r.dataset_id))?;
        let t = tallies.entry(r.cell()).or_default();
        t.0 += usize::from(ok);
        t.1 += 1;
    }
    let mut table = PerformanceTable::new("accuracy");
    for (cell, (hits, total)) in tallies {
        table.insert(cell, hits as f64 / total as f64)?;
    }
    Ok(table)
}
