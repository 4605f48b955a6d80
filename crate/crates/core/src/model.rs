//! Shared domain types: token events, generation records, score and
//! performance tables, and embedding sets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One generated token with its chosen-token log-probability (natural log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub token_text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_norm: Option<f64>,
    /// Sorted strictly descending by logprob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<(String, f64)>>,
}

impl TokenEvent {
    pub fn new(token_text: impl Into<String>, logprob: f64) -> Self {
        TokenEvent {
            token_text: token_text.into(),
            logprob,
            entropy_norm: None,
            top_logprobs: None,
        }
    }

    pub fn with_entropy(mut self, entropy_norm: f64) -> Self {
        self.entropy_norm = Some(entropy_norm);
        self
    }

    pub fn with_top_logprobs(mut self, top: Vec<(String, f64)>) -> Self {
        self.top_logprobs = Some(top);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mcvq,
    Vqa,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Mcvq => "mcvq",
            TaskKind::Vqa => "vqa",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcvq" => Ok(TaskKind::Mcvq),
            "vqa" => Ok(TaskKind::Vqa),
            other => Err(Error::InvalidInput(format!("unknown task kind '{other}'"))),
        }
    }
}

/// One stochastic re-generation of the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub temperature: f64,
    pub output_text: String,
}

/// A single model response to a single sample.
///
/// `tokens` holds content tokens only; the end-of-sequence token is never
/// logged, so the token preceding EOS is the last element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub sample_id: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub output_text: String,
    pub vocab_size: u64,
    pub tokens: Vec<TokenEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resamples: Option<Vec<ResampleEvent>>,
}

impl GenerationRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            sample_id: self.sample_id.clone(),
        }
    }

    pub fn cell(&self) -> CellKey {
        CellKey::new(&self.model_id, &self.dataset_id)
    }

    /// `model/dataset/sample`, used in error messages.
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.model_id, self.dataset_id, self.sample_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub model_id: String,
    pub dataset_id: String,
    pub sample_id: String,
}

/// A (model, dataset) cell of a score or performance table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub model_id: String,
    pub dataset_id: String,
}

impl CellKey {
    pub fn new(model_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        CellKey {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

impl Direction {
    /// Multiplier that turns a raw score into a higher-is-better score.
    pub fn sign(self) -> f64 {
        match self {
            Direction::HigherIsBetter => 1.0,
            Direction::LowerIsBetter => -1.0,
        }
    }
}

/// Every scoring method the engine knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    NllF,
    NllP,
    NllMin,
    NllAvg,
    EntF,
    EntP,
    EntMax,
    EntAvg,
    SampleBleu,
    SampleBert,
    SampleBertExpanded,
    Atc,
    Aol,
    SubsetLabeled,
}

impl MethodKind {
    pub const ALL: [MethodKind; 14] = [
        MethodKind::NllF,
        MethodKind::NllP,
        MethodKind::NllMin,
        MethodKind::NllAvg,
        MethodKind::EntF,
        MethodKind::EntP,
        MethodKind::EntMax,
        MethodKind::EntAvg,
        MethodKind::SampleBleu,
        MethodKind::SampleBert,
        MethodKind::SampleBertExpanded,
        MethodKind::Atc,
        MethodKind::Aol,
        MethodKind::SubsetLabeled,
    ];

    /// The twelve unsupervised proxy methods.
    pub const PROXY: [MethodKind; 12] = [
        MethodKind::NllF,
        MethodKind::NllP,
        MethodKind::NllMin,
        MethodKind::NllAvg,
        MethodKind::EntF,
        MethodKind::EntP,
        MethodKind::EntMax,
        MethodKind::EntAvg,
        MethodKind::SampleBleu,
        MethodKind::SampleBert,
        MethodKind::SampleBertExpanded,
        MethodKind::Atc,
    ];

    pub const PROBABILITY: [MethodKind; 8] = [
        MethodKind::NllF,
        MethodKind::NllP,
        MethodKind::NllMin,
        MethodKind::NllAvg,
        MethodKind::EntF,
        MethodKind::EntP,
        MethodKind::EntMax,
        MethodKind::EntAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::NllF => "nll_f",
            MethodKind::NllP => "nll_p",
            MethodKind::NllMin => "nll_min",
            MethodKind::NllAvg => "nll_avg",
            MethodKind::EntF => "ent_f",
            MethodKind::EntP => "ent_p",
            MethodKind::EntMax => "ent_max",
            MethodKind::EntAvg => "ent_avg",
            MethodKind::SampleBleu => "sample_bleu",
            MethodKind::SampleBert => "sample_bert",
            MethodKind::SampleBertExpanded => "sample_bert_expanded",
            MethodKind::Atc => "atc",
            MethodKind::Aol => "aol",
            MethodKind::SubsetLabeled => "subset_labeled",
        }
    }

    pub fn is_probability_based(self) -> bool {
        Self::PROBABILITY.contains(&self)
    }

    pub fn is_consistency_based(self) -> bool {
        matches!(
            self,
            MethodKind::SampleBleu | MethodKind::SampleBert | MethodKind::SampleBertExpanded
        )
    }

    /// Whether the method needs labels from another dataset.
    pub fn needs_proxy(self) -> bool {
        matches!(self, MethodKind::Atc | MethodKind::Aol)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_lowercase();
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == wanted)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

/// Lower is better for every probability-based uncertainty; higher otherwise.
pub fn method_direction(method: MethodKind) -> Direction {
    if method.is_probability_based() {
        Direction::LowerIsBetter
    } else {
        Direction::HigherIsBetter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellEntry {
    model_id: String,
    dataset_id: String,
    score: f64,
}

fn entries_to_wire(entries: &BTreeMap<CellKey, f64>) -> Vec<CellEntry> {
    entries
        .iter()
        .map(|(k, &score)| CellEntry {
            model_id: k.model_id.clone(),
            dataset_id: k.dataset_id.clone(),
            score,
        })
        .collect()
}

/// Per-model, per-dataset proxy scores for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    method: MethodKind,
    direction: Direction,
    entries: BTreeMap<CellKey, f64>,
}

impl ScoreTable {
    pub fn new(method: MethodKind) -> Self {
        ScoreTable {
            method,
            direction: method_direction(method),
            entries: BTreeMap::new(),
        }
    }

    pub fn method(&self) -> MethodKind {
        self.method
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn insert(&mut self, key: CellKey, score: f64) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(Error::InvalidInput(format!(
                "duplicate score for ({}, {})",
                key.model_id, key.dataset_id
            )));
        }
        self.entries.insert(key, score);
        Ok(())
    }

    pub fn get(&self, model_id: &str, dataset_id: &str) -> Option<f64> {
        self.entries
            .get(&CellKey::new(model_id, dataset_id))
            .copied()
    }

    pub fn entries(&self) -> &BTreeMap<CellKey, f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(model_id, score)` pairs for one dataset, ordered by model id.
    pub fn dataset_scores(&self, dataset_id: &str) -> Vec<(&str, f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.dataset_id == dataset_id)
            .map(|(k, &v)| (k.model_id.as_str(), v))
            .collect()
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| k.dataset_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreTableWire {
    method: MethodKind,
    direction: Direction,
    entries: Vec<CellEntry>,
}

impl Serialize for ScoreTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ScoreTableWire {
            method: self.method,
            direction: self.direction,
            entries: entries_to_wire(&self.entries),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScoreTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = ScoreTableWire::deserialize(d)?;
        if wire.direction != method_direction(wire.method) {
            return Err(D::Error::custom(format!(
                "direction {:?} does not match method {}",
                wire.direction, wire.method
            )));
        }
        let mut table = ScoreTable::new(wire.method);
        for e in wire.entries {
            table
                .insert(CellKey::new(e.model_id, e.dataset_id), e.score)
                .map_err(D::Error::custom)?;
        }
        Ok(table)
    }
}

/// Ground-truth performance in [0, 1] per (model, dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceTable {
    pub metric_name: String,
    entries: BTreeMap<CellKey, f64>,
}

impl PerformanceTable {
    pub fn new(metric_name: impl Into<String>) -> Self {
        PerformanceTable {
            metric_name: metric_name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: CellKey, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidInput(format!(
                "performance {value} for ({}, {}) outside [0, 1]",
                key.model_id, key.dataset_id
            )));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::InvalidInput(format!(
                "duplicate performance entry for ({}, {})",
                key.model_id, key.dataset_id
            )));
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn get(&self, model_id: &str, dataset_id: &str) -> Option<f64> {
        self.entries
            .get(&CellKey::new(model_id, dataset_id))
            .copied()
    }

    pub fn entries(&self) -> &BTreeMap<CellKey, f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dataset_values(&self, dataset_id: &str) -> BTreeMap<&str, f64> {
        self.entries
            .iter()
            .filter(|(k, _)| k.dataset_id == dataset_id)
            .map(|(k, &v)| (k.model_id.as_str(), v))
            .collect()
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| k.dataset_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|k| k.model_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Reads the `model_id,dataset_id,score` CSV form.
    pub fn read_csv<R: Read>(reader: R, metric_name: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["model_id", "dataset_id", "score"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::InvalidInput(format!(
                "performance CSV header must be model_id,dataset_id,score (got {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut table = PerformanceTable::new(metric_name);
        for row in rdr.deserialize::<CellEntry>() {
            let row = row?;
            table.insert(CellKey::new(row.model_id, row.dataset_id), row.score)?;
        }
        Ok(table)
    }

    pub fn load_csv(path: &Path, metric_name: &str) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, metric_name)
    }

    /// Writes full-precision values so a table round-trips exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for e in entries_to_wire(&self.entries) {
            wtr.serialize(e)?;
        }
        if self.entries.is_empty() {
            wtr.write_record(["model_id", "dataset_id", "score"])?;
        }
        wtr.flush().map_err(Error::Stream)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PerformanceTableWire {
    metric_name: String,
    entries: Vec<CellEntry>,
}

impl Serialize for PerformanceTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PerformanceTableWire {
            metric_name: self.metric_name.clone(),
            entries: entries_to_wire(&self.entries),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PerformanceTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = PerformanceTableWire::deserialize(d)?;
        let mut table = PerformanceTable::new(wire.metric_name);
        for e in wire.entries {
            table
                .insert(CellKey::new(e.model_id, e.dataset_id), e.score)
                .map_err(D::Error::custom)?;
        }
        Ok(table)
    }
}

/// Header half of the on-disk embedding pair (`<name>.json` + `<name>.bin`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub ids: Vec<String>,
}

/// Fixed-dimension `f32` vectors keyed by id, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be positive".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::InvalidInput(format!(
                "embedding data has {} values, expected {} rows x {} dims",
                vectors.len(),
                ids.len(),
                dim
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite embedding value in row '{}'",
                ids[pos / dim]
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate embedding id '{id}'"
                )));
            }
        }
        Ok(EmbeddingSet {
            ids,
            dim,
            vectors,
            index,
        })
    }

    pub fn from_rows(rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|(_, v)| v.len())
            .ok_or(Error::Empty("embedding rows"))?;
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "row '{id}' has dim {}, expected {dim}",
                    v.len()
                )));
            }
            ids.push(id);
            vectors.extend(v);
        }
        Self::new(ids, dim, vectors)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// `<prefix>.json` and `<prefix>.bin` for a given prefix.
    pub fn file_pair(prefix: &Path) -> (PathBuf, PathBuf) {
        let mut json = prefix.as_os_str().to_owned();
        json.push(".json");
        let mut bin = prefix.as_os_str().to_owned();
        bin.push(".bin");
        (PathBuf::from(json), PathBuf::from(bin))
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (json_path, bin_path) = Self::file_pair(prefix);
        let header_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: EmbeddingHeader = serde_json::from_str(&header_text)?;
        if header.dtype != "f32" {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported dtype '{}'",
                json_path.display(),
                header.dtype
            )));
        }
        if header.ids.len() != header.count {
            return Err(Error::InvalidInput(format!(
                "{}: count {} but {} ids",
                json_path.display(),
                header.count,
                header.ids.len()
            )));
        }
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let expected = header.count * header.dim * 4;
        if bytes.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{}: {} bytes, expected {expected}",
                bin_path.display(),
                bytes.len()
            )));
        }
        let vectors = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.ids, header.dim, vectors)
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (json_path, bin_path) = Self::file_pair(prefix);
        let header = EmbeddingHeader {
            dim: self.dim,
            count: self.ids.len(),
            dtype: "f32".into(),
            ids: self.ids.clone(),
        };
        let text = serde_json::to_string(&header)?;
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        let mut bytes = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }
}
