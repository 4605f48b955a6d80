//! Batch runs: parse logs, score every requested method, and emit report
//! artifacts. All numbers come from the library operations; this module only
//! schedules them and serializes results in a fixed key order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{
    consistency_dataset_score, load_option_map, ConsistencyInputs, ExpansionRule, OptionMap,
    SimilarityKind,
};
use crate::error::{Error, Result};
use crate::geometry::{fd_vs_correlation, write_fd_pairs_csv};
use crate::ingest::{
    build_performance_table, parse_log_files, record_correctness, CorrectnessRule, Issue,
};
use crate::model::{
    CellKey, EmbeddingSet, GenerationRecord, MethodKind, PerformanceTable, ScoreTable, TaskKind,
};
use crate::numeric::stable_mean;
use crate::rankeval::{evaluate_method, fmt4, performance_correlation_matrix, rank_models};
use crate::transfer::{
    aol_fit, aol_scores, atc_estimate, calibrate_atc_threshold, subset_baseline_draws, LinearFit,
};
use crate::uncertainty::{record_score, score_cell, CellScore};

pub const THREADS_ENV: &str = "UQRANK_THREADS";
pub const QUARANTINE_DIR: &str = "quarantine";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const ATC_NOTE: &str = "atc: a target sample counts as correct when its uncertainty \
                            is strictly below the threshold calibrated on the proxy dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    #[serde(default = "default_subset_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_subset_n() -> usize {
    50
}

fn default_draws() -> usize {
    1
}

impl Default for SubsetConfig {
    fn default() -> Self {
        Self {
            n: default_subset_n(),
            seed: 0,
            draws: default_draws(),
        }
    }
}

/// Embedding inputs. `consistency` and `expanded` are file prefixes with
/// `{model}` and `{dataset}` placeholders, one set per (model, dataset).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expanded: Option<String>,
    /// Option-map JSON per MCVQ dataset, used to expand option letters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, PathBuf>,
    /// Prompt embedding prefix per dataset, for Fréchet distances.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub logs: Vec<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rules: BTreeMap<String, CorrectnessRule>,
    /// Ground-truth CSV; when absent it is built from the logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance: Option<PathBuf>,
    /// Single labeled dataset for ATC and AoL; by default every other
    /// labeled dataset is used and the results averaged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_dataset: Option<String>,
    #[serde(default = "default_atc_method")]
    pub atc_method: MethodKind,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    #[serde(default)]
    pub subset: SubsetConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
}

fn default_methods() -> Vec<MethodKind> {
    MethodKind::PROBABILITY.to_vec()
}

fn default_atc_method() -> MethodKind {
    MethodKind::NllMin
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv]
}

fn map_paths(cfg: &RunConfig, f: impl Fn(&Path) -> PathBuf) -> RunConfig {
    let template = |t: &String| f(Path::new(t)).to_string_lossy().into_owned();
    let mut out = cfg.clone();
    out.logs = cfg.logs.iter().map(|p| f(p)).collect();
    out.performance = cfg.performance.as_deref().map(&f);
    out.output_dir = f(&cfg.output_dir);
    out.embeddings.consistency = cfg.embeddings.consistency.as_ref().map(template);
    out.embeddings.expanded = cfg.embeddings.expanded.as_ref().map(template);
    for (k, p) in &cfg.embeddings.options {
        out.embeddings.options.insert(k.clone(), f(p));
    }
    for (k, p) in &cfg.embeddings.prompts {
        out.embeddings.prompts.insert(k.clone(), f(p));
    }
    out
}

fn relative_or_self(path: &Path, base: &Path) -> PathBuf {
    match pathdiff::diff_paths(path, base) {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p,
        None => path.to_path_buf(),
    }
}

impl RunConfig {
    /// TOML, or JSON when the extension is `.json`. Relative paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Ok(cfg.rebased(base))
    }

    /// Joins every relative path onto `base`.
    pub fn rebased(&self, base: &Path) -> Self {
        map_paths(self, |p| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
    }

    /// Rewrites every path relative to `dir` where possible.
    pub fn relative_to(&self, dir: &Path) -> Self {
        map_paths(self, |p| relative_or_self(p, dir))
    }

    pub fn absolute(&self) -> Result<Self> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        Ok(self.rebased(&cwd))
    }

    /// Requested methods in canonical order, without duplicates.
    pub fn method_list(&self) -> Vec<MethodKind> {
        self.methods
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks everything that does not need the logs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.logs.is_empty() {
            return bad("no log files configured".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        if self.subset.n == 0 || self.subset.draws == 0 {
            return bad("subset n and draws must be positive".into());
        }
        if !self.atc_method.is_probability_based() {
            return bad(format!(
                "atc_method must be probability-based, got {}",
                self.atc_method
            ));
        }
        for (d, rule) in &self.rules {
            rule.validate()
                .map_err(|e| Error::Config(format!("rule for dataset '{d}': {e}")))?;
        }
        let needs = [
            (
                MethodKind::SampleBert,
                &self.embeddings.consistency,
                "embeddings.consistency",
            ),
            (
                MethodKind::SampleBertExpanded,
                &self.embeddings.expanded,
                "embeddings.expanded",
            ),
        ];
        for (method, template, key) in needs {
            if !self.methods.contains(&method) {
                continue;
            }
            match template {
                None => return bad(format!("{method} requested but {key} is not set")),
                Some(t) if !(t.contains("{model}") && t.contains("{dataset}")) => {
                    return bad(format!(
                        "{key} must contain {{model}} and {{dataset}}: '{t}'"
                    ))
                }
                Some(_) => {}
            }
        }
        let files = self
            .logs
            .iter()
            .chain(&self.performance)
            .chain(self.embeddings.options.values());
        for p in files {
            if !p.is_file() {
                return bad(format!("file not found: {}", p.display()));
            }
        }
        for p in self.embeddings.prompts.values() {
            for f in pair_paths(p) {
                if !f.is_file() {
                    return bad(format!("prompt embedding file not found: {}", f.display()));
                }
            }
        }
        Ok(())
    }
}

fn pair_paths(prefix: &Path) -> [PathBuf; 2] {
    let (a, b) = EmbeddingSet::file_pair(prefix);
    [a, b]
}

/// Fills the `{model}` and `{dataset}` placeholders of a prefix template.
pub fn fill_template(template: &str, model_id: &str, dataset_id: &str) -> PathBuf {
    PathBuf::from(
        template
            .replace("{model}", model_id)
            .replace("{dataset}", dataset_id),
    )
}

/// Records sorted by (dataset, model, sample) with per-dataset and per-cell
/// index ranges.
#[derive(Debug, Clone, Default)]
pub struct LogSet {
    records: Vec<GenerationRecord>,
    datasets: BTreeMap<String, Range<usize>>,
    cells: BTreeMap<CellKey, Range<usize>>,
}

impl LogSet {
    pub fn new(mut records: Vec<GenerationRecord>) -> Self {
        records.sort_by(|a, b| {
            (&a.dataset_id, &a.model_id, &a.sample_id).cmp(&(
                &b.dataset_id,
                &b.model_id,
                &b.sample_id,
            ))
        });
        let mut datasets: BTreeMap<String, Range<usize>> = BTreeMap::new();
        let mut cells: BTreeMap<CellKey, Range<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            datasets.entry(r.dataset_id.clone()).or_insert(i..i).end = i + 1;
            cells.entry(r.cell()).or_insert(i..i).end = i + 1;
        }
        Self {
            records,
            datasets,
            cells,
        }
    }

    pub fn records(&self) -> &[GenerationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn datasets(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }

    pub fn dataset_range(&self, dataset_id: &str) -> Option<Range<usize>> {
        self.datasets.get(dataset_id).cloned()
    }

    pub fn dataset(&self, dataset_id: &str) -> &[GenerationRecord] {
        self.dataset_range(dataset_id)
            .map_or(&[][..], |r| &self.records[r])
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, Range<usize>)> {
        self.cells.iter().map(|(k, r)| (k, r.clone()))
    }

    pub fn cell_range(&self, model_id: &str, dataset_id: &str) -> Option<Range<usize>> {
        self.cells.get(&CellKey::new(model_id, dataset_id)).cloned()
    }

    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.cells.keys().map(|k| k.model_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn models_in(&self, dataset_id: &str) -> Vec<String> {
        self.cells
            .keys()
            .filter(|k| k.dataset_id == dataset_id)
            .map(|k| k.model_id.clone())
            .collect()
    }

    pub fn task_kinds(&self, dataset_id: &str) -> BTreeSet<TaskKind> {
        self.dataset(dataset_id)
            .iter()
            .map(|r| r.task_kind)
            .collect()
    }
}

/// Rule used when a dataset has none configured.
pub fn default_rule(kind: TaskKind) -> CorrectnessRule {
    match kind {
        TaskKind::Mcvq => CorrectnessRule::McvqOptionLetter,
        TaskKind::Vqa => CorrectnessRule::ExactNormalized,
    }
}

/// Configured rules, plus the task-kind default for unconfigured datasets
/// of a single task kind that contain records without a `correct` flag.
pub fn effective_rules(
    configured: &BTreeMap<String, CorrectnessRule>,
    logs: &LogSet,
    warnings: &mut Vec<String>,
) -> BTreeMap<String, CorrectnessRule> {
    let mut rules = configured.clone();
    for d in logs.datasets() {
        if rules.contains_key(&d) || logs.dataset(&d).iter().all(|r| r.correct.is_some()) {
            continue;
        }
        let kinds = logs.task_kinds(&d);
        if kinds.len() == 1 {
            let rule = default_rule(*kinds.first().expect("one kind"));
            warnings.push(format!(
                "dataset {d}: no correctness rule configured; using {}",
                rule_name(&rule)
            ));
            rules.insert(d, rule);
        }
    }
    rules
}

fn rule_name(rule: &CorrectnessRule) -> String {
    match rule {
        CorrectnessRule::ExactNormalized => "exact_normalized".into(),
        CorrectnessRule::McvqOptionLetter => "mcvq_option_letter".into(),
        CorrectnessRule::RelaxedNumeric { tolerance } => format!("relaxed_numeric({tolerance})"),
        CorrectnessRule::ContainsNormalized => "contains_normalized".into(),
    }
}

/// Per dataset: `Ok` when every record's correctness is decidable, otherwise
/// the first reason it is not.
pub type DatasetStatus = BTreeMap<String, std::result::Result<(), String>>;

/// Per-record correctness aligned with `logs.records()`, and the datasets
/// whose records are all decidable.
pub fn correctness_labels(
    logs: &LogSet,
    rules: &BTreeMap<String, CorrectnessRule>,
) -> (Vec<Option<bool>>, DatasetStatus) {
    let labels: Vec<Option<bool>> = logs
        .records()
        .par_iter()
        .map(|r| record_correctness(r, rules.get(&r.dataset_id)).ok())
        .collect();
    let mut status = BTreeMap::new();
    for d in logs.datasets() {
        let range = logs.dataset_range(&d).expect("known dataset");
        let outcome = match labels[range.clone()].iter().position(Option::is_none) {
            None => Ok(()),
            Some(i) => {
                let r = &logs.records()[range.start + i];
                Err(record_correctness(r, rules.get(&d))
                    .err()
                    .map_or_else(|| "undecidable".to_owned(), |e| e.to_string()))
            }
        };
        status.insert(d, outcome);
    }
    (labels, status)
}

/// Everything scoring needs beyond the records themselves.
#[derive(Debug, Clone)]
pub struct ScoringInputs {
    pub rules: BTreeMap<String, CorrectnessRule>,
    pub truth: PerformanceTable,
    pub options: BTreeMap<String, OptionMap>,
    pub consistency_template: Option<String>,
    pub expanded_template: Option<String>,
    pub proxy_dataset: Option<String>,
    pub atc_method: MethodKind,
    pub subset: SubsetConfig,
}

impl Default for ScoringInputs {
    fn default() -> Self {
        Self {
            rules: BTreeMap::new(),
            truth: PerformanceTable::new("accuracy"),
            options: BTreeMap::new(),
            consistency_template: None,
            expanded_template: None,
            proxy_dataset: None,
            atc_method: default_atc_method(),
            subset: SubsetConfig::default(),
        }
    }
}

fn cell_warnings(method: MethodKind, key: &CellKey, cell: &CellScore, out: &mut Vec<String>) {
    if cell.single_token_records > 0 {
        out.push(format!(
            "{method} {}/{}: {} of {} records have one token; scored at that token",
            key.model_id, key.dataset_id, cell.single_token_records, cell.records
        ));
    }
    if cell.fallback_tokens > 0 {
        out.push(format!(
            "{method} {}/{}: {:.2}% of entropies from top-k fallback{}",
            key.model_id,
            key.dataset_id,
            100.0 * cell.fallback_rate(),
            if cell.fallback_flagged() {
                " (flagged: above 10%)"
            } else {
                ""
            }
        ));
    }
}

fn score_probability(
    logs: &LogSet,
    method: MethodKind,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable> {
    let cells: Vec<(&CellKey, Range<usize>)> = logs.cells().collect();
    let scored = cells
        .par_iter()
        .map(|(_, r)| score_cell(&logs.records()[r.clone()], method))
        .collect::<Result<Vec<_>>>()?;
    let mut table = ScoreTable::new(method);
    for ((key, _), cell) in cells.into_iter().zip(scored) {
        cell_warnings(method, key, &cell, warnings);
        table.insert(key.clone(), cell.score)?;
    }
    Ok(table)
}

fn score_consistency(
    logs: &LogSet,
    method: MethodKind,
    inputs: &ScoringInputs,
) -> Result<ScoreTable> {
    let (sim, expansion, template) = match method {
        MethodKind::SampleBleu => (SimilarityKind::Bleu1, ExpansionRule::Raw, None),
        MethodKind::SampleBert => (
            SimilarityKind::EmbedCosine,
            ExpansionRule::Raw,
            Some(inputs.consistency_template.as_deref()),
        ),
        _ => (
            SimilarityKind::EmbedCosine,
            ExpansionRule::ExpandedAnswer,
            Some(inputs.expanded_template.as_deref()),
        ),
    };
    let cells: Vec<(&CellKey, Range<usize>)> = logs.cells().collect();
    let scored = cells
        .par_iter()
        .map(|(key, r)| {
            let set = match template {
                None => None,
                Some(None) => {
                    return Err(Error::Config(format!(
                        "{method} needs an embedding template"
                    )))
                }
                Some(Some(t)) => {
                    let prefix = fill_template(t, &key.model_id, &key.dataset_id);
                    Some(EmbeddingSet::load(&prefix).map_err(|e| {
                        Error::Config(format!(
                            "{method}: cannot load embeddings {}: {e}",
                            prefix.display()
                        ))
                    })?)
                }
            };
            let ci = ConsistencyInputs {
                embeddings: set.as_ref(),
                options: inputs.options.get(&key.dataset_id),
            };
            consistency_dataset_score(&logs.records()[r.clone()], sim, expansion, ci)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ScoreTable::new(method);
    for ((key, _), score) in cells.into_iter().zip(scored) {
        table.insert(key.clone(), score)?;
    }
    Ok(table)
}

/// Proxy datasets for `target`: the configured proxy, or every other
/// dataset in `candidates`. `None` when the target is the proxy itself.
fn proxies_for(target: &str, proxy: Option<&str>, candidates: &[String]) -> Option<Vec<String>> {
    match proxy {
        Some(p) if p == target => None,
        Some(p) => Some(vec![p.to_owned()]),
        None => Some(
            candidates
                .iter()
                .filter(|d| *d != target)
                .cloned()
                .collect(),
        ),
    }
}

fn score_atc(
    logs: &LogSet,
    inputs: &ScoringInputs,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable> {
    let (labels, status) = correctness_labels(logs, &inputs.rules);
    let labeled: Vec<String> = status
        .iter()
        .filter(|(_, s)| s.is_ok())
        .map(|(d, _)| d.clone())
        .collect();
    let uncertainty = logs
        .records()
        .par_iter()
        .map(|r| record_score(r, inputs.atc_method))
        .collect::<Result<Vec<_>>>()?;

    let mut table = ScoreTable::new(MethodKind::Atc);
    for target in logs.datasets() {
        let Some(proxies) = proxies_for(&target, inputs.proxy_dataset.as_deref(), &labeled) else {
            warnings.push(format!("atc {target}: dataset is the proxy; not scored"));
            continue;
        };
        let proxies: Vec<String> = proxies
            .into_iter()
            .filter(|p| match status.get(p) {
                Some(Ok(())) => true,
                Some(Err(reason)) => {
                    warnings.push(format!("atc {target}: proxy {p} unusable: {reason}"));
                    false
                }
                None => {
                    warnings.push(format!("atc {target}: proxy {p} not present in logs"));
                    false
                }
            })
            .collect();
        for model in logs.models_in(&target) {
            let target_range = logs.cell_range(&model, &target).expect("model in target");
            let mut estimates = Vec::new();
            for p in &proxies {
                let Some(pr) = logs.cell_range(&model, p) else {
                    continue;
                };
                let pairs: Vec<(f64, bool)> = pr
                    .map(|i| (uncertainty[i], labels[i].expect("labeled proxy")))
                    .collect();
                match calibrate_atc_threshold(&pairs, inputs.atc_method, p) {
                    Ok(th) => {
                        estimates.push(atc_estimate(&uncertainty[target_range.clone()], &th)?)
                    }
                    Err(Error::Degenerate(reason)) => {
                        warnings.push(format!("atc {model}/{target}: skipped proxy {p}: {reason}"))
                    }
                    Err(e) => return Err(e),
                }
            }
            match stable_mean(&estimates) {
                Some(v) => table.insert(CellKey::new(&model, &target), v)?,
                None => warnings.push(format!("atc {model}/{target}: no usable proxy")),
            }
        }
    }
    Ok(table)
}

fn score_aol(
    logs: &LogSet,
    inputs: &ScoringInputs,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable> {
    let truth = &inputs.truth;
    let sources_all = truth.datasets();
    let mut table = ScoreTable::new(MethodKind::Aol);
    for target in logs.datasets() {
        let Some(sources) = proxies_for(&target, inputs.proxy_dataset.as_deref(), &sources_all)
        else {
            warnings.push(format!("aol {target}: dataset is the proxy; not scored"));
            continue;
        };
        let models = logs.models_in(&target);
        let mut per_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &sources {
            let (present, missing): (Vec<String>, Vec<String>) = models
                .iter()
                .cloned()
                .partition(|m| truth.get(m, s).is_some());
            if !missing.is_empty() {
                warnings.push(format!(
                    "aol {target}: no ground truth on source {s} for {}",
                    missing.join(", ")
                ));
            }
            if present.is_empty() {
                continue;
            }
            for (key, score) in aol_scores(truth, s, &target, &present)?.entries() {
                per_model
                    .entry(key.model_id.clone())
                    .or_default()
                    .push(*score);
            }
        }
        for model in &models {
            match per_model.get(model).and_then(|v| stable_mean(v)) {
                Some(v) => table.insert(CellKey::new(model, &target), v)?,
                None => warnings.push(format!("aol {model}/{target}: no source accuracy")),
            }
        }
    }
    Ok(table)
}

fn score_subset(
    logs: &LogSet,
    inputs: &ScoringInputs,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable> {
    let (_, status) = correctness_labels(logs, &inputs.rules);
    let mut table = ScoreTable::new(MethodKind::SubsetLabeled);
    for (d, st) in status {
        if let Err(reason) = st {
            warnings.push(format!("subset_labeled {d}: not scored: {reason}"));
            continue;
        }
        let sub = subset_baseline_draws(
            logs.dataset(&d),
            inputs.subset.n,
            inputs.subset.seed,
            inputs.subset.draws,
            inputs.rules.get(&d),
        )?;
        for (k, v) in sub.entries() {
            table.insert(k.clone(), *v)?;
        }
    }
    Ok(table)
}

/// Scores one method for every (model, dataset) cell it applies to.
pub fn score_method(
    logs: &LogSet,
    method: MethodKind,
    inputs: &ScoringInputs,
    warnings: &mut Vec<String>,
) -> Result<ScoreTable> {
    match method {
        m if m.is_probability_based() => score_probability(logs, m, warnings),
        m if m.is_consistency_based() => score_consistency(logs, m, inputs),
        MethodKind::Atc => score_atc(logs, inputs, warnings),
        MethodKind::Aol => score_aol(logs, inputs, warnings),
        _ => score_subset(logs, inputs, warnings),
    }
}

/// Ground truth from logged flags or rules, for every decidable dataset.
pub fn truth_from_logs(
    logs: &LogSet,
    rules: &BTreeMap<String, CorrectnessRule>,
    warnings: &mut Vec<String>,
) -> Result<PerformanceTable> {
    let (_, status) = correctness_labels(logs, rules);
    let mut truth = PerformanceTable::new("accuracy");
    for (d, st) in status {
        match st {
            Ok(()) => {
                for (k, v) in build_performance_table(logs.dataset(&d), rules)?.entries() {
                    truth.insert(k.clone(), *v)?;
                }
            }
            Err(reason) => warnings.push(format!("dataset {d}: no ground truth: {reason}")),
        }
    }
    Ok(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub dataset_id: String,
    pub rho: Option<f64>,
    pub tau_w: Option<f64>,
    pub n: usize,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: MethodKind,
    pub cells: Vec<EvalCell>,
    pub avg_rho: Option<f64>,
    pub avg_tau_w: Option<f64>,
}

/// Methods by datasets, with per-method averages over defined cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub datasets: Vec<String>,
    pub rows: Vec<EvalRow>,
}

pub fn evaluate_all(
    tables: &[ScoreTable],
    truth: &PerformanceTable,
    warnings: &mut Vec<String>,
) -> EvalTable {
    let with_truth: BTreeSet<String> = truth.datasets().into_iter().collect();
    let datasets: Vec<String> = tables
        .iter()
        .flat_map(ScoreTable::datasets)
        .filter(|d| with_truth.contains(d))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows = tables
        .iter()
        .map(|t| {
            let cells: Vec<EvalCell> = datasets
                .iter()
                .map(|d| match evaluate_method(t, truth, d) {
                    Ok(r) => {
                        if r.is_unstable() {
                            warnings.push(format!(
                                "eval {} {d}: only {} models; unstable",
                                t.method(),
                                r.n
                            ));
                        }
                        EvalCell {
                            dataset_id: d.clone(),
                            rho: Some(r.rho),
                            tau_w: Some(r.tau_w),
                            n: r.n,
                            unstable: r.is_unstable(),
                        }
                    }
                    Err(e) => {
                        warnings.push(format!("eval {} {d}: {e}", t.method()));
                        EvalCell {
                            dataset_id: d.clone(),
                            rho: None,
                            tau_w: None,
                            n: 0,
                            unstable: false,
                        }
                    }
                })
                .collect();
            let rhos: Vec<f64> = cells.iter().filter_map(|c| c.rho).collect();
            let taus: Vec<f64> = cells.iter().filter_map(|c| c.tau_w).collect();
            EvalRow {
                method: t.method(),
                avg_rho: stable_mean(&rhos),
                avg_tau_w: stable_mean(&taus),
                cells,
            }
        })
        .collect();
    EvalTable { datasets, rows }
}

fn opt4(v: Option<f64>) -> String {
    v.map(fmt4).unwrap_or_default()
}

impl EvalTable {
    /// `method,<d>_rho,<d>_tau_w,...,avg_rho,avg_tau_w` at 4 decimals.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["method".to_owned()];
        for d in &self.datasets {
            header.push(format!("{d}_rho"));
            header.push(format!("{d}_tau_w"));
        }
        header.extend(["avg_rho".to_owned(), "avg_tau_w".to_owned()]);
        wtr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.method.to_string()];
            for c in &row.cells {
                rec.push(opt4(c.rho));
                rec.push(opt4(c.tau_w));
            }
            rec.push(opt4(row.avg_rho));
            rec.push(opt4(row.avg_tau_w));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `method,dataset_id,rank,model_id,score`, best model first.
pub fn write_rankings_csv<W: std::io::Write>(tables: &[ScoreTable], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["method", "dataset_id", "rank", "model_id", "score"])?;
    for t in tables {
        for d in t.datasets() {
            for r in rank_models(t, &d) {
                wtr.write_record([
                    t.method().to_string(),
                    d.clone(),
                    r.rank.to_string(),
                    r.model_id,
                    fmt4(r.score),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AolFitEntry {
    pub source: String,
    pub target: String,
    pub models: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<LinearFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Huber fits of probit target accuracy on probit source accuracy for every
/// ordered dataset pair.
pub fn aol_fits(truth: &PerformanceTable) -> Vec<AolFitEntry> {
    let datasets = truth.datasets();
    let mut out = Vec::new();
    for s in &datasets {
        for t in datasets.iter().filter(|t| *t != s) {
            let tgt = truth.dataset_values(t);
            let models = truth
                .dataset_values(s)
                .keys()
                .filter(|m| tgt.contains_key(*m))
                .count();
            let (fit, error) = match aol_fit(truth, s, t) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(AolFitEntry {
                source: s.clone(),
                target: t.clone(),
                models,
                fit,
                error,
            });
        }
    }
    out
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreTable>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Everything needed to reproduce a run. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    /// SHA-256 of every input file read.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub records: usize,
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
    /// SHA-256 of every artifact written alongside the manifest.
    pub artifacts: BTreeMap<String, String>,
}

/// Config recorded in a manifest, rebased onto the manifest's directory,
/// after checking that every input still has its recorded digest.
pub fn replay_config(manifest_path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    for (rel, digest) in &manifest.inputs {
        let path = base.join(rel);
        let actual = sha256_file(&path)
            .map_err(|e| Error::Config(format!("replay input unreadable: {e}")))?;
        if &actual != digest {
            return Err(Error::Config(format!(
                "replay input changed since the recorded run: {}",
                path.display()
            )));
        }
    }
    Ok(manifest.config.rebased(base))
}

/// Requested thread count, capped by `UQRANK_THREADS`; 0 means the rayon
/// default.
pub fn effective_threads(configured: Option<usize>) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                return Err(Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got '{v}'"
                )))
            }
        },
        Err(_) => None,
    };
    Ok(match (configured, env) {
        (Some(c), Some(e)) => c.min(e),
        (c, e) => c.or(e).unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct RunState {
    artifacts: BTreeMap<String, Vec<u8>>,
    warnings: Vec<String>,
    issues: Vec<Issue>,
    inputs: BTreeMap<PathBuf, String>,
}

impl RunState {
    fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.insert(name.to_owned(), bytes);
    }

    fn digest(&mut self, path: &Path) -> Result<()> {
        let d = sha256_file(path)?;
        self.inputs.insert(path.to_path_buf(), d);
        Ok(())
    }
}

#[derive(Serialize)]
struct ErrorEntry<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    exit_code: i32,
    errors: Vec<ErrorEntry<'a>>,
    issues: &'a [Issue],
    warnings: &'a [String],
}

/// Runs the configured batch and writes its artifacts to `output_dir`.
///
/// On failure, whatever was produced is written to `output_dir/quarantine`
/// together with `errors.json`, and the error is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    let cfg = cfg.absolute()?;
    let mut state = RunState::default();
    let result = cfg.validate().and_then(|()| {
        let threads = effective_threads(cfg.threads)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| execute(&cfg, &mut state))
    });
    let out = &cfg.output_dir;
    let quarantine = out.join(QUARANTINE_DIR);
    match result {
        Ok(()) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (name, bytes) in &state.artifacts {
                let p = out.join(name);
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            if quarantine.is_dir() {
                fs::remove_dir_all(&quarantine).map_err(|e| Error::io(&quarantine, e))?;
            }
            Ok(RunOutcome {
                output_dir: out.clone(),
                files: state.artifacts.keys().cloned().collect(),
                warnings: state.warnings,
            })
        }
        Err(err) => {
            if quarantine.is_dir() {
                fs::remove_dir_all(&quarantine).map_err(|e| Error::io(&quarantine, e))?;
            }
            fs::create_dir_all(&quarantine).map_err(|e| Error::io(&quarantine, e))?;
            for (name, bytes) in &state.artifacts {
                let p = quarantine.join(name);
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            let report = ErrorReport {
                exit_code: err.exit_code(),
                errors: vec![ErrorEntry {
                    kind: err.kind(),
                    message: err.to_string(),
                }],
                issues: &state.issues,
                warnings: &state.warnings,
            };
            let p = quarantine.join("errors.json");
            fs::write(&p, to_json(&report)?).map_err(|e| Error::io(&p, e))?;
            Err(err)
        }
    }
}

fn execute(cfg: &RunConfig, state: &mut RunState) -> Result<()> {
    let (records, report) = parse_log_files(&cfg.logs)?;
    for w in &report.warnings {
        state.warnings.push(format!(
            "log {}:{}: {}",
            w.source.as_deref().unwrap_or("-"),
            w.line,
            w.message
        ));
    }
    if !report.is_clean() {
        state.issues = report.errors.clone();
        return Err(Error::Validation(report.errors.len()));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("logs contain no records".into()));
    }
    for p in &cfg.logs {
        state.digest(p)?;
    }
    let logs = LogSet::new(records);
    let datasets = logs.datasets();
    let methods = cfg.method_list();

    if let Some(p) = &cfg.proxy_dataset {
        if !datasets.contains(p) {
            return Err(Error::Config(format!(
                "proxy_dataset '{p}' not found in logs"
            )));
        }
    }
    let mut options = BTreeMap::new();
    for (d, path) in &cfg.embeddings.options {
        state.digest(path)?;
        options.insert(d.clone(), load_option_map(path)?);
    }
    preflight_embeddings(cfg, &logs, &methods, &options, state)?;

    let rules = effective_rules(&cfg.rules, &logs, &mut state.warnings);
    let truth = match &cfg.performance {
        Some(p) => {
            state.digest(p)?;
            PerformanceTable::load_csv(p, "accuracy")?
        }
        None => truth_from_logs(&logs, &rules, &mut state.warnings)?,
    };
    let inputs = ScoringInputs {
        rules,
        truth,
        options,
        consistency_template: cfg.embeddings.consistency.clone(),
        expanded_template: cfg.embeddings.expanded.clone(),
        proxy_dataset: cfg.proxy_dataset.clone(),
        atc_method: cfg.atc_method,
        subset: cfg.subset.clone(),
    };

    let mut tables = Vec::with_capacity(methods.len());
    for &m in &methods {
        tables.push(score_method(&logs, m, &inputs, &mut state.warnings)?);
    }
    state.put("scores.json", to_json(&tables)?);
    state.put(
        "rankings.csv",
        csv_bytes(|b| write_rankings_csv(&tables, b))?,
    );

    let truth = &inputs.truth;
    let json = cfg.formats.contains(&ReportFormat::Json);
    state.put("performance.csv", csv_bytes(|b| truth.write_csv(b))?);
    if !truth.is_empty() {
        let eval = evaluate_all(&tables, truth, &mut state.warnings);
        state.put("eval.csv", csv_bytes(|b| eval.write_csv(b))?);
        let matrix = performance_correlation_matrix(truth, &truth.datasets());
        state.put("perf_corr.csv", csv_bytes(|b| matrix.write_csv(b))?);
        if json {
            state.put("eval.json", to_json(&eval)?);
            state.put("perf_corr.json", to_json(&matrix)?);
        }
        let fits = aol_fits(truth);
        for f in &fits {
            if let Some(e) = &f.error {
                state
                    .warnings
                    .push(format!("aol fit {} -> {}: {e}", f.source, f.target));
            }
        }
        state.put("aol_fit.json", to_json(&fits)?);
    } else {
        state
            .warnings
            .push("no ground truth available; eval skipped".into());
    }

    match cfg.embeddings.prompts.len() {
        0 => {}
        1 => state
            .warnings
            .push("fd: prompt embeddings for only one dataset; skipped".into()),
        _ => {
            let mut sets = Vec::new();
            for (d, prefix) in &cfg.embeddings.prompts {
                for f in pair_paths(prefix) {
                    state.digest(&f)?;
                }
                sets.push((d.clone(), EmbeddingSet::load(prefix)?));
            }
            let pairs = fd_vs_correlation(&sets, truth)?;
            state.put(
                "fd_pairs.csv",
                csv_bytes(|b| write_fd_pairs_csv(&pairs, b))?,
            );
        }
    }

    let manifest = build_manifest(cfg, &logs, state);
    state.put(MANIFEST_FILE, to_json(&manifest)?);
    Ok(())
}

/// Fails early, naming the method and path, when an embedding file a
/// requested method needs is missing.
fn preflight_embeddings(
    cfg: &RunConfig,
    logs: &LogSet,
    methods: &[MethodKind],
    options: &BTreeMap<String, OptionMap>,
    state: &mut RunState,
) -> Result<()> {
    let wanted = [
        (MethodKind::SampleBert, &cfg.embeddings.consistency),
        (MethodKind::SampleBertExpanded, &cfg.embeddings.expanded),
    ];
    for (method, template) in wanted {
        if !methods.contains(&method) {
            continue;
        }
        let template = template.as_deref().expect("checked by validate");
        for (key, _) in logs.cells() {
            for f in pair_paths(&fill_template(template, &key.model_id, &key.dataset_id)) {
                if !f.is_file() {
                    return Err(Error::Config(format!(
                        "{method}: embedding file not found: {}",
                        f.display()
                    )));
                }
                state.digest(&f)?;
            }
        }
        if method == MethodKind::SampleBertExpanded {
            for d in logs.datasets() {
                if logs.task_kinds(&d).contains(&TaskKind::Mcvq) && !options.contains_key(&d) {
                    return Err(Error::Config(format!(
                        "{method}: no option map configured for MCVQ dataset '{d}'"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn build_manifest(cfg: &RunConfig, logs: &LogSet, state: &RunState) -> RunManifest {
    let dir = &cfg.output_dir;
    let inputs = state
        .inputs
        .iter()
        .map(|(p, d)| {
            (
                relative_or_self(p, dir).to_string_lossy().into_owned(),
                d.clone(),
            )
        })
        .collect();
    let artifacts = state
        .artifacts
        .iter()
        .map(|(name, bytes)| (name.clone(), hex::encode(Sha256::digest(bytes))))
        .collect();
    let mut notes = Vec::new();
    if cfg.methods.contains(&MethodKind::Atc) {
        notes.push(ATC_NOTE.to_owned());
    }
    RunManifest {
        tool: "uqrank".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.relative_to(dir),
        inputs,
        seeds: BTreeMap::from([
            ("subset_seed".to_owned(), cfg.subset.seed),
            ("subset_draws".to_owned(), cfg.subset.draws as u64),
        ]),
        records: logs.len(),
        models: logs.models(),
        datasets: logs.datasets(),
        warnings: state.warnings.clone(),
        notes,
        artifacts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::write_jsonl;
    use crate::synth::{generate_ensemble, EnsembleConfig};

    fn write_logs(dir: &Path, cfgs: &[EnsembleConfig]) -> Vec<PathBuf> {
        cfgs.iter()
            .map(|c| {
                let e = generate_ensemble(c).unwrap();
                let p = dir.join(format!("{}.jsonl", c.dataset_id));
                let mut buf = Vec::new();
                write_jsonl(&e.records, &mut buf).unwrap();
                fs::write(&p, buf).unwrap();
                p
            })
            .collect()
    }

    fn sim(dataset: &str, kind: TaskKind, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            n_models: 4,
            n_samples: 60,
            task_kind: kind,
            seed,
            dataset_id: dataset.into(),
            ..EnsembleConfig::default()
        }
    }

    fn base_config(dir: &Path) -> RunConfig {
        let logs = write_logs(
            dir,
            &[sim("d1", TaskKind::Mcvq, 1), sim("d2", TaskKind::Vqa, 2)],
        );
        RunConfig {
            logs,
            methods: vec![
                MethodKind::NllAvg,
                MethodKind::SampleBleu,
                MethodKind::Atc,
                MethodKind::Aol,
            ],
            rules: BTreeMap::new(),
            performance: None,
            proxy_dataset: None,
            atc_method: MethodKind::NllMin,
            embeddings: EmbeddingConfig::default(),
            subset: SubsetConfig::default(),
            output_dir: dir.join("out"),
            threads: Some(2),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }

    #[test]
    fn logset_ranges() {
        let e = generate_ensemble(&sim("d", TaskKind::Mcvq, 3)).unwrap();
        let mut recs = e.records.clone();
        recs.reverse();
        let logs = LogSet::new(recs);
        assert_eq!(logs.datasets(), vec!["d"]);
        assert_eq!(logs.models().len(), 4);
        let r = logs.cell_range("sim-m01", "d").unwrap();
        assert_eq!(r.len(), 60);
        assert!(logs.records()[r].iter().all(|x| x.model_id == "sim-m01"));
        assert!(logs.dataset("missing").is_empty());
    }

    #[test]
    fn config_round_trip_and_paths() {
        let text = r#"
            logs = ["logs/a.jsonl"]
            methods = ["nll_min", "atc"]
            proxy_dataset = "d1"
            output_dir = "out"
            [rules]
            d1 = { kind = "relaxed_numeric", tolerance = 0.05 }
            [subset]
            n = 10
        "#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, text).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.logs[0], dir.path().join("logs/a.jsonl"));
        assert_eq!(
            cfg.subset,
            SubsetConfig {
                n: 10,
                seed: 0,
                draws: 1
            }
        );
        assert_eq!(cfg.formats, vec![ReportFormat::Csv]);
        let rel = cfg.relative_to(&dir.path().join("out"));
        assert_eq!(rel.logs[0], PathBuf::from("../logs/a.jsonl"));
        assert_eq!(rel.output_dir, PathBuf::from("."));
        assert_eq!(
            rel.rebased(&dir.path().join("out")).logs[0],
            dir.path().join("out/../logs/a.jsonl")
        );
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("file not found")));

        fs::write(dir.path().join("bad.toml"), "logs = []\nbogus = 1\n").unwrap();
        assert!(matches!(
            RunConfig::load(&dir.path().join("bad.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn run_writes_artifacts_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path());
        let outcome = run_pipeline(&cfg).unwrap();
        for f in [
            "scores.json",
            "rankings.csv",
            "eval.csv",
            "perf_corr.csv",
            "aol_fit.json",
            "performance.csv",
            MANIFEST_FILE,
            "eval.json",
        ] {
            assert!(outcome.files.iter().any(|x| x == f), "{f}");
        }
        let eval = fs::read_to_string(cfg.output_dir.join("eval.csv")).unwrap();
        let lines: Vec<&str> = eval.lines().collect();
        assert_eq!(
            lines[0],
            "method,d1_rho,d1_tau_w,d2_rho,d2_tau_w,avg_rho,avg_tau_w"
        );
        assert_eq!(lines.len(), 5);
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(cfg.output_dir.join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert!(manifest.notes.iter().any(|n| n == ATC_NOTE));
        assert_eq!(manifest.config.output_dir, PathBuf::from("."));

        let mut replay = replay_config(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
        replay.output_dir = dir.path().join("replay");
        run_pipeline(&replay).unwrap();
        for f in ["scores.json", "rankings.csv", "eval.csv", "aol_fit.json"] {
            assert_eq!(
                fs::read(cfg.output_dir.join(f)).unwrap(),
                fs::read(dir.path().join("replay").join(f)).unwrap(),
                "{f}"
            );
        }

        fs::write(&cfg.logs[0], b"\n").unwrap();
        assert!(matches!(
            replay_config(&cfg.output_dir.join(MANIFEST_FILE)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn proxy_dataset_excludes_itself() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.proxy_dataset = Some("d1".into());
        let outcome = run_pipeline(&cfg).unwrap();
        let tables = load_scores(&cfg.output_dir.join("scores.json")).unwrap();
        let atc = tables
            .iter()
            .find(|t| t.method() == MethodKind::Atc)
            .unwrap();
        assert_eq!(atc.datasets(), vec!["d2"]);
        assert!(outcome
            .warnings
            .iter()
            .any(|w| w.contains("atc d1: dataset is the proxy")));
    }

    #[test]
    fn missing_embeddings_name_method_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.methods = vec![MethodKind::SampleBert];
        cfg.embeddings.consistency = Some(
            dir.path()
                .join("emb/{model}/{dataset}")
                .to_string_lossy()
                .into_owned(),
        );
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(
            msg.contains("sample_bert") && msg.contains("emb/sim-m00/d1.json"),
            "{msg}"
        );
        let report =
            fs::read_to_string(cfg.output_dir.join(QUARANTINE_DIR).join("errors.json")).unwrap();
        assert!(report.contains("\"exit_code\": 3"));
    }

    #[test]
    fn invalid_logs_exit_two_with_issues() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, "{\"model_id\": 1}\n").unwrap();
        cfg.logs.push(bad);
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let report =
            fs::read_to_string(cfg.output_dir.join(QUARANTINE_DIR).join("errors.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        assert_eq!(v["issues"].as_array().unwrap().len(), 1);
    }
}
