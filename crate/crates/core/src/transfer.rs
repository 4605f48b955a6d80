//! Baselines that transfer information from labeled data: average
//! thresholded confidence (ATC), accuracy-on-the-line (AoL) and a small
//! labeled subset of the target dataset.
//!
//! ATC here thresholds an *uncertainty*: a target sample counts as correct
//! when its uncertainty is below `delta`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{record_correctness, CorrectnessRule};
use crate::model::{CellKey, GenerationRecord, MethodKind, PerformanceTable, ScoreTable};
use crate::numeric::median;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtcThreshold {
    pub delta: f64,
    pub uncertainty_method: MethodKind,
    pub proxy_dataset_id: String,
}

/// Picks `delta` so the share of proxy samples with `u < delta` matches the
/// proxy accuracy: the midpoint between the `k`-th and `(k+1)`-th smallest
/// uncertainties, `k = round(accuracy * n)`.
pub fn calibrate_atc_threshold(
    proxy: &[(f64, bool)],
    method: MethodKind,
    proxy_dataset_id: &str,
) -> Result<AtcThreshold> {
    if proxy.is_empty() {
        return Err(Error::Empty("ATC proxy set"));
    }
    if let Some((u, _)) = proxy.iter().find(|(u, _)| !u.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite uncertainty {u}")));
    }
    let n = proxy.len();
    let hits = proxy.iter().filter(|(_, c)| *c).count();
    if hits == 0 || hits == n {
        return Err(Error::Degenerate(format!(
            "ATC proxy '{proxy_dataset_id}' is {} correct; threshold undefined",
            if hits == 0 { "all in" } else { "all" }
        )));
    }
    let mut us: Vec<f64> = proxy.iter().map(|(u, _)| *u).collect();
    us.sort_by(f64::total_cmp);
    let accuracy = hits as f64 / n as f64;
    let k = (accuracy * n as f64).round() as usize;
    let eps = |u: f64| 1e-9 * u.abs().max(1.0);
    let delta = match k {
        0 => us[0] - eps(us[0]),
        k if k >= n => us[n - 1] + eps(us[n - 1]),
        k => 0.5 * (us[k - 1] + us[k]),
    };
    Ok(AtcThreshold {
        delta,
        uncertainty_method: method,
        proxy_dataset_id: proxy_dataset_id.to_owned(),
    })
}

/// Estimated accuracy: share of target samples with uncertainty below `delta`.
pub fn atc_estimate(target_uncertainties: &[f64], threshold: &AtcThreshold) -> Result<f64> {
    if target_uncertainties.is_empty() {
        return Err(Error::Empty("ATC target set"));
    }
    let below = target_uncertainties
        .iter()
        .filter(|&&u| u < threshold.delta)
        .count();
    Ok(below as f64 / target_uncertainties.len() as f64)
}

/// Probabilities are clamped into this band before the inverse CDF.
pub const PROBIT_CLAMP: f64 = 1e-6;

/// Inverse standard-normal CDF (Wichura's AS 241, ~1e-16 relative accuracy).
fn ndtri(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_4e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_545e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_6,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_049e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// Probit with a flag telling whether `p` had to be clamped.
pub fn probit_checked(p: f64) -> (f64, bool) {
    let clamped = p.clamp(PROBIT_CLAMP, 1.0 - PROBIT_CLAMP);
    (ndtri(clamped), clamped != p)
}

pub fn probit(p: f64) -> f64 {
    probit_checked(p).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Robust residual scale at the final iterate.
    pub scale: f64,
    pub iterations: usize,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

pub const HUBER_K: f64 = 1.345;
pub const HUBER_MAX_ITERATIONS: usize = 100;
pub const HUBER_TOLERANCE: f64 = 1e-8;
const MAD_TO_SIGMA: f64 = 0.6745;
const SCALE_FLOOR: f64 = 1e-12;

fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - mx) * (x - mx);
        sxy += w * (x - mx) * (y - my);
    }
    if sxx.is_nan() || sxx <= 0.0 {
        return Err(Error::Numeric("weighted design matrix is singular".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

fn robust_scale(residuals: &[f64]) -> f64 {
    let center = median(residuals);
    let dev: Vec<f64> = residuals.iter().map(|r| (r - center).abs()).collect();
    (median(&dev) / MAD_TO_SIGMA).max(SCALE_FLOOR)
}

fn check_design(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Degenerate(format!(
            "line fit needs at least 3 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    Ok(())
}

/// Huber M-estimate of a line by iteratively reweighted least squares.
///
/// Tuning constant `1.345 * scale`; the scale is re-estimated every
/// iteration as MAD / 0.6745.
pub fn fit_huber(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    check_design(xs, ys)?;
    let n = xs.len();
    let mut weights = vec![1.0; n];
    let (mut slope, mut intercept) = weighted_line(xs, ys, &weights)?;
    let residuals =
        |s: f64, b: f64| -> Vec<f64> { xs.iter().zip(ys).map(|(x, y)| y - (b + s * x)).collect() };
    let mut iterations = 0;
    let mut scale;
    loop {
        let r = residuals(slope, intercept);
        scale = robust_scale(&r);
        if iterations == HUBER_MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let k = HUBER_K * scale;
        for (w, ri) in weights.iter_mut().zip(&r) {
            *w = if ri.abs() <= k { 1.0 } else { k / ri.abs() };
        }
        let (s, b) = weighted_line(xs, ys, &weights)?;
        let change = (s - slope).abs().max((b - intercept).abs());
        slope = s;
        intercept = b;
        if change < HUBER_TOLERANCE {
            scale = robust_scale(&residuals(slope, intercept));
            break;
        }
    }
    Ok(LinearFit {
        slope,
        intercept,
        scale,
        iterations,
    })
}

/// Ordinary least squares, reported in the same shape as [`fit_huber`].
pub fn fit_ols(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    check_design(xs, ys)?;
    let (slope, intercept) = weighted_line(xs, ys, &vec![1.0; xs.len()])?;
    let r: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    Ok(LinearFit {
        slope,
        intercept,
        scale: robust_scale(&r),
        iterations: 0,
    })
}

/// AoL scores for `target_dataset`: each model's probit accuracy on the
/// source dataset. Probit is monotone, so this ranks like raw source accuracy.
pub fn aol_scores(
    source_perf: &PerformanceTable,
    source_dataset: &str,
    target_dataset: &str,
    model_ids: &[String],
) -> Result<ScoreTable> {
    let missing: Vec<&str> = model_ids
        .iter()
        .filter(|m| source_perf.get(m, source_dataset).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no performance on source '{source_dataset}' for model(s): {}",
            missing.join(", ")
        )));
    }
    let mut table = ScoreTable::new(MethodKind::Aol);
    for m in model_ids {
        let g = source_perf.get(m, source_dataset).expect("checked above");
        table.insert(CellKey::new(m.clone(), target_dataset), probit(g))?;
    }
    Ok(table)
}

/// Huber line through (probit source accuracy, probit target accuracy) over
/// the models shared by both datasets.
pub fn aol_fit(perf: &PerformanceTable, source: &str, target: &str) -> Result<LinearFit> {
    let src = perf.dataset_values(source);
    let tgt = perf.dataset_values(target);
    let (xs, ys): (Vec<f64>, Vec<f64>) = src
        .iter()
        .filter_map(|(m, &s)| tgt.get(m).map(|&t| (probit(s), probit(t))))
        .unzip();
    fit_huber(&xs, &ys)
}

type SamplesByModel<'a> = BTreeMap<&'a str, BTreeMap<&'a str, &'a GenerationRecord>>;

fn sample_ids_shared(
    records: &[GenerationRecord],
) -> Result<(String, SamplesByModel<'_>, Vec<String>)> {
    let first = records.first().ok_or(Error::Empty("subset records"))?;
    let dataset = first.dataset_id.clone();
    if let Some(r) = records.iter().find(|r| r.dataset_id != dataset) {
        return Err(Error::InvalidInput(format!(
            "subset baseline expects one dataset, saw '{dataset}' and '{}'",
            r.dataset_id
        )));
    }
    let mut by_model: BTreeMap<&str, BTreeMap<&str, &GenerationRecord>> = BTreeMap::new();
    for r in records {
        by_model
            .entry(r.model_id.as_str())
            .or_default()
            .insert(r.sample_id.as_str(), r);
    }
    let mut shared: Option<BTreeSet<&str>> = None;
    for samples in by_model.values() {
        let ids: BTreeSet<&str> = samples.keys().copied().collect();
        shared = Some(match shared {
            None => ids,
            Some(s) => s.intersection(&ids).copied().collect(),
        });
    }
    let shared = shared
        .unwrap_or_default()
        .into_iter()
        .map(str::to_owned)
        .collect();
    Ok((dataset, by_model, shared))
}

/// Draws `n` sample ids uniformly (without replacement) from the ids every
/// model answered; the same ids are used for all models.
pub fn draw_subset(shared_ids: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = index::sample(&mut rng, shared_ids.len(), n)
        .into_iter()
        .map(|i| shared_ids[i].clone())
        .collect();
    picked.sort();
    picked
}

/// Accuracy of every model on one seeded labeled subset of the target dataset.
pub fn subset_baseline(
    records: &[GenerationRecord],
    n: usize,
    seed: u64,
    rule: Option<&CorrectnessRule>,
) -> Result<ScoreTable> {
    subset_baseline_draws(records, n, seed, 1, rule)
}

/// Mean of [`subset_baseline`] over `draws` subsets seeded `seed, seed+1, ...`.
pub fn subset_baseline_draws(
    records: &[GenerationRecord],
    n: usize,
    seed: u64,
    draws: usize,
    rule: Option<&CorrectnessRule>,
) -> Result<ScoreTable> {
    if n == 0 || draws == 0 {
        return Err(Error::InvalidInput(
            "subset size and draws must be positive".into(),
        ));
    }
    let (dataset, by_model, shared) = sample_ids_shared(records)?;
    if shared.len() < n {
        return Err(Error::InvalidInput(format!(
            "subset of {n} requested on '{dataset}' but only {} sample ids are shared by all models",
            shared.len()
        )));
    }
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for d in 0..draws {
        let ids = draw_subset(&shared, n, seed.wrapping_add(d as u64));
        for (model, samples) in &by_model {
            let mut hits = 0usize;
            for id in &ids {
                hits += usize::from(record_correctness(samples[id.as_str()], rule)?);
            }
            *sums.entry(model).or_default() += hits as f64 / n as f64;
        }
    }
    let mut table = ScoreTable::new(MethodKind::SubsetLabeled);
    for (model, total) in sums {
        let score = if draws == 1 {
            total
        } else {
            total / draws as f64
        };
        table.insert(CellKey::new(model, dataset.clone()), score)?;
    }
    Ok(table)
}
