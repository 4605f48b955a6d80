//! Rank statistics and model ranking.
//!
//! `weighted_kendall` uses additive hyperbolic weights
//! `w_ij = 1/(r_i + 1) + 1/(r_j + 1)`, where `r` is the 0-based rank of an
//! item by ground truth (best first). Because the weights are additive the
//! statistic reduces to `sum_i a_i C_i / ((n - 1) sum_i a_i)`, with `C_i` the
//! concordant-minus-discordant count of item `i`; `C_i` is computed for all
//! items in `O(n log n)` with two Fenwick-tree sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PerformanceTable, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub tau_w: f64,
    pub n: usize,
    /// Scores were direction-adjusted before correlating.
    pub signed: bool,
}

impl CorrelationResult {
    /// Two-point correlations are always +-1 and carry no information.
    pub fn is_unstable(&self) -> bool {
        self.n <= 2
    }
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 items, got {}",
            xs.len()
        )));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!("non-numeric value {v}")));
    }
    Ok(())
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// 1-based fractional ranks (ties share their average rank).
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho: Pearson correlation of average-tie ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    if is_constant(xs) || is_constant(ys) {
        return Err(Error::UndefinedCorrelation("constant vector".into()));
    }
    Ok(pearson(&fractional_ranks(xs), &fractional_ranks(ys)))
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted indices `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Dense 0-based ranks of `xs` (equal values share a rank).
fn dense_ranks(xs: &[f64]) -> (Vec<usize>, usize) {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let ranks = xs
        .iter()
        .map(|x| sorted.partition_point(|s| s.total_cmp(x) == Ordering::Less))
        .collect();
    (ranks, sorted.len())
}

/// Per-item concordant-minus-discordant counts against every other item.
fn concordance_counts(truth: &[f64], scores: &[f64]) -> Vec<i64> {
    let n = truth.len();
    let (srank, levels) = dense_ranks(scores);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));
    let groups: Vec<&[usize]> = order.chunk_by(|&a, &b| truth[a] == truth[b]).collect();

    let mut counts = vec![0i64; n];
    // Items with strictly smaller truth: concordant when their score is smaller.
    let mut fw = Fenwick::new(levels);
    let mut inserted = 0u64;
    for g in &groups {
        for &i in *g {
            let less = fw.below(srank[i]);
            let greater = inserted - fw.below(srank[i] + 1);
            counts[i] += less as i64 - greater as i64;
        }
        for &i in *g {
            fw.add(srank[i]);
            inserted += 1;
        }
    }
    // Items with strictly larger truth: concordant when their score is larger.
    let mut fw = Fenwick::new(levels);
    let mut inserted = 0u64;
    for g in groups.iter().rev() {
        for &i in *g {
            let less = fw.below(srank[i]);
            let greater = inserted - fw.below(srank[i] + 1);
            counts[i] += greater as i64 - less as i64;
        }
        for &i in *g {
            fw.add(srank[i]);
            inserted += 1;
        }
    }
    counts
}

/// Hyperbolic item weights `1/(r + 1)`, `r` the 0-based average rank by truth
/// (highest truth first).
pub fn top_weights(truth: &[f64]) -> Vec<f64> {
    let n = truth.len() as f64;
    fractional_ranks(truth)
        .into_iter()
        .map(|asc| {
            // ascending 1-based rank -> descending 0-based rank
            let r = n - asc;
            1.0 / (r + 1.0)
        })
        .collect()
}

/// Weighted Kendall's tau emphasizing agreement on the top-truth items.
pub fn weighted_kendall(truth: &[f64], scores: &[f64]) -> Result<f64> {
    check_pair(truth, scores)?;
    if is_constant(truth) {
        return Err(Error::UndefinedCorrelation("constant ground truth".into()));
    }
    let weights = top_weights(truth);
    let counts = concordance_counts(truth, scores);
    let num: f64 = weights
        .iter()
        .zip(&counts)
        .map(|(w, &c)| w * c as f64)
        .sum();
    let den = (truth.len() - 1) as f64 * weights.iter().sum::<f64>();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Aligned `(truth, direction-adjusted score)` vectors for one dataset.
fn aligned(
    scores: &ScoreTable,
    truth: &PerformanceTable,
    dataset_id: &str,
) -> (Vec<f64>, Vec<f64>) {
    let sign = scores.direction().sign();
    let perf = truth.dataset_values(dataset_id);
    let mut t = Vec::new();
    let mut s = Vec::new();
    for (model, score) in scores.dataset_scores(dataset_id) {
        if let Some(&g) = perf.get(model) {
            t.push(g);
            s.push(sign * score);
        }
    }
    (t, s)
}

/// Rank agreement between a score table and ground truth on one dataset.
pub fn evaluate_method(
    scores: &ScoreTable,
    truth: &PerformanceTable,
    dataset_id: &str,
) -> Result<CorrelationResult> {
    let (t, s) = aligned(scores, truth, dataset_id);
    if t.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} on {dataset_id}: only {} model(s) have both a score and ground truth",
            scores.method(),
            t.len()
        )));
    }
    Ok(CorrelationResult {
        rho: spearman(&s, &t)?,
        tau_w: weighted_kendall(&t, &s)?,
        n: t.len(),
        signed: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Models of one dataset ordered best-first with competition ranks.
pub fn rank_models(scores: &ScoreTable, dataset_id: &str) -> Vec<RankedModel> {
    let sign = scores.direction().sign();
    let mut rows = scores.dataset_scores(dataset_id);
    rows.sort_by(|a, b| {
        (sign * b.1)
            .total_cmp(&(sign * a.1))
            .then_with(|| a.0.cmp(b.0))
    });
    let mut out: Vec<RankedModel> = Vec::with_capacity(rows.len());
    for (i, (model, score)) in rows.into_iter().enumerate() {
        let rank = match out.last() {
            Some(prev) if prev.score == score => prev.rank,
            _ => i + 1,
        };
        out.push(RankedModel {
            model_id: model.to_owned(),
            score,
            rank,
        });
    }
    out
}

/// Symmetric dataset-by-dataset matrix; undefined cells hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub datasets: Vec<String>,
    #[serde(with = "nan_as_null")]
    pub values: Vec<Vec<f64>>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = v
            .iter()
            .map(|r| r.iter().map(|x| x.is_finite().then_some(*x)).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.datasets.iter().position(|d| d == a)?;
        let j = self.datasets.iter().position(|d| d == b)?;
        Some(self.values[i][j])
    }

    /// Dataset ids in the first row and column, 4 decimals, NaN as empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![String::new()];
        header.extend(self.datasets.iter().cloned());
        wtr.write_record(&header)?;
        for (d, row) in self.datasets.iter().zip(&self.values) {
            let mut rec = vec![d.clone()];
            rec.extend(row.iter().map(|v| fmt4(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fixed 4-decimal report formatting; non-finite values become empty cells.
pub fn fmt4(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:.4}");
        if s == "-0.0000" {
            "0.0000".into()
        } else {
            s
        }
    } else {
        String::new()
    }
}

/// Spearman correlation of per-model performance between every dataset pair.
pub fn performance_correlation_matrix(
    truth: &PerformanceTable,
    datasets: &[String],
) -> CorrelationMatrix {
    let columns: Vec<BTreeMap<&str, f64>> =
        datasets.iter().map(|d| truth.dataset_values(d)).collect();
    let n = datasets.len();
    let mut values = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (m, &va) in &columns[i] {
                if let Some(&vb) = columns[j].get(m) {
                    a.push(va);
                    b.push(vb);
                }
            }
            let rho = spearman(&a, &b).unwrap_or(f64::NAN);
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    CorrelationMatrix {
        datasets: datasets.to_vec(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellKey, MethodKind};
    use proptest::prelude::*;

    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    fn kendall_oracle(truth: &[f64], scores: &[f64]) -> f64 {
        let n = truth.len();
        let asc = |i: usize| {
            let less = truth.iter().filter(|&&t| t < truth[i]).count() as f64;
            let eq = truth.iter().filter(|&&t| t == truth[i]).count() as f64;
            less + (eq - 1.0) / 2.0
        };
        let r: Vec<f64> = (0..n).map(|i| (n as f64 - 1.0) - asc(i)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let w = 1.0 / (r[i] + 1.0) + 1.0 / (r[j] + 1.0);
                num += w * sign(truth[i] - truth[j]) * sign(scores[i] - scores[j]);
                den += w;
            }
        }
        num / den
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.1, 0.5, 0.3, 0.9];
        assert!((spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        let rev = [0.9, 0.5, 0.7, 0.1];
        assert!((spearman(&xs, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-15);
        assert!(matches!(
            spearman(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn kendall_examples() {
        let t = [3.0, 2.0, 1.0];
        assert!((weighted_kendall(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((weighted_kendall(&t, &[1.0, 2.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
        let v = weighted_kendall(&t, &[3.0, 1.0, 2.0]).unwrap();
        assert!((v - kendall_oracle(&t, &[3.0, 1.0, 2.0])).abs() < 1e-15);
        assert!((v - 0.5455).abs() < 1e-4);
        assert!(weighted_kendall(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        // constant scores are allowed and give zero
        assert_eq!(weighted_kendall(&t, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn fractional_ranks_average_ties() {
        assert_eq!(
            fractional_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    fn table(method: MethodKind, rows: &[(&str, f64)]) -> ScoreTable {
        let mut t = ScoreTable::new(method);
        for (m, v) in rows {
            t.insert(CellKey::new(*m, "d"), *v).unwrap();
        }
        t
    }

    fn perf(rows: &[(&str, &str, f64)]) -> PerformanceTable {
        let mut t = PerformanceTable::new("accuracy");
        for (m, d, v) in rows {
            t.insert(CellKey::new(*m, *d), *v).unwrap();
        }
        t
    }

    #[test]
    fn evaluate_adjusts_direction() {
        let truth = perf(&[("m1", "d", 0.9), ("m2", "d", 0.5), ("m3", "d", 0.2)]);
        let nll = table(MethodKind::NllMin, &[("m1", 0.1), ("m2", 0.4), ("m3", 2.0)]);
        let r = evaluate_method(&nll, &truth, "d").unwrap();
        assert_eq!((r.rho, r.tau_w, r.n, r.signed), (1.0, 1.0, 3, true));
        assert!(!r.is_unstable());

        let two = perf(&[("m1", "d", 0.9), ("m2", "d", 0.5)]);
        let r = evaluate_method(&nll, &two, "d").unwrap();
        assert_eq!(r.rho.abs(), 1.0);
        assert!(r.is_unstable());

        let flat = table(MethodKind::NllMin, &[("m1", 0.3), ("m2", 0.3), ("m3", 0.3)]);
        assert!(evaluate_method(&flat, &truth, "d").is_err());
        let lonely = perf(&[("m1", "d", 0.9)]);
        assert!(evaluate_method(&nll, &lonely, "d").is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let nll = table(MethodKind::NllAvg, &[("m1", 0.5), ("m2", 0.2)]);
        let r = rank_models(&nll, "d");
        assert_eq!(r[0].model_id, "m2");
        assert_eq!((r[0].rank, r[1].rank), (1, 2));

        let tied = table(
            MethodKind::SampleBleu,
            &[("zeta", 0.5), ("alpha", 0.5), ("mid", 0.7), ("low", 0.1)],
        );
        let r = rank_models(&tied, "d");
        let got: Vec<_> = r.iter().map(|x| (x.model_id.as_str(), x.rank)).collect();
        assert_eq!(got, vec![("mid", 1), ("alpha", 2), ("zeta", 2), ("low", 4)]);

        let one = table(MethodKind::Atc, &[("m", 0.3)]);
        assert_eq!(rank_models(&one, "d")[0].rank, 1);
    }

    #[test]
    fn correlation_matrix_properties() {
        let truth = perf(&[
            ("m1", "a", 0.9),
            ("m2", "a", 0.5),
            ("m3", "a", 0.1),
            ("m1", "b", 0.8),
            ("m2", "b", 0.6),
            ("m3", "b", 0.3),
            ("m1", "c", 0.1),
            ("m2", "c", 0.9),
            ("m3", "c", 0.4),
            ("m9", "z", 0.5),
        ]);
        let ds: Vec<String> = ["a", "b", "c", "z"].iter().map(|s| s.to_string()).collect();
        let m = performance_correlation_matrix(&truth, &ds);
        for i in 0..4 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                assert!(m.values[i][j] == m.values[j][i] || m.values[i][j].is_nan());
            }
        }
        assert_eq!(m.get("a", "b"), Some(1.0));
        assert!(m.get("a", "z").unwrap().is_nan());

        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(",a,b,c,z\na,1.0000,1.0000,"));
        assert!(text.contains("z,,,,1.0000"));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("null"));
    }

    fn tied_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![1 => Just(0.5), 4 => (0u32..1000).prop_map(|v| v as f64 / 100.0)],
            len,
        )
    }

    proptest! {
        #[test]
        fn kendall_matches_pairwise_oracle(
            (t, s) in (2usize..40).prop_flat_map(|n| (tied_vec(n), tied_vec(n)))
        ) {
            prop_assume!(!is_constant(&t));
            let fast = weighted_kendall(&t, &s).unwrap();
            prop_assert!((fast - kendall_oracle(&t, &s)).abs() <= 1e-12);
        }

        #[test]
        fn statistics_invariant_under_monotone_maps(
            (t, s) in (3usize..30).prop_flat_map(|n| (tied_vec(n), tied_vec(n)))
        ) {
            prop_assume!(!is_constant(&t) && !is_constant(&s));
            let cube = |v: &[f64]| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
            let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
            let rho = spearman(&s, &t).unwrap();
            prop_assert!((rho - spearman(&exp(&s), &cube(&t)).unwrap()).abs() < 1e-12);
            let tau = weighted_kendall(&t, &s).unwrap();
            prop_assert!((tau - weighted_kendall(&cube(&t), &exp(&s)).unwrap()).abs() < 1e-12);
        }
    }
}
