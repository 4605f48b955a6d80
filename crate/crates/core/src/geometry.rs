//! Fréchet distance between Gaussian fits of dataset embedding sets, and
//! its relation to cross-dataset performance correlation.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingSet, PerformanceTable};
use crate::rankeval::{fmt4, spearman};

const SYMMETRY_TOL: f64 = 1e-8;
const NEGATIVE_EIGEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (n - 1) covariance, symmetrized.
pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "Gaussian fit needs at least 2 rows, got {n}"
        )));
    }
    let d = set.dim();
    let mut data = DMatrix::<f64>::zeros(n, d);
    for (i, row) in set.rows().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            data[(i, j)] = f64::from(v);
        }
    }
    let mean = DVector::from_iterator(d, data.column_iter().map(|c| c.mean()));
    for mut row in data.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (data.transpose() * &data) / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

fn sqrt_from_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&roots) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues down to `-1e-8 * max(1, max|M|)` are treated as zero; anything
/// more negative, or an asymmetric input, is rejected.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = scale_of(m);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Numeric(format!(
            "matrix is not symmetric (max |M - M^T| = {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if min < -NEGATIVE_EIGEN_TOL * scale {
        return Err(Error::Numeric(format!(
            "matrix is indefinite (eigenvalue {min:e})"
        )));
    }
    Ok(sqrt_from_eigen(eig))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, floored at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != b.cov.nrows() {
        return Err(Error::LengthMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = matrix_sqrt_psd(&a.cov)?;
    matrix_sqrt_psd(&b.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdPair {
    pub dataset_a: String,
    pub dataset_b: String,
    pub fd: f64,
    /// Spearman correlation of model performance; NaN when undefined.
    pub rho: f64,
    /// Datasets whose closest partner (lowest FD) is this pair.
    pub min_fd_for: Vec<String>,
}

impl FdPair {
    pub fn is_min_fd_partner(&self) -> bool {
        !self.min_fd_for.is_empty()
    }
}

fn performance_rho(truth: &PerformanceTable, a: &str, b: &str) -> f64 {
    let va = truth.dataset_values(a);
    let vb = truth.dataset_values(b);
    let (xs, ys): (Vec<f64>, Vec<f64>) = va
        .iter()
        .filter_map(|(m, &x)| vb.get(m).map(|&y| (x, y)))
        .unzip();
    spearman(&xs, &ys).unwrap_or(f64::NAN)
}

/// FD and performance correlation for every unordered dataset pair, in
/// input order, with each dataset's lowest-FD partner marked.
pub fn fd_vs_correlation(
    sets: &[(String, EmbeddingSet)],
    truth: &PerformanceTable,
) -> Result<Vec<FdPair>> {
    if sets.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need embeddings for at least 2 datasets, got {}",
            sets.len()
        )));
    }
    let stats = sets
        .par_iter()
        .map(|(_, s)| fit_gaussian(s))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|i| (i + 1..sets.len()).map(move |j| (i, j)))
        .collect();
    let fds = pairs
        .par_iter()
        .map(|&(i, j)| frechet_distance(&stats[i], &stats[j]))
        .collect::<Result<Vec<_>>>()?;

    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for d in [i, j] {
            match best.get(&d) {
                Some(&q) if fds[q] <= fds[p] => {}
                _ => {
                    best.insert(d, p);
                }
            }
        }
    }
    let mut out: Vec<FdPair> = pairs
        .iter()
        .zip(&fds)
        .map(|(&(i, j), &fd)| FdPair {
            dataset_a: sets[i].0.clone(),
            dataset_b: sets[j].0.clone(),
            fd,
            rho: performance_rho(truth, &sets[i].0, &sets[j].0),
            min_fd_for: Vec::new(),
        })
        .collect();
    for (d, p) in best {
        out[p].min_fd_for.push(sets[d].0.clone());
    }
    Ok(out)
}

/// `dataset_a,dataset_b,fd,rho,is_min_fd_partner` with 4-decimal values.
pub fn write_fd_pairs_csv<W: Write>(pairs: &[FdPair], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["dataset_a", "dataset_b", "fd", "rho", "is_min_fd_partner"])?;
    for p in pairs {
        wtr.write_record([
            p.dataset_a.clone(),
            p.dataset_b.clone(),
            fmt4(p.fd),
            fmt4(p.rho),
            p.is_min_fd_partner().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
