//! Evaluation metrics: the accuracy matrix and its derived averages, the
//! ρ-spectrum, active hidden units and gradient/representation similarity
//! statistics.
//!
//! Task indices `t` in the public functions are 1-based counts of learned
//! tasks, so `avg_accuracy(a, 5)` is the average after the fifth task.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, MlpModel, RepresentationTap};
use crate::tensor::{cosine, norm, Tensor2};

/// Lower-triangular grid: `rows[t][i]` is the accuracy on task `i` after
/// learning task `t` (both 0-based), in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, r) in rows.iter().enumerate() {
            if r.len() != t + 1 {
                return Err(Error::Bookkeeping(format!(
                    "row {t} has {} entries, expected {}",
                    r.len(),
                    t + 1
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Bookkeeping(format!(
                "row {} has {} entries, expected {}",
                self.rows.len(),
                row.len(),
                self.rows.len() + 1
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(t, r)| r[t]).collect()
    }

    fn row(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::Bookkeeping(format!(
                "row {t} requested from a matrix with {} complete rows",
                self.rows.len()
            )));
        }
        Ok(&self.rows[t - 1])
    }
}

/// `ā_t = (1/t) Σ_i a_{t,i}`.
pub fn avg_accuracy(a: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = a.row(t)?;
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// `f̄_t = (1/(t−1)) Σ_{i<t} max_{j∈[i, t−1]} (a_{j,i} − a_{t,i})`; 0 for `t = 1`.
///
/// Per-task terms are not clamped and may be negative.
pub fn avg_forgetting(a: &AccuracyMatrix, t: usize) -> Result<f64> {
    let last = a.row(t)?;
    if t == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..t - 1 {
        let best = (i..t - 1).map(|j| a.rows[j][i]).fold(f64::NEG_INFINITY, f64::max);
        total += best - last[i];
    }
    Ok(total / (t - 1) as f64)
}

/// `Ī_t = (1/t) Σ_i (a*_i − a_{i,i})` per method, with `a*_i` the best
/// diagonal entry across methods. Uses every task of the shared sequence.
pub fn avg_intransigence(matrices: &[&AccuracyMatrix]) -> Result<Vec<f64>> {
    let Some(first) = matrices.first() else {
        return Ok(vec![]);
    };
    let t = first.n_tasks();
    if t == 0 {
        return Err(Error::Comparison("accuracy matrices are empty".into()));
    }
    if let Some(m) = matrices.iter().find(|m| m.n_tasks() != t) {
        return Err(Error::Comparison(format!(
            "task counts differ: {t} vs {}",
            m.n_tasks()
        )));
    }
    let diags: Vec<Vec<f64>> = matrices.iter().map(|m| m.diagonal()).collect();
    let best: Vec<f64> = (0..t)
        .map(|i| diags.iter().map(|d| d[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(diags
        .iter()
        .map(|d| d.iter().zip(&best).map(|(a, b)| b - a).sum::<f64>() / t as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, normalised to sum to one; length `min(rows, cols)`.
    pub singular_values: Vec<f64>,
    pub rho: f64,
}

pub const RHO_EPS: f64 = 1e-12;

/// KL divergence from the uniform distribution to the normalised singular
/// value spectrum of `reps`.
pub fn rho_spectrum(reps: &Tensor2) -> Result<SpectrumReport> {
    if reps.rows() < 2 {
        return Err(Error::Spectrum("need at least two representation rows".into()));
    }
    let m = DMatrix::from_row_slice(reps.rows(), reps.cols(), reps.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let d = reps.rows().min(reps.cols());
    s.truncate(d);
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Spectrum("representation matrix is all zero".into()));
    }
    s.iter_mut().for_each(|v| *v /= total);
    let u = 1.0 / d as f64;
    let rho = s.iter().map(|si| u * (u / (si + RHO_EPS)).ln()).sum::<f64>();
    Ok(SpectrumReport {
        singular_values: s,
        rho: rho.max(0.0),
    })
}

/// Number of hidden units per layer whose mean activation over `x` exceeds
/// `threshold`.
pub fn active_dims(model: &MlpModel, x: &Tensor2, threshold: f64) -> Result<Vec<usize>> {
    let widths = model.hidden_widths().to_vec();
    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    let chunk = 2048;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + chunk).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let trace = nn::forward(model, &x.select_rows(&idx))?;
        for (s, h) in sums.iter_mut().zip(&trace.per_layer_outputs) {
            for row in h.iter_rows() {
                s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        start = end;
    }
    let n = x.rows().max(1) as f64;
    Ok(sums
        .iter()
        .map(|s| s.iter().filter(|&&v| v / n > threshold).count())
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for k in 0..n {
        let (da, db) = (a[k] - ma, b[k] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairSimilarities {
    pub gradient: Vec<f64>,
    pub representation: Vec<f64>,
    pub correlation: Option<f64>,
}

impl PairSimilarities {
    pub fn mean_gradient(&self) -> f64 {
        mean(&self.gradient)
    }

    pub fn mean_representation(&self) -> f64 {
        mean(&self.representation)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub positive: PairSimilarities,
    pub negative: PairSimilarities,
    /// Pairs skipped because a gradient or representation had zero norm.
    pub excluded_zero: usize,
}

/// Pairwise cosine similarities of per-sample gradients and representations,
/// split by pair type, with their Pearson correlation.
pub fn similarity_stats(model: &MlpModel, x: &Tensor2, labels: &[usize], tap: RepresentationTap) -> Result<SimilarityStats> {
    let trace = nn::forward(model, x)?;
    let grads = nn::per_sample_gradients(model, &trace, labels)?;
    let reps = trace.representation(tap)?;
    let mut out = SimilarityStats::default();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let (gi, gj) = (&grads[i].flat, &grads[j].flat);
            if norm(gi) == 0.0 || norm(gj) == 0.0 || norm(reps.row(i)) == 0.0 || norm(reps.row(j)) == 0.0 {
                out.excluded_zero += 1;
                continue;
            }
            let bucket = if labels[i] == labels[j] {
                &mut out.positive
            } else {
                &mut out.negative
            };
            bucket.gradient.push(cosine(gi, gj));
            bucket.representation.push(cosine(reps.row(i), reps.row(j)));
        }
    }
    for b in [&mut out.positive, &mut out.negative] {
        b.correlation = pearson(&b.gradient, &b.representation);
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn average_accuracy_examples() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.95]]).unwrap();
        assert!((avg_accuracy(&a, 2).unwrap() - 0.875).abs() < 1e-15);
        assert!(avg_accuracy(&a, 3).is_err());
        let ones = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(avg_accuracy(&ones, 2).unwrap(), 1.0);
    }

    #[test]
    fn forgetting_examples() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.95]]).unwrap();
        assert!((avg_forgetting(&a, 2).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(avg_forgetting(&a, 1).unwrap(), 0.0);
        let up = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.5, 0.7]]).unwrap();
        assert_eq!(avg_forgetting(&up, 2).unwrap(), 0.0);
        // negative terms are kept
        let neg = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.7, 0.7]]).unwrap();
        assert!((avg_forgetting(&neg, 2).unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn intransigence_examples() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.0, 0.8]]).unwrap();
        let b = AccuracyMatrix::from_rows(vec![vec![0.85], vec![0.0, 0.9]]).unwrap();
        assert_eq!(avg_intransigence(&[&a]).unwrap(), vec![0.0]);
        let i = avg_intransigence(&[&a, &b]).unwrap();
        assert!((i[0] - 0.05).abs() < 1e-12 && (i[1] - 0.025).abs() < 1e-12);
        let short = AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap();
        assert!(matches!(avg_intransigence(&[&a, &short]), Err(Error::Comparison(_))));
    }

    #[test]
    fn rho_of_identity_is_zero() {
        let mut eye = Tensor2::zeros(4, 4);
        (0..4).for_each(|i| eye.set(i, i, 1.0));
        let r = rho_spectrum(&eye).unwrap();
        assert!(r.rho.abs() < 1e-9);
        assert!(rho_spectrum(&Tensor2::zeros(3, 3)).is_err());
    }

    #[test]
    fn active_dims_examples() {
        let zero = MlpModel::zeros(&[3, 4, 2], Activation::Relu).unwrap();
        let x = Tensor2::filled(5, 3, 1.0);
        assert_eq!(active_dims(&zero, &x, 0.5).unwrap(), vec![0]);
        let flat = vec![1.0; zero.param_count()];
        let ones = MlpModel::from_flat(&[3, 4, 2], Activation::Identity, &flat).unwrap();
        assert_eq!(active_dims(&ones, &x, 0.5).unwrap(), vec![4]);
    }

    #[test]
    fn pearson_bounds() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}
