//! Training objectives: softmax cross-entropy plus one optional pairwise
//! auxiliary loss on the representation (DRL, Multisimilarity, R-Margin),
//! combined as `CE + λ · aux`.
//!
//! Every auxiliary returns its value together with the exact gradient with
//! respect to the representation matrix; [`crate::nn::backward`] pushes that
//! gradient through the network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, RepresentationTap};
use crate::tensor::{dot, norm, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Auxiliary {
    #[default]
    None,
    Drl,
    Multisim,
    RMargin,
}

/// Which DRL terms are active; the single-term variants exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DrlTerms {
    #[default]
    Both,
    BetweenOnly,
    WithinOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub auxiliary: Auxiliary,
    pub lambda: f64,
    /// Weight of the within-class DRL term.
    pub alpha: f64,
    pub drl_terms: DrlTerms,
    pub alpha_ms: f64,
    pub beta_ms: f64,
    pub gamma_ms: f64,
    pub gamma_rm: f64,
    pub beta_rm_init: f64,
    pub p_rho: f64,
    pub tap: RepresentationTap,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            auxiliary: Auxiliary::None,
            lambda: 0.0,
            alpha: 2.0,
            drl_terms: DrlTerms::Both,
            alpha_ms: 2.0,
            beta_ms: 40.0,
            gamma_ms: 0.5,
            gamma_rm: 0.2,
            beta_rm_init: 0.6,
            p_rho: 0.2,
            tap: RepresentationTap::AllLayers,
        }
    }
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self::default()
    }

    pub fn drl(lambda: f64, alpha: f64) -> Self {
        Self {
            auxiliary: Auxiliary::Drl,
            lambda,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a non-negative number, got {v}")))
            }
        };
        finite_nonneg("lambda", self.lambda)?;
        finite_nonneg("alpha", self.alpha)?;
        if !(0.0..=1.0).contains(&self.p_rho) {
            return Err(Error::Config(format!("p_rho must lie in [0, 1], got {}", self.p_rho)));
        }
        if self.auxiliary == Auxiliary::Multisim && !(self.alpha_ms > 0.0 && self.beta_ms > 0.0) {
            return Err(Error::Config("multisimilarity alpha_ms and beta_ms must be positive".into()));
        }
        Ok(())
    }
}

/// Unordered index pairs of a batch split by label agreement.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairIndex {
    pub negative_pairs: Vec<(usize, usize)>,
    pub positive_pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut out = Self::default();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] == labels[j] {
                    out.positive_pairs.push((i, j));
                } else {
                    out.negative_pairs.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_negative(&self) -> usize {
        self.negative_pairs.len()
    }

    pub fn n_positive(&self) -> usize {
        self.positive_pairs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DrlValue {
    pub between: f64,
    pub within: f64,
    pub total: f64,
}

fn check_reps(reps: &Tensor2, labels: &[usize]) -> Result<()> {
    if reps.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} representations for {} labels",
            reps.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// `L_bt` / `L_wi` as means over negative / positive pairs; empty terms are 0.
pub fn drl_loss(reps: &Tensor2, labels: &[usize], alpha: f64) -> Result<DrlValue> {
    drl_with_grad(reps, labels, alpha, DrlTerms::Both).map(|(v, _)| v)
}

/// DRL value and `dL/dreps`. The returned `total` honours `terms`.
pub fn drl_with_grad(reps: &Tensor2, labels: &[usize], alpha: f64, terms: DrlTerms) -> Result<(DrlValue, Tensor2)> {
    check_reps(reps, labels)?;
    let pairs = PairIndex::from_labels(labels);
    let mean_inner = |list: &[(usize, usize)]| {
        if list.is_empty() {
            0.0
        } else {
            list.iter().map(|&(i, j)| dot(reps.row(i), reps.row(j))).sum::<f64>() / list.len() as f64
        }
    };
    let between = mean_inner(&pairs.negative_pairs);
    let within = mean_inner(&pairs.positive_pairs);
    let (w_bt, w_wi) = match terms {
        DrlTerms::Both => (1.0, alpha),
        DrlTerms::BetweenOnly => (1.0, 0.0),
        DrlTerms::WithinOnly => (0.0, alpha),
    };
    let mut grad = Tensor2::zeros(reps.rows(), reps.cols());
    let mut accumulate = |list: &[(usize, usize)], weight: f64| {
        if list.is_empty() || weight == 0.0 {
            return;
        }
        let c = weight / list.len() as f64;
        for &(i, j) in list {
            for k in 0..reps.cols() {
                let hi = reps.get(i, k);
                let hj = reps.get(j, k);
                grad.set(i, k, grad.get(i, k) + c * hj);
                grad.set(j, k, grad.get(j, k) + c * hi);
            }
        }
    };
    accumulate(&pairs.negative_pairs, w_bt);
    accumulate(&pairs.positive_pairs, w_wi);
    let value = DrlValue {
        between,
        within,
        total: w_bt * between + w_wi * within,
    };
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultisimParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MultisimParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 40.0,
            gamma: 0.5,
        }
    }
}

pub fn multisim_loss(reps: &Tensor2, labels: &[usize], params: MultisimParams) -> Result<f64> {
    multisim_with_grad(reps, labels, params).map(|(v, _)| v)
}

/// Label-mined Multisimilarity loss on cosine similarities, averaged over the
/// batch, with its gradient. Zero-norm rows have similarity 0 to everything.
pub fn multisim_with_grad(reps: &Tensor2, labels: &[usize], params: MultisimParams) -> Result<(f64, Tensor2)> {
    check_reps(reps, labels)?;
    let n = reps.rows();
    let mut grad = Tensor2::zeros(n, reps.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let norms: Vec<f64> = reps.iter_rows().map(norm).collect();
    let sim = |i: usize, j: usize| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            dot(reps.row(i), reps.row(j)) / (norms[i] * norms[j])
        }
    };
    let MultisimParams { alpha, beta, gamma } = params;
    // dL/ds_ij accumulated over both anchors.
    let mut ds = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut pos_terms = Vec::new();
        let mut neg_terms = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = sim(i, j);
            if labels[j] == labels[i] {
                let e = (-alpha * (s - gamma)).exp();
                pos_sum += e;
                pos_terms.push((j, e));
            } else {
                let e = (beta * (s - gamma)).exp();
                neg_sum += e;
                neg_terms.push((j, e));
            }
        }
        total += (1.0 + pos_sum).ln() / alpha + (1.0 + neg_sum).ln() / beta;
        for (j, e) in pos_terms {
            ds[i * n + j] += -e / (1.0 + pos_sum);
        }
        for (j, e) in neg_terms {
            ds[i * n + j] += e / (1.0 + neg_sum);
        }
    }
    let scale = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            let d = ds[i * n + j] * scale;
            if d == 0.0 || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            // s_ij depends on both h_i and h_j.
            let s = sim(i, j);
            let (ni, nj) = (norms[i], norms[j]);
            for k in 0..reps.cols() {
                let hi = reps.get(i, k);
                let hj = reps.get(j, k);
                let dsi = hj / (ni * nj) - s * hi / (ni * ni);
                let dsj = hi / (ni * nj) - s * hj / (nj * nj);
                grad.set(i, k, grad.get(i, k) + d * dsi);
                grad.set(j, k, grad.get(j, k) + d * dsj);
            }
        }
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub gamma: f64,
    pub beta: f64,
    pub p_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginEval {
    pub value: f64,
    pub grad: Tensor2,
    pub beta_grad: f64,
    /// Pair list actually used after ρ-switching: (i, j, is_positive).
    pub pairs: Vec<(usize, usize, bool)>,
}

/// Applies ρ-regularisation: every negative pair is, with probability `p_rho`,
/// replaced by a positive pair drawn uniformly with replacement. Batches
/// without positive pairs are left untouched.
pub fn switch_pairs<R: Rng + ?Sized>(pairs: &PairIndex, p_rho: f64, rng: &mut R) -> Vec<(usize, usize, bool)> {
    let mut out: Vec<(usize, usize, bool)> = pairs.positive_pairs.iter().map(|&(i, j)| (i, j, true)).collect();
    for &(i, j) in &pairs.negative_pairs {
        let draw: f64 = rng.gen();
        if draw < p_rho {
            if let Some(&(a, b)) = pairs.positive_pairs.choose(rng) {
                out.push((a, b, true));
                continue;
            }
        }
        out.push((i, j, false));
    }
    out
}

pub fn rmargin_loss<R: Rng + ?Sized>(reps: &Tensor2, labels: &[usize], params: MarginParams, rng: &mut R) -> Result<f64> {
    rmargin_with_grad(reps, labels, params, rng).map(|e| e.value)
}

/// Margin loss summed over ordered pairs `i ≠ j` (each unordered pair twice):
/// positive pairs contribute `γ + (d − β)`, negative pairs `γ − (d − β)`.
pub fn rmargin_with_grad<R: Rng + ?Sized>(
    reps: &Tensor2,
    labels: &[usize],
    params: MarginParams,
    rng: &mut R,
) -> Result<MarginEval> {
    check_reps(reps, labels)?;
    let index = PairIndex::from_labels(labels);
    let pairs = switch_pairs(&index, params.p_rho, rng);
    let mut grad = Tensor2::zeros(reps.rows(), reps.cols());
    let mut value = 0.0;
    let mut beta_grad = 0.0;
    for &(i, j, positive) in &pairs {
        let diff: Vec<f64> = reps.row(i).iter().zip(reps.row(j)).map(|(a, b)| a - b).collect();
        let d = norm(&diff);
        let sign = if positive { 1.0 } else { -1.0 };
        value += 2.0 * (params.gamma + sign * (d - params.beta));
        beta_grad += -2.0 * sign;
        if d > 0.0 {
            let c = 2.0 * sign / d;
            for (k, dk) in diff.iter().enumerate() {
                grad.set(i, k, grad.get(i, k) + c * dk);
                grad.set(j, k, grad.get(j, k) - c * dk);
            }
        }
    }
    Ok(MarginEval {
        value,
        grad,
        beta_grad,
        pairs,
    })
}

/// Auxiliary loss value with its gradients.
#[derive(Debug, Clone)]
pub struct AuxEval {
    pub value: f64,
    pub rep_grad: Option<Tensor2>,
    pub beta_grad: f64,
}

/// A [`LossSpec`] bound to its mutable state: the trainable R-Margin β and the
/// RNG driving pair switching.
#[derive(Debug, Clone)]
pub struct Objective {
    pub spec: LossSpec,
    pub margin_beta: f64,
    rng: ChaCha8Rng,
}

impl Objective {
    pub fn new(spec: LossSpec, seed: u64) -> Self {
        Self {
            margin_beta: spec.beta_rm_init,
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn has_auxiliary(&self) -> bool {
        self.spec.auxiliary != Auxiliary::None && self.spec.lambda > 0.0
    }

    /// Unweighted auxiliary value and gradients for one forward pass.
    pub fn evaluate(&mut self, trace: &ForwardTrace, labels: &[usize]) -> Result<AuxEval> {
        if !self.has_auxiliary() {
            return Ok(AuxEval {
                value: 0.0,
                rep_grad: None,
                beta_grad: 0.0,
            });
        }
        let reps = trace.representation(self.spec.tap)?;
        let s = self.spec;
        Ok(match s.auxiliary {
            Auxiliary::None => unreachable!("checked by has_auxiliary"),
            Auxiliary::Drl => {
                let (v, g) = drl_with_grad(&reps, labels, s.alpha, s.drl_terms)?;
                AuxEval {
                    value: v.total,
                    rep_grad: Some(g),
                    beta_grad: 0.0,
                }
            }
            Auxiliary::Multisim => {
                let params = MultisimParams {
                    alpha: s.alpha_ms,
                    beta: s.beta_ms,
                    gamma: s.gamma_ms,
                };
                let (v, g) = multisim_with_grad(&reps, labels, params)?;
                AuxEval {
                    value: v,
                    rep_grad: Some(g),
                    beta_grad: 0.0,
                }
            }
            Auxiliary::RMargin => {
                let params = MarginParams {
                    gamma: s.gamma_rm,
                    beta: self.margin_beta,
                    p_rho: s.p_rho,
                };
                let e = rmargin_with_grad(&reps, labels, params, &mut self.rng)?;
                AuxEval {
                    value: e.value,
                    rep_grad: Some(e.grad),
                    beta_grad: e.beta_grad,
                }
            }
        })
    }

    /// SGD update of the objective's own trainable scalar.
    pub fn step(&mut self, beta_grad: f64, lr: f64) {
        if self.spec.auxiliary == Auxiliary::RMargin {
            self.margin_beta -= lr * beta_grad;
        }
    }
}

/// `CE + λ · aux` for one forward pass.
pub fn composite_loss(trace: &ForwardTrace, labels: &[usize], objective: &mut Objective) -> Result<f64> {
    let ce = crate::nn::cross_entropy(&trace.logits, labels);
    let aux = objective.evaluate(trace, labels)?;
    Ok(ce + objective.spec.lambda * aux.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn drl_examples() {
        let v = drl_loss(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1], 2.0).unwrap();
        assert_eq!((v.between, v.within), (0.0, 0.0));

        let v = drl_loss(&t(&[&[1.0, 1.0], &[1.0, 1.0]]), &[3, 3], 2.0).unwrap();
        assert_eq!((v.within, v.total), (2.0, 4.0));

        let v = drl_loss(&t(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]), &[0, 0, 1], 1.0).unwrap();
        assert_eq!((v.between, v.within, v.total), (1.0, 1.0, 2.0));
    }

    #[test]
    fn drl_single_term_variants() {
        let reps = t(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let (bt, _) = drl_with_grad(&reps, &[0, 0, 1], 3.0, DrlTerms::BetweenOnly).unwrap();
        assert_eq!(bt.total, 1.0);
        let (wi, _) = drl_with_grad(&reps, &[0, 0, 1], 3.0, DrlTerms::WithinOnly).unwrap();
        assert_eq!(wi.total, 3.0);
    }

    #[test]
    fn pair_index_counts_unordered_pairs() {
        let p = PairIndex::from_labels(&[0, 0, 1, 2]);
        assert_eq!(p.n_positive(), 1);
        assert_eq!(p.n_negative(), 5);
    }

    #[test]
    fn multisim_empty_sums_vanish() {
        let v = multisim_loss(&t(&[&[1.0, 2.0]]), &[0], MultisimParams::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn multisim_single_negative_pair_at_gamma() {
        // cos = 0.5 between (1,0) and (0.5, sqrt(3)/2)
        let reps = t(&[&[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]]);
        let v = multisim_loss(&reps, &[0, 1], MultisimParams::default()).unwrap();
        // both anchors contribute (1/40)·log 2, averaged over 2 anchors
        assert!((v - 2f64.ln() / 40.0).abs() < 1e-12);
    }

    #[test]
    fn multisim_zero_norm_rows_are_neutral() {
        let reps = t(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let (v, g) = multisim_with_grad(&reps, &[0, 1], MultisimParams::default()).unwrap();
        assert!(v.is_finite());
        assert!(g.is_finite());
    }

    #[test]
    fn rmargin_identical_positive_pair() {
        let reps = t(&[&[0.3, 0.1], &[0.3, 0.1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = MarginParams {
            gamma: 0.2,
            beta: 0.6,
            p_rho: 0.2,
        };
        let e = rmargin_with_grad(&reps, &[1, 1], params, &mut rng).unwrap();
        // two ordered pairs, each γ + (0 − β) = −0.4
        assert!((e.value - 2.0 * -0.4).abs() < 1e-12);
        assert_eq!(e.beta_grad, -2.0);
    }

    #[test]
    fn rho_switching_boundaries() {
        let pairs = PairIndex::from_labels(&[0, 0, 1, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let none = switch_pairs(&pairs, 0.0, &mut rng);
        assert_eq!(none.iter().filter(|p| !p.2).count(), pairs.n_negative());
        let all = switch_pairs(&pairs, 1.0, &mut rng);
        assert!(all.iter().all(|p| p.2));
        assert_eq!(all.len(), pairs.n_negative() + pairs.n_positive());
        // no positives to switch to
        let lonely = PairIndex::from_labels(&[0, 1, 2]);
        assert!(switch_pairs(&lonely, 1.0, &mut rng).iter().all(|p| !p.2));
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::drl(1e-2, 2.0).validate().is_ok());
        assert!(LossSpec::drl(-1.0, 2.0).validate().is_err());
        assert!(LossSpec { p_rho: 1.5, ..LossSpec::default() }.validate().is_err());
    }
}
