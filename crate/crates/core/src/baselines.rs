//! Gradient-space baselines: A-GEM projection, GSS-IQP subset selection and
//! the online GSS-greedy memory.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossSpec, Objective};
use crate::memory::Sample;
use crate::nn::{self, GradientVector, MlpModel};
use crate::tensor::{cosine, dot, norm, Tensor2};

/// Mean cross-entropy gradient over a reference batch drawn from memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RefGradient {
    pub flat: GradientVector,
    pub ref_batch_size: usize,
}

impl RefGradient {
    pub fn compute(model: &MlpModel, x: &Tensor2, labels: &[usize]) -> Result<Self> {
        let trace = nn::forward(model, x)?;
        let mut ce = Objective::new(LossSpec::cross_entropy(), 0);
        let b = nn::backward(model, &trace, labels, &mut ce, false)?;
        Ok(Self {
            flat: b.grad,
            ref_batch_size: labels.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Unchanged,
    Projected,
    /// Reference gradient had zero norm; `g` returned as is.
    SkippedZeroReference,
}

/// `g̃ = g − (⟨g,r⟩/⟨r,r⟩)·r` when `⟨g,r⟩ < 0`, otherwise `g`.
pub fn agem_project(g: &[f64], g_ref: &[f64]) -> (Vec<f64>, Projection) {
    let rr = dot(g_ref, g_ref);
    if rr == 0.0 {
        log::warn!("zero reference gradient; skipping projection");
        return (g.to_vec(), Projection::SkippedZeroReference);
    }
    let gr = dot(g, g_ref);
    if gr >= 0.0 {
        return (g.to_vec(), Projection::Unchanged);
    }
    let c = gr / rr;
    (g.iter().zip(g_ref).map(|(a, b)| a - c * b).collect(), Projection::Projected)
}

/// Sum of pairwise cosine similarities over ordered pairs `i ≠ j` in `subset`.
///
/// The diagonal is omitted; it only adds the constant `|subset|`.
pub fn iqp_objective(cos: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mut s = 0.0;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            s += 2.0 * cos[i][j];
        }
    }
    s
}

pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        c[i][i] = if norms[i] > 0.0 { 1.0 } else { 0.0 };
        for j in i + 1..n {
            let v = if norms[i] > 0.0 && norms[j] > 0.0 {
                (dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqpSelection {
    pub indices: Vec<usize>,
    pub objective: f64,
    /// Candidates dropped for having a zero gradient.
    pub excluded: Vec<usize>,
}

fn greedy_from(cos: &[Vec<f64>], cands: &[usize], k: usize, seed_item: usize) -> Vec<usize> {
    let mut chosen = vec![seed_item];
    // running Σ_{j∈chosen} cos[i][j] for every candidate i
    let mut acc: Vec<f64> = cands.iter().map(|&i| cos[i][seed_item]).collect();
    let mut used = vec![false; cands.len()];
    used[cands.iter().position(|&c| c == seed_item).expect("seed is a candidate")] = true;
    while chosen.len() < k {
        let (pos, _) = acc
            .iter()
            .enumerate()
            .filter(|(p, _)| !used[*p])
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("enough candidates");
        used[pos] = true;
        let item = cands[pos];
        chosen.push(item);
        for (a, &i) in acc.iter_mut().zip(cands) {
            *a += cos[i][item];
        }
    }
    chosen
}

/// First-improvement swap search until no single in/out exchange lowers the
/// objective.
fn swap_search(cos: &[Vec<f64>], cands: &[usize], subset: &mut Vec<usize>) {
    loop {
        let mut improved = false;
        let inside: Vec<bool> = {
            let mut v = vec![false; cos.len()];
            subset.iter().for_each(|&i| v[i] = true);
            v
        };
        // contribution of each item against the current subset
        let contrib = |i: usize, s: &[usize]| -> f64 { s.iter().map(|&j| cos[i][j]).sum() };
        'outer: for a in 0..subset.len() {
            let out = subset[a];
            let out_c = contrib(out, subset) - cos[out][out];
            for &inn in cands {
                if inside[inn] {
                    continue;
                }
                let in_c = contrib(inn, subset) - cos[inn][out];
                if in_c < out_c - 1e-12 {
                    subset[a] = inn;
                    improved = true;
                    break 'outer;
                }
            }
        }
        if !improved {
            return;
        }
    }
}

/// Minimises the summed pairwise gradient cosine over subsets of size `k`
/// with greedy construction plus swap search, from the most dissimilar pair
/// and from `restarts` random seeds.
pub fn iqp_select_from_gradients<R: Rng + ?Sized>(
    grads: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<IqpSelection> {
    let excluded: Vec<usize> = (0..grads.len()).filter(|&i| norm(&grads[i]) == 0.0).collect();
    let cands: Vec<usize> = (0..grads.len()).filter(|i| !excluded.contains(i)).collect();
    if k > cands.len() {
        return Err(Error::Config(format!(
            "cannot select {k} of {} candidates with nonzero gradients",
            cands.len()
        )));
    }
    if k == 0 {
        return Ok(IqpSelection {
            indices: vec![],
            objective: 0.0,
            excluded,
        });
    }
    let cos = cosine_matrix(grads);
    let mut starts = Vec::new();
    if cands.len() >= 2 {
        let mut best = (cands[0], f64::INFINITY);
        for (a, &i) in cands.iter().enumerate() {
            for &j in &cands[a + 1..] {
                if cos[i][j] < best.1 {
                    best = (i, cos[i][j]);
                }
            }
        }
        starts.push(best.0);
    }
    starts.extend((0..restarts).map(|_| *cands.choose(rng).expect("non-empty")));
    if starts.is_empty() {
        starts.push(cands[0]);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in starts {
        let mut subset = greedy_from(&cos, &cands, k, s);
        swap_search(&cos, &cands, &mut subset);
        let obj = iqp_objective(&cos, &subset);
        if best.as_ref().is_none_or(|b| obj < b.1) {
            best = Some((subset, obj));
        }
    }
    let (mut indices, objective) = best.expect("at least one start");
    indices.sort_unstable();
    Ok(IqpSelection {
        indices,
        objective,
        excluded,
    })
}

/// GSS-IQP over the per-sample cross-entropy gradients of `(x, labels)`;
/// selects `⌈fraction·N⌉` samples.
pub fn gss_iqp_select<R: Rng + ?Sized>(
    model: &MlpModel,
    x: &Tensor2,
    labels: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<IqpSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("selection fraction must lie in [0, 1], got {fraction}")));
    }
    let trace = nn::forward(model, x)?;
    let grads: Vec<Vec<f64>> = nn::per_sample_gradients(model, &trace, labels)?
        .into_iter()
        .map(|g| g.flat)
        .collect();
    let k = (fraction * labels.len() as f64).ceil() as usize;
    iqp_select_from_gradients(&grads, k, 8, rng)
}

/// Online memory that admits samples by gradient diversity.
#[derive(Debug, Clone, Default)]
pub struct GssGreedyBuffer {
    pub capacity: usize,
    pub samples: Vec<Sample>,
    /// Max cosine similarity recorded at admission, in `[-1, 1]`.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GssDecision {
    Appended,
    Replaced(usize),
    Dropped,
}

impl GssGreedyBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor2, Vec<usize>)> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.samples[i].x.as_slice()).collect();
        let x = Tensor2::from_rows(&rows)?;
        Ok((x, idx.iter().map(|&i| self.samples[i].label).collect()))
    }

    /// Per-sample gradients of `comparison_size` random stored samples.
    pub fn comparison_gradients<R: Rng + ?Sized>(
        &self,
        model: &MlpModel,
        comparison_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if self.samples.is_empty() || comparison_size == 0 {
            return Ok(vec![]);
        }
        let m = comparison_size.min(self.samples.len());
        let idx = index::sample(rng, self.samples.len(), m).into_vec();
        let (x, y) = self.batch(&idx)?;
        let trace = nn::forward(model, &x)?;
        Ok(nn::per_sample_gradients(model, &trace, &y)?
            .into_iter()
            .map(|g| g.flat)
            .collect())
    }

    /// Max cosine between `g` and the gradients of `comparison_size` random
    /// stored samples; 0 for an empty buffer.
    pub fn score<R: Rng + ?Sized>(&self, model: &MlpModel, g: &[f64], comparison_size: usize, rng: &mut R) -> Result<f64> {
        Ok(max_cosine(g, &self.comparison_gradients(model, comparison_size, rng)?))
    }

    /// Offers a stream batch. Free slots are filled directly; once the
    /// buffer is full, replacement is attempted only when the batch's mean
    /// gradient has negative max cosine against the comparison gradients.
    pub fn offer_batch<R: Rng + ?Sized>(
        &mut self,
        model: &MlpModel,
        samples: Vec<Sample>,
        grads: &[Vec<f64>],
        comparison_size: usize,
        rng: &mut R,
    ) -> Result<Vec<GssDecision>> {
        let refs = self.comparison_gradients(model, comparison_size, rng)?;
        let dim = grads.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for g in grads {
            mean.iter_mut().zip(g).for_each(|(m, v)| *m += v / grads.len() as f64);
        }
        let open = refs.is_empty() || max_cosine(&mean, &refs) < 0.0;
        Ok(samples
            .into_iter()
            .zip(grads)
            .map(|(s, g)| {
                if self.samples.len() < self.capacity || open {
                    self.offer(s, max_cosine(g, &refs), rng)
                } else {
                    GssDecision::Dropped
                }
            })
            .collect())
    }

    /// Admission step for one candidate with a precomputed gradient.
    pub fn offer<R: Rng + ?Sized>(&mut self, sample: Sample, score: f64, rng: &mut R) -> GssDecision {
        if self.samples.len() < self.capacity {
            self.samples.push(sample);
            self.scores.push(score);
            return GssDecision::Appended;
        }
        if self.capacity == 0 {
            return GssDecision::Dropped;
        }
        // shift to [0, 2] so scores work as sampling weights
        let c = score + 1.0;
        if c >= 2.0 {
            return GssDecision::Dropped;
        }
        let weights: Vec<f64> = self.scores.iter().map(|s| s + 1.0).collect();
        let total: f64 = weights.iter().sum();
        let i = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..weights.len())
        };
        let ci = weights[i];
        let r: f64 = rng.gen();
        if ci + c > 0.0 && r < ci / (ci + c) {
            self.samples[i] = sample;
            self.scores[i] = score;
            GssDecision::Replaced(i)
        } else {
            GssDecision::Dropped
        }
    }
}

/// Largest cosine between `g` and any of `refs`; 0 when `refs` is empty.
pub fn max_cosine(g: &[f64], refs: &[Vec<f64>]) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    refs.iter().map(|h| cosine(g, h)).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        assert_eq!(agem_project(&[1.0, 1.0], &[1.0, 0.0]), (vec![1.0, 1.0], Projection::Unchanged));
        assert_eq!(agem_project(&[-1.0, 1.0], &[1.0, 0.0]), (vec![0.0, 1.0], Projection::Projected));
        assert_eq!(agem_project(&[-1.0, 1.0], &[0.0, 0.0]).1, Projection::SkippedZeroReference);
    }

    #[test]
    fn identical_gradients_accept_any_subset() {
        let g = vec![vec![1.0, 2.0]; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = iqp_select_from_gradients(&g, 2, 8, &mut rng).unwrap();
        assert_eq!(sel.indices.len(), 2);
        assert!((sel.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_are_excluded() {
        let g = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = iqp_select_from_gradients(&g, 2, 2, &mut rng).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        assert_eq!(sel.excluded, vec![0]);
        assert!(iqp_select_from_gradients(&g, 3, 2, &mut rng).is_err());
    }

    #[test]
    fn gss_greedy_admission() {
        let mut buf = GssGreedyBuffer::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = |i| Sample {
            x: vec![i as f64],
            label: 0,
            key: 0,
            source: i,
        };
        let model = MlpModel::zeros(&[1, 2], crate::nn::Activation::Identity).unwrap();
        assert_eq!(buf.score(&model, &[1.0], 10, &mut rng).unwrap(), 0.0);
        assert_eq!(buf.offer(s(0), 0.0, &mut rng), GssDecision::Appended);
        assert_eq!(buf.offer(s(1), 0.0, &mut rng), GssDecision::Appended);
        assert_eq!(buf.offer(s(2), 1.0, &mut rng), GssDecision::Dropped);
        let mut replaced = 0;
        for i in 3..200 {
            if let GssDecision::Replaced(_) = buf.offer(s(i), -1.0, &mut rng) {
                replaced += 1;
            }
        }
        assert!(replaced > 0);
        assert_eq!(buf.len(), 2);
    }
}
