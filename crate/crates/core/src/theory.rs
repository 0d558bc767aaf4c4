//! Numerical lab for the gradient/representation sign identities.
//!
//! For a linear softmax model with the bias folded into the input as a
//! trailing constant 1, the per-sample gradient is `x̃ ⊗ ε` with `ε = p − y`,
//! so `⟨g_n, g_m⟩ = ⟨x̃_n, x̃_m⟩·⟨ε_n, ε_m⟩` holds exactly. All `x_inner`
//! values below use the augmented inputs `x̃ = (x, 1)`.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, IqpSelection};
use crate::data::{self, Dataset, GaussianClass};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, Objective};
use crate::nn::{self, Activation, MlpModel};
use crate::tensor::{dot, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub n: usize,
    pub m: usize,
    pub x_inner: f64,
    pub g_inner: f64,
    pub eps_inner: f64,
    /// `p_{n,c_m} + p_{m,c_n}`.
    pub beta: f64,
    /// `⟨p_n, p_m⟩`.
    pub s_p: f64,
    pub positive: bool,
}

/// Diagnostics for index pairs of one batch, from a single forward pass.
pub fn diagnostics_for_pairs(
    model: &MlpModel,
    x: &Tensor2,
    labels: &[usize],
    pairs: &[(usize, usize)],
) -> Result<Vec<PairDiagnostics>> {
    let trace = nn::forward(model, x)?;
    let grads = nn::per_sample_gradients(model, &trace, labels)?;
    let p = &trace.probabilities;
    let eps = nn::ce_logit_residuals(&trace, labels);
    Ok(pairs
        .iter()
        .map(|&(n, m)| PairDiagnostics {
            n,
            m,
            x_inner: dot(x.row(n), x.row(m)) + 1.0,
            g_inner: dot(&grads[n].flat, &grads[m].flat),
            eps_inner: dot(eps.row(n), eps.row(m)),
            beta: p.get(n, labels[m]) + p.get(m, labels[n]),
            s_p: dot(p.row(n), p.row(m)),
            positive: labels[n] == labels[m],
        })
        .collect())
}

pub fn pair_diagnostics(model: &MlpModel, x: &Tensor2, labels: &[usize], n: usize, m: usize) -> Result<PairDiagnostics> {
    Ok(diagnostics_for_pairs(model, x, labels, &[(n, m)])?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub n_pairs: usize,
    pub max_rel_error: f64,
}

/// Relative gap between `⟨g_n,g_m⟩` and `⟨x̃_n,x̃_m⟩⟨ε_n,ε_m⟩`.
pub fn lemma1_rel_error(d: &PairDiagnostics) -> f64 {
    let rhs = d.x_inner * d.eps_inner;
    let scale = d.g_inner.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    (d.g_inner - rhs).abs() / scale
}

/// Random linear models (K ∈ {2,3,5,10}) and random inputs, one pair each.
pub fn lemma1_check(n_pairs: usize, seed: u64) -> Result<Lemma1Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n_pairs {
        let k = [2, 3, 5, 10][i % 4];
        let d = rng.gen_range(1..=16);
        let flat: Vec<f64> = (0..(d + 1) * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let model = MlpModel::from_flat(&[d, k], Activation::Identity, &flat)?;
        let xs: Vec<f64> = (0..2 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor2::new(2, d, xs)?;
        let labels = [rng.gen_range(0..k), rng.gen_range(0..k)];
        let diag = pair_diagnostics(&model, &x, &labels, 0, 1)?;
        worst = worst.max(lemma1_rel_error(&diag));
    }
    Ok(Lemma1Report {
        n_pairs,
        max_rel_error: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Pairs with nonzero `g_inner` and `x_inner`.
    pub n_pairs: usize,
    pub n_zero_excluded: usize,
    /// Pairs whose `β − s_p` is below floating-point resolution.
    pub n_tie_excluded: usize,
    pub pr_sign_flip: f64,
    pub pr_beta_gt_sp: f64,
    pub pr_g_negative: f64,
    pub pr_x_positive: f64,
    /// Pairs where `[sign flip] ≠ [β > s_p]`.
    pub exceptions: usize,
    /// Largest `|ε_n·ε_m − (s_p − β)|`.
    pub max_identity_gap: f64,
}

/// Relative width of the `β ≈ s_p` band treated as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub fn verify_theorem1(diags: &[PairDiagnostics]) -> Theorem1Report {
    let mut r = Theorem1Report::default();
    let (mut flips, mut bgs, mut gneg, mut xpos) = (0usize, 0usize, 0usize, 0usize);
    for d in diags.iter().filter(|d| !d.positive) {
        r.max_identity_gap = r.max_identity_gap.max((d.eps_inner - (d.s_p - d.beta)).abs());
        if d.g_inner == 0.0 || d.x_inner == 0.0 {
            r.n_zero_excluded += 1;
            continue;
        }
        if (d.beta - d.s_p).abs() <= TIE_TOLERANCE * (d.beta + d.s_p) {
            r.n_tie_excluded += 1;
            continue;
        }
        r.n_pairs += 1;
        let flip = d.g_inner.signum() == (-d.x_inner).signum();
        let bgt = d.beta > d.s_p;
        flips += flip as usize;
        bgs += bgt as usize;
        gneg += (d.g_inner < 0.0) as usize;
        xpos += (d.x_inner > 0.0) as usize;
        if flip != bgt {
            r.exceptions += 1;
        }
    }
    if r.n_pairs > 0 {
        let n = r.n_pairs as f64;
        r.pr_sign_flip = flips as f64 / n;
        r.pr_beta_gt_sp = bgs as f64 / n;
        r.pr_g_negative = gneg as f64 / n;
        r.pr_x_positive = xpos as f64 / n;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub n_pairs: usize,
    pub zero_count: usize,
    /// Nonzero `g_inner` whose sign differs from `x_inner`.
    pub violations: usize,
    pub pr_g_negative: f64,
    pub pr_x_positive: f64,
}

pub fn verify_theorem2(diags: &[PairDiagnostics]) -> Theorem2Report {
    let mut r = Theorem2Report::default();
    let (mut gneg, mut xpos) = (0usize, 0usize);
    for d in diags.iter().filter(|d| d.positive) {
        if d.g_inner == 0.0 {
            r.zero_count += 1;
            continue;
        }
        r.n_pairs += 1;
        if d.g_inner.signum() != d.x_inner.signum() {
            r.violations += 1;
        }
        gneg += (d.g_inner < 0.0) as usize;
        xpos += (d.x_inner > 0.0) as usize;
    }
    if r.n_pairs > 0 {
        r.pr_g_negative = gneg as f64 / r.n_pairs as f64;
        r.pr_x_positive = xpos as f64 / r.n_pairs as f64;
    }
    r
}

// ---------------------------------------------------------------------------
// three-class geometry

/// Three isotropic Gaussians at the vertices of an origin-centred triangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub radius: f64,
    pub variance: f64,
    pub per_class: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            radius: 1.5,
            variance: 0.2,
            per_class: 300,
        }
    }
}

pub fn three_class_spec(g: Geometry) -> Vec<GaussianClass> {
    (0..3)
        .map(|c| {
            let a = std::f64::consts::FRAC_PI_2 + c as f64 * 2.0 * std::f64::consts::PI / 3.0;
            data::isotropic([g.radius * a.cos(), g.radius * a.sin()], g.variance, g.per_class)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    S0,
    S1,
    S2,
    S3,
}

/// Quantile thresholds on the reference classifier's [`Margin`]s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    /// `junction` at or below this quantile: near the three-class intersection.
    pub s0_quantile: f64,
    /// `boundary` at or below this quantile (outside S0): on a pairwise boundary.
    pub s3_quantile: f64,
    /// `boundary` at or above this quantile: deep inside the class.
    pub s2_quantile: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            s0_quantile: 0.09,
            s3_quantile: 0.35,
            s2_quantile: 0.64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPartition {
    pub assignment: Vec<Subset>,
    /// Unordered top-two predicted classes of each sample.
    pub top2: Vec<(usize, usize)>,
    pub params: PartitionParams,
    /// Absolute thresholds `(s0, s3, s2)` after quantiles.
    pub thresholds: [f64; 3],
}

impl SubsetPartition {
    pub fn members(&self, s: Subset) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == s).collect()
    }

    pub fn sizes(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for s in &self.assignment {
            out[*s as usize] += 1;
        }
        out
    }
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Input-space distances of one sample under a linear reference classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    /// Distance to the boundary between the top-two classes.
    pub boundary: f64,
    /// Distance to the set where the top-three scores are equal.
    pub junction: f64,
    /// Unordered top-two classes.
    pub top2: (usize, usize),
}

/// Per-row [`Margin`]s of a single-layer model with at least three classes.
pub fn margins(model: &MlpModel, x: &Tensor2) -> Result<Vec<Margin>> {
    let [w] = model.layers() else {
        return Err(Error::Partition("margins need a single-layer reference classifier".into()));
    };
    let k = model.n_classes();
    if k < 3 {
        return Err(Error::Partition("margins need at least three classes".into()));
    }
    let d = w.rows() - 1;
    let diff_dot = |a: (usize, usize), b: (usize, usize)| -> f64 {
        (0..d).map(|r| (w.get(r, a.0) - w.get(r, a.1)) * (w.get(r, b.0) - w.get(r, b.1))).sum()
    };
    let trace = nn::forward(model, x)?;
    trace
        .logits
        .iter_rows()
        .map(|z| {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
            let (t, s, u) = (idx[0], idx[1], idx[2]);
            let (r1, r2) = (z[t] - z[s], z[t] - z[u]);
            let (g11, g22, g12) = (diff_dot((t, s), (t, s)), diff_dot((t, u), (t, u)), diff_dot((t, s), (t, u)));
            let det = g11 * g22 - g12 * g12;
            if g11 <= 0.0 || det <= 1e-12 * g11 * g22 {
                return Err(Error::Partition("reference classifier has parallel class boundaries".into()));
            }
            // min ‖δ‖ with both gaps closed: rᵀ G⁻¹ r
            let q = (g22 * r1 * r1 - 2.0 * g12 * r1 * r2 + g11 * r2 * r2) / det;
            Ok(Margin {
                boundary: r1 / g11.sqrt(),
                junction: q.max(0.0).sqrt(),
                top2: (t.min(s), t.max(s)),
            })
        })
        .collect()
}

/// Bayes-optimal linear classifier for equal-prior isotropic Gaussians that
/// share one variance.
pub fn bayes_linear(spec: &[GaussianClass]) -> Result<MlpModel> {
    let dim = spec.first().map(|c| c.mean.len()).unwrap_or(0);
    let mut flat = vec![0.0; (dim + 1) * spec.len()];
    for (c, class) in spec.iter().enumerate() {
        let var = class.cov[0][0];
        if var <= 0.0 {
            return Err(Error::Config("bayes_linear needs a positive variance".into()));
        }
        for (r, m) in class.mean.iter().enumerate() {
            flat[r * spec.len() + c] = m / var;
        }
        flat[dim * spec.len() + c] = -class.mean.iter().map(|m| m * m).sum::<f64>() / (2.0 * var);
    }
    MlpModel::from_flat(&[dim, spec.len()], Activation::Identity, &flat)
}

/// Assigns every sample to S0 (near the three-class intersection), S3 (on a
/// pairwise boundary outside S0), S2 (deep inside its class) or S1 (between
/// S3 and S2).
pub fn build_partition(reference: &MlpModel, x: &Tensor2, params: PartitionParams) -> Result<SubsetPartition> {
    if reference.n_classes() < 3 {
        return Err(Error::Partition("partition needs a classifier with at least three classes".into()));
    }
    if x.rows() < 4 {
        return Err(Error::Partition("partition needs at least four samples".into()));
    }
    let m = margins(reference, x)?;
    let boundary: Vec<f64> = m.iter().map(|v| v.boundary).collect();
    let junction: Vec<f64> = m.iter().map(|v| v.junction).collect();
    let th = [
        quantile(&junction, params.s0_quantile),
        quantile(&boundary, params.s3_quantile),
        quantile(&boundary, params.s2_quantile),
    ];
    let assignment: Vec<Subset> = m
        .iter()
        .map(|v| (v.boundary, v.junction))
        .map(|(a, b)| {
            if b <= th[0] {
                Subset::S0
            } else if a <= th[1] {
                Subset::S3
            } else if a >= th[2] {
                Subset::S2
            } else {
                Subset::S1
            }
        })
        .collect();
    let part = SubsetPartition {
        assignment,
        top2: m.iter().map(|v| v.top2).collect(),
        params,
        thresholds: th,
    };
    if let Some(i) = part.sizes().iter().position(|&n| n == 0) {
        return Err(Error::Partition(format!("subset S{i} is empty under {params:?}")));
    }
    Ok(part)
}

/// Full-batch gradient descent on cross-entropy.
pub fn fit_full_batch(model: &mut MlpModel, x: &Tensor2, labels: &[usize], lr: f64, epochs: usize) -> Result<()> {
    let mut ce = Objective::new(LossSpec::cross_entropy(), 0);
    for _ in 0..epochs {
        let trace = nn::forward(model, x)?;
        let b = nn::backward(model, &trace, labels, &mut ce, false)?;
        nn::sgd_step(model, &b.grad, lr, 0.0)?;
    }
    Ok(())
}

/// Mini-batch SGD epochs on cross-entropy.
pub fn fit_sgd<R: Rng + ?Sized>(
    model: &mut MlpModel,
    x: &Tensor2,
    labels: &[usize],
    lr: f64,
    epochs: usize,
    batch: usize,
    rng: &mut R,
) -> Result<()> {
    let mut ce = Objective::new(LossSpec::cross_entropy(), 0);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch.max(1)) {
            let bx = x.select_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = nn::forward(model, &bx)?;
            let b = nn::backward(model, &trace, &by, &mut ce, false)?;
            nn::sgd_step(model, &b.grad, lr, 0.0)?;
        }
    }
    Ok(())
}

/// Pair sets of the subset study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSet {
    /// Both samples in S0.
    S0,
    /// One sample in S0, the other in S1.
    S0S1,
    /// Both in S3.
    S3,
    /// Both in S1 ∪ S2.
    S1S2,
}

impl PairSet {
    pub const ALL: [PairSet; 4] = [PairSet::S0, PairSet::S0S1, PairSet::S3, PairSet::S1S2];

    pub fn label(self) -> &'static str {
        match self {
            PairSet::S0 => "S0",
            PairSet::S0S1 => "S0+S1",
            PairSet::S3 => "S3",
            PairSet::S1S2 => "S1uS2",
        }
    }
}

/// Index pairs of `set` with the requested label relation, capped at
/// `max_pairs` by uniform subsampling.
pub fn pairs_for<R: Rng + ?Sized>(
    part: &SubsetPartition,
    labels: &[usize],
    set: PairSet,
    positive: bool,
    max_pairs: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let keep = |i: usize, j: usize| (labels[i] == labels[j]) == positive;
    let mut out = Vec::new();
    let within = |members: &[usize], out: &mut Vec<(usize, usize)>| {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if keep(i, j) {
                    out.push((i, j));
                }
            }
        }
    };
    match set {
        PairSet::S0 => within(&part.members(Subset::S0), &mut out),
        PairSet::S3 => {
            // both samples straddle the same pairwise boundary
            within(&part.members(Subset::S3), &mut out);
            out.retain(|&(i, j)| part.top2[i] == part.top2[j]);
        }
        PairSet::S1S2 => {
            let mut m = part.members(Subset::S1);
            m.extend(part.members(Subset::S2));
            m.sort_unstable();
            within(&m, &mut out);
        }
        PairSet::S0S1 => {
            for &i in &part.members(Subset::S0) {
                for &j in &part.members(Subset::S1) {
                    if keep(i, j) {
                        out.push((i.min(j), i.max(j)));
                    }
                }
            }
        }
    }
    if out.len() > max_pairs {
        let idx = index::sample(rng, out.len(), max_pairs).into_vec();
        let mut picked: Vec<(usize, usize)> = idx.into_iter().map(|k| out[k]).collect();
        picked.sort_unstable();
        return picked;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub set: PairSet,
    pub negative: Theorem1Report,
    pub positive: Theorem2Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRows {
    pub model: String,
    pub accuracy: f64,
    pub rows: Vec<SubsetRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub seed: u64,
    pub partition_sizes: [usize; 4],
    pub models: Vec<ModelRows>,
}

pub const MAX_PAIRS_PER_SET: usize = 20_000;

/// Linear model and two 2×16 MLPs on the three-class dataset, evaluated on
/// every pair set of the margin partition of the linear model.
/// Full-batch schedule of the linear model; long enough that its predictions
/// are sharp near the three-class intersection.
pub const LINEAR_LR: f64 = 5.0;
pub const LINEAR_EPOCHS: usize = 5000;

pub fn table2(seed: u64, geometry: Geometry, params: PartitionParams) -> Result<Table2Report> {
    let spec = three_class_spec(geometry);
    let ds = data::gen_gaussian(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut linear = MlpModel::zeros(&[2, 3], Activation::Identity)?;
    fit_full_batch(&mut linear, &ds.features, &ds.labels, LINEAR_LR, LINEAR_EPOCHS)?;
    let part = build_partition(&linear, &ds.features, params)?;

    let mut models = vec![("linear".to_string(), linear)];
    for (name, act) in [("mlp_relu", Activation::Relu), ("mlp_tanh", Activation::Tanh)] {
        let mut m = MlpModel::new(&[2, 16, 16, 3], act, &mut rng)?;
        fit_sgd(&mut m, &ds.features, &ds.labels, 0.05, 100, 20, &mut rng)?;
        models.push((name.to_string(), m));
    }
    let mut out = Vec::new();
    for (name, model) in &models {
        let mut rows = Vec::new();
        for set in PairSet::ALL {
            let neg = pairs_for(&part, &ds.labels, set, false, MAX_PAIRS_PER_SET, &mut rng);
            let pos = pairs_for(&part, &ds.labels, set, true, MAX_PAIRS_PER_SET, &mut rng);
            let dn = diagnostics_for_pairs(model, &ds.features, &ds.labels, &neg)?;
            let dp = diagnostics_for_pairs(model, &ds.features, &ds.labels, &pos)?;
            rows.push(SubsetRow {
                set,
                negative: verify_theorem1(&dn),
                positive: verify_theorem2(&dp),
            });
        }
        out.push(ModelRows {
            model: name.clone(),
            accuracy: nn::accuracy(model, &ds.features, &ds.labels)?,
            rows,
        });
    }
    Ok(Table2Report {
        seed,
        partition_sizes: part.sizes(),
        models: out,
    })
}

// ---------------------------------------------------------------------------
// two-task demo

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    GssIqp,
    Random,
}

/// Task 1 separates classes 0 and 1 along x; task 2 adds class 2 above the
/// outer half of class 1, separable from it only along y.
pub fn two_task_spec(count: usize) -> Vec<GaussianClass> {
    vec![
        data::isotropic([-2.0, 0.0], 1.0, count),
        data::isotropic([2.0, 0.0], 1.0, count),
        data::isotropic([3.0, 3.0], 1.0, count),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOutcome {
    pub policy: MemoryPolicy,
    pub seed: u64,
    pub memory: Vec<usize>,
    /// Fraction of memory points whose distance to the task-1 boundary is
    /// below the median over task-1 training points.
    pub band_fraction: f64,
    pub task1_acc_before: f64,
    pub task1_acc_after: f64,
    pub task2_acc_after: f64,
    pub grid_task1: Vec<Vec<usize>>,
    pub grid_task2: Vec<Vec<usize>>,
}

pub const DEMO_COUNT: usize = 200;
pub const DEMO_EPOCHS: usize = 30;
pub const GRID_SIZE: usize = 41;

fn class_rows(ds: &Dataset, classes: &[usize]) -> Vec<usize> {
    (0..ds.len()).filter(|&i| classes.contains(&ds.labels[i])).collect()
}

/// Distance of each row to the line where logits 0 and 1 tie.
pub fn boundary_distance(model: &MlpModel, x: &Tensor2) -> Vec<f64> {
    let w = &model.layers()[0];
    let d = w.rows() - 1;
    let dw: Vec<f64> = (0..d).map(|k| w.get(k, 0) - w.get(k, 1)).collect();
    let db = w.get(d, 0) - w.get(d, 1);
    let nrm = dot(&dw, &dw).sqrt().max(f64::MIN_POSITIVE);
    x.iter_rows().map(|r| (dot(r, &dw) + db).abs() / nrm).collect()
}

fn grid(model: &MlpModel) -> Result<Vec<Vec<usize>>> {
    let (lo, hi) = (-6.0, 6.0);
    let step = (hi - lo) / (GRID_SIZE - 1) as f64;
    let mut rows = Vec::with_capacity(GRID_SIZE);
    for r in 0..GRID_SIZE {
        let y = hi - r as f64 * step;
        let pts: Vec<[f64; 2]> = (0..GRID_SIZE).map(|c| [lo + c as f64 * step, y]).collect();
        let x = Tensor2::from_rows(&pts)?;
        rows.push(nn::forward(model, &x)?.predictions());
    }
    Ok(rows)
}

/// Logistic regression on task 1, memory of `fraction` of task 1 chosen by
/// `policy`, then training on task 2 plus memory.
pub fn two_task_2d_demo(policy: MemoryPolicy, seed: u64, fraction: f64) -> Result<DemoOutcome> {
    let spec = two_task_spec(DEMO_COUNT);
    let train = data::gen_gaussian(&spec, seed)?;
    let test = data::gen_gaussian(&spec, seed.wrapping_add(1_000_003))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d2d);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d2d);
    pick_rng.set_stream(1);
    let t1 = class_rows(&train, &[0, 1]);
    let t2 = class_rows(&train, &[2]);
    let t1_test = class_rows(&test, &[0, 1]);
    let t2_test = class_rows(&test, &[2]);
    let x1 = train.features.select_rows(&t1);
    let y1: Vec<usize> = t1.iter().map(|&i| train.labels[i]).collect();

    let mut model = MlpModel::zeros(&[2, 3], Activation::Identity)?;
    fit_sgd(&mut model, &x1, &y1, 0.05, DEMO_EPOCHS, 10, &mut rng)?;
    let acc_on = |m: &MlpModel, rows: &[usize]| {
        let x = test.features.select_rows(rows);
        let y: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
        nn::accuracy(m, &x, &y)
    };
    let task1_acc_before = acc_on(&model, &t1_test)?;
    let grid_task1 = grid(&model)?;

    let k = (fraction * t1.len() as f64).ceil() as usize;
    let mut local: Vec<usize> = match policy {
        MemoryPolicy::GssIqp => {
            let IqpSelection { indices, .. } = baselines::gss_iqp_select(&model, &x1, &y1, fraction, &mut pick_rng)?;
            indices
        }
        MemoryPolicy::Random => index::sample(&mut pick_rng, t1.len(), k.min(t1.len())).into_vec(),
    };
    local.sort_unstable();
    let dist = boundary_distance(&model, &x1);
    let median = quantile(&dist, 0.5);
    let in_band = local.iter().filter(|&&i| dist[i] < median).count();
    let band_fraction = if local.is_empty() {
        0.0
    } else {
        in_band as f64 / local.len() as f64
    };

    let mut rows2: Vec<usize> = t2.clone();
    rows2.extend(local.iter().map(|&i| t1[i]));
    let x2 = train.features.select_rows(&rows2);
    let y2: Vec<usize> = rows2.iter().map(|&i| train.labels[i]).collect();
    fit_sgd(&mut model, &x2, &y2, 0.05, DEMO_EPOCHS, 10, &mut rng)?;
    Ok(DemoOutcome {
        policy,
        seed,
        memory: local.iter().map(|&i| t1[i]).collect(),
        band_fraction,
        task1_acc_before,
        task1_acc_after: acc_on(&model, &t1_test)?,
        task2_acc_after: acc_on(&model, &t2_test)?,
        grid_task1,
        grid_task2: grid(&model)?,
    })
}

/// Plain-text matrix of predicted classes, one grid row per line.
pub fn grid_to_text(grid: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_two_classes() {
        let model = MlpModel::zeros(&[2, 2], Activation::Identity).unwrap();
        let x = Tensor2::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let d = pair_diagnostics(&model, &x, &[0, 1], 0, 1).unwrap();
        assert!((d.eps_inner + 0.5).abs() < 1e-15);
        assert!((d.g_inner + 0.5 * d.x_inner).abs() < 1e-15);
    }

    #[test]
    fn theorem1_algebra_example() {
        // logits chosen so p_n = (0.6, 0.4), p_m = (0.4, 0.6)
        let l = (0.6f64 / 0.4).ln();
        let model = MlpModel::from_flat(&[1, 2], Activation::Identity, &[l, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor2::from_rows(&[[1.0], [-1.0]]).unwrap();
        let d = pair_diagnostics(&model, &x, &[0, 1], 0, 1).unwrap();
        assert!((d.beta - 0.8).abs() < 1e-12);
        assert!((d.s_p - 0.48).abs() < 1e-12);
        assert!((d.eps_inner + 0.32).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_augmented_inputs_give_zero_gradient_inner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MlpModel::new(&[2, 3], Activation::Identity, &mut rng).unwrap();
        // (1, 0, 1)·(-1, 0, 1) = 0
        let x = Tensor2::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let d = pair_diagnostics(&model, &x, &[1, 1], 0, 1).unwrap();
        assert_eq!(d.x_inner, 0.0);
        assert!(d.g_inner.abs() < 1e-15);
    }

    #[test]
    fn partition_covers_every_sample() {
        let g = Geometry::default();
        let spec = three_class_spec(g);
        let ds = data::gen_gaussian(&spec, 1).unwrap();
        let model = bayes_linear(&spec).unwrap();
        let part = build_partition(&model, &ds.features, PartitionParams::default()).unwrap();
        assert_eq!(part.sizes().iter().sum::<usize>(), ds.len());
        let means = Tensor2::from_rows(&[[0.0, g.radius], [0.0, 0.0]]).unwrap();
        let m = margins(&model, &means).unwrap();
        // class mean is far from every boundary, the origin sits on all of them
        assert!(m[0].boundary >= part.thresholds[2]);
        assert!(m[1].junction <= part.thresholds[0]);
        // vertex to the bisector of its edge, and to the centre
        assert!((m[0].boundary - g.radius * 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((m[0].junction - g.radius).abs() < 1e-12);
    }
}
