//! Brute-force reference implementations shared by the integration tests and
//! the acceptance harness. Nothing here calls into the code under test except
//! to obtain the value being checked.

#![allow(dead_code)]

use drlab::baselines::{self, Projection};
use drlab::losses::{Auxiliary, DrlTerms, LossSpec, Objective};
use drlab::memory::{self, MemoryBuffer, Sample};
use drlab::metrics::{self, AccuracyMatrix};
use drlab::nn::{self, Activation, MlpModel, RepresentationTap};
use drlab::Tensor2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2(a).max(l2(b));
    if scale == 0.0 {
        0.0
    } else {
        l2(&diff) / scale
    }
}

// ---------------------------------------------------------------------------
// network

/// Naive forward pass over the flat layout `[(in+1) × out]` per layer, bias
/// in the last row. Returns hidden outputs and logits per sample.
pub fn forward(dims: &[usize], act: Activation, flat: &[f64], x: &[Vec<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let f = |z: f64| match act {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Tanh => z.tanh(),
        Activation::Identity => z,
    };
    let mut hidden = vec![Vec::new(); x.len()];
    let mut logits = Vec::new();
    for (s, input) in x.iter().enumerate() {
        let mut h = input.clone();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (din, dout) = (dims[l], dims[l + 1]);
            let mut out = vec![0.0; dout];
            for c in 0..dout {
                let mut z = flat[off + din * dout + c];
                for r in 0..din {
                    z += h[r] * flat[off + r * dout + c];
                }
                out[c] = z;
            }
            off += (din + 1) * dout;
            if l + 2 < dims.len() {
                out = out.into_iter().map(f).collect();
                hidden[s].push(out.clone());
            }
            h = out;
        }
        logits.push(h);
    }
    (hidden, logits)
}

pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

pub fn tap_rows(hidden: &[Vec<Vec<f64>>], logits: &[Vec<f64>], tap: RepresentationTap) -> Vec<Vec<f64>> {
    hidden
        .iter()
        .zip(logits)
        .map(|(hs, z)| {
            let mut r = Vec::new();
            if tap != RepresentationTap::Logits {
                for h in hs {
                    r.extend_from_slice(h);
                }
            }
            if tap != RepresentationTap::Hidden {
                r.extend_from_slice(z);
            }
            r
        })
        .collect()
}

// ---------------------------------------------------------------------------
// losses

pub fn drl(reps: &[Vec<f64>], labels: &[usize], alpha: f64, terms: DrlTerms) -> f64 {
    let (mut bt, mut nb, mut wi, mut nw) = (0.0, 0, 0.0, 0);
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            if labels[i] == labels[j] {
                wi += dot(&reps[i], &reps[j]);
                nw += 1;
            } else {
                bt += dot(&reps[i], &reps[j]);
                nb += 1;
            }
        }
    }
    let bt = if nb > 0 { bt / nb as f64 } else { 0.0 };
    let wi = if nw > 0 { wi / nw as f64 } else { 0.0 };
    match terms {
        DrlTerms::Both => bt + alpha * wi,
        DrlTerms::BetweenOnly => bt,
        DrlTerms::WithinOnly => alpha * wi,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn multisim(reps: &[Vec<f64>], labels: &[usize], alpha: f64, beta: f64, gamma: f64) -> f64 {
    let n = reps.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = cos(&reps[i], &reps[j]);
            if labels[i] == labels[j] {
                pos += (-alpha * (s - gamma)).exp();
            } else {
                neg += (beta * (s - gamma)).exp();
            }
        }
        total += (1.0 + pos).ln() / alpha + (1.0 + neg).ln() / beta;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Margin loss over ordered pairs without ρ switching.
pub fn margin(reps: &[Vec<f64>], labels: &[usize], gamma: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..reps.len() {
        for j in 0..reps.len() {
            if i == j {
                continue;
            }
            let diff: Vec<f64> = reps[i].iter().zip(&reps[j]).map(|(a, b)| a - b).collect();
            let d = l2(&diff);
            total += if labels[i] == labels[j] { gamma + (d - beta) } else { gamma - (d - beta) };
        }
    }
    total
}

pub fn aux(spec: &LossSpec, beta_rm: f64, reps: &[Vec<f64>], labels: &[usize]) -> f64 {
    match spec.auxiliary {
        Auxiliary::None => 0.0,
        Auxiliary::Drl => drl(reps, labels, spec.alpha, spec.drl_terms),
        Auxiliary::Multisim => multisim(reps, labels, spec.alpha_ms, spec.beta_ms, spec.gamma_ms),
        Auxiliary::RMargin => margin(reps, labels, spec.gamma_rm, beta_rm),
    }
}

pub fn composite(
    dims: &[usize],
    act: Activation,
    flat: &[f64],
    x: &[Vec<f64>],
    labels: &[usize],
    spec: &LossSpec,
    beta_rm: f64,
) -> f64 {
    let (h, z) = forward(dims, act, flat, x);
    let reps = tap_rows(&h, &z, spec.tap);
    cross_entropy(&z, labels) + spec.lambda * aux(spec, beta_rm, &reps, labels)
}

/// Central difference of `f` at every coordinate of `p`.
pub fn central_diff(p: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            q[i] = p[i] + step;
            let up = f(&q);
            q[i] = p[i] - step;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub max_beta_err: f64,
}

fn random_spec(trial: usize, rng: &mut ChaCha8Rng) -> LossSpec {
    let tap = [RepresentationTap::AllLayers, RepresentationTap::Hidden, RepresentationTap::Logits][(trial / 18) % 3];
    let mut spec = LossSpec {
        tap,
        ..LossSpec::default()
    };
    match (trial / 3) % 6 {
        0 => {}
        1 => spec = LossSpec { tap, ..LossSpec::drl(rng.gen_range(0.01..1.0), rng.gen_range(0.0..3.0)) },
        2 => {
            spec = LossSpec { tap, ..LossSpec::drl(0.3, 1.5) };
            spec.drl_terms = DrlTerms::BetweenOnly;
        }
        3 => {
            spec = LossSpec { tap, ..LossSpec::drl(0.3, 1.5) };
            spec.drl_terms = DrlTerms::WithinOnly;
        }
        4 => {
            spec.auxiliary = Auxiliary::Multisim;
            spec.lambda = rng.gen_range(0.1..2.0);
            spec.beta_ms = [40.0, 5.0][trial % 2];
        }
        _ => {
            spec.auxiliary = Auxiliary::RMargin;
            spec.lambda = rng.gen_range(0.01..0.5);
            spec.p_rho = 0.0;
        }
    }
    spec
}

/// Analytic composite-loss gradients against central differences of the
/// naive forward pass on tiny networks (every width ≤ 8).
pub fn fd_check(trials: usize, seed: u64) -> FdReport {
    let mut rng = rng(seed);
    let mut report = FdReport {
        trials,
        ..FdReport::default()
    };
    for trial in 0..trials {
        let act = [Activation::Relu, Activation::Tanh, Activation::Identity][trial % 3];
        let n_hidden = rng.gen_range(1..=2);
        let mut dims = vec![rng.gen_range(1..=8)];
        for _ in 0..n_hidden {
            dims.push(rng.gen_range(2..=8));
        }
        dims.push(rng.gen_range(2..=5));
        let k = *dims.last().unwrap();
        let b = rng.gen_range(2..=8);
        let x: Vec<Vec<f64>> = (0..b).map(|_| (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k.min(3))).collect();
        // random biases keep ReLU pre-activations away from the kink at 0
        let init = MlpModel::new(&dims, act, &mut rng).unwrap().flat_params();
        let flat: Vec<f64> = init.iter().map(|w| w + rng.gen_range(-0.3..0.3)).collect();
        let model = MlpModel::from_flat(&dims, act, &flat).unwrap();
        let spec = random_spec(trial, &mut rng);

        let xt = Tensor2::from_rows(&x).unwrap();
        let trace = nn::forward(&model, &xt).unwrap();
        let mut obj = Objective::new(spec, trial as u64);
        let beta_rm = obj.margin_beta;
        let back = nn::backward(&model, &trace, &labels, &mut obj, false).unwrap();
        let fd = central_diff(&flat, 1e-5, |p| composite(&dims, act, p, &x, &labels, &spec, beta_rm));
        let e = rel_err(&back.grad.flat, &fd);
        report.max_rel_err = report.max_rel_err.max(e);
        if spec.auxiliary == Auxiliary::RMargin {
            let fb = central_diff(&[beta_rm], 1e-5, |p| composite(&dims, act, &flat, &x, &labels, &spec, p[0]))[0];
            let err = (back.objective_grad - fb).abs() / fb.abs().max(1e-12);
            report.max_beta_err = report.max_beta_err.max(err);
        }
    }
    report
}

// ---------------------------------------------------------------------------
// GSS-IQP

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn pairwise_cos_sum(v: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in subset {
        for &j in subset {
            if i != j {
                s += cos(&v[i], &v[j]);
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IqpReport {
    pub instances: usize,
    pub max_gap: f64,
    pub max_objective_err: f64,
}

/// Selected-subset objective against exhaustive enumeration; the gap is
/// `(selected − optimum) / (worst − optimum)`.
pub fn iqp_check(instances: usize, seed: u64) -> IqpReport {
    let mut rng = rng(seed);
    let mut rep = IqpReport {
        instances,
        ..IqpReport::default()
    };
    for t in 0..instances {
        let n = rng.gen_range(2..=12);
        let k = rng.gen_range(1..=n);
        let d = rng.gen_range(2..=6);
        // clustered directions make the landscape non-trivial
        let centres: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n)
            .map(|i| centres[i % 3].iter().map(|c| c + 0.4 * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let sel = baselines::iqp_select_from_gradients(&v, k, 8, &mut ChaCha8Rng::seed_from_u64(t as u64)).unwrap();
        assert_eq!(sel.indices.len(), k);
        let got = pairwise_cos_sum(&v, &sel.indices);
        rep.max_objective_err = rep.max_objective_err.max((got - sel.objective).abs());
        let all: Vec<f64> = subsets(n, k).iter().map(|s| pairwise_cos_sum(&v, s)).collect();
        let opt = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let worst = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gap = if worst - opt > 1e-12 { (got - opt) / (worst - opt) } else { 0.0 };
        rep.max_gap = rep.max_gap.max(gap);
    }
    rep
}

// ---------------------------------------------------------------------------
// A-GEM

#[derive(Debug, Clone, Copy, Default)]
pub struct AgemReport {
    pub trials: usize,
    pub projected: usize,
    /// Worst of feasibility, orthogonality and KKT residuals, relative to `‖g‖·‖r‖`.
    pub max_residual: f64,
    pub unchanged_mismatch: usize,
}

/// The projected gradient is the closest point to `g` in the half-space
/// `⟨·, r⟩ ≥ 0`; checked through feasibility, orthogonality when the
/// constraint binds, and `g − g̃ = μ·r` with `μ ≤ 0`.
pub fn agem_check(trials: usize, seed: u64) -> AgemReport {
    let mut rng = rng(seed);
    let mut rep = AgemReport {
        trials,
        ..AgemReport::default()
    };
    for t in 0..trials {
        let d = rng.gen_range(1..=50);
        let scale = 10f64.powi(rng.gen_range(-3..=3));
        let r: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mut g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if t % 10 == 0 {
            // exactly orthogonal in exact arithmetic
            let c = dot(&g, &r) / dot(&r, &r);
            g.iter_mut().zip(&r).for_each(|(a, b)| *a -= c * b);
        }
        let (p, kind) = baselines::agem_project(&g, &r);
        let unit = l2(&g) * l2(&r);
        let gr = dot(&g, &r);
        if gr >= 0.0 {
            if kind != Projection::Unchanged || p != g {
                rep.unchanged_mismatch += 1;
            }
            continue;
        }
        rep.projected += 1;
        if kind != Projection::Projected {
            rep.unchanged_mismatch += 1;
        }
        let pr = dot(&p, &r);
        let feas = (-pr).max(0.0) / unit;
        let orth = pr.abs() / unit;
        let delta: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a - b).collect();
        let mu = dot(&delta, &r) / dot(&r, &r);
        let resid: Vec<f64> = delta.iter().zip(&r).map(|(dl, rr)| dl - mu * rr).collect();
        let kkt = l2(&resid) / l2(&g) + (mu * dot(&r, &r)).max(0.0) / unit;
        rep.max_residual = rep.max_residual.max(feas).max(orth).max(kkt);
    }
    rep
}

// ---------------------------------------------------------------------------
// memory buffer

#[derive(Debug, Clone, Default)]
pub struct BufferReport {
    pub streams: usize,
    pub updates: usize,
    pub batches: usize,
    pub violations: Vec<String>,
}

fn sample(key: usize, source: usize) -> Sample {
    Sample {
        x: vec![source as f64, key as f64],
        label: key,
        key,
        source,
    }
}

/// Random streams through the ring buffer, checking budget, per-key recency
/// and balance after every update, and BER/ER batch composition on the
/// resulting buffers.
pub fn buffer_check(streams: usize, seed: u64) -> BufferReport {
    let mut rng = rng(seed);
    let mut rep = BufferReport {
        streams,
        ..BufferReport::default()
    };
    let fail = |rep: &mut BufferReport, s: usize, msg: String| {
        if rep.violations.len() < 20 {
            rep.violations.push(format!("stream {s}: {msg}"));
        }
    };
    for s in 0..streams {
        let cap = rng.gen_range(1..=60);
        let n_keys = rng.gen_range(1..=10);
        let per_task = rng.gen_range(1..=3);
        let mut buf = MemoryBuffer::new(cap);
        let mut arrived: Vec<Vec<usize>> = vec![Vec::new(); n_keys];
        let mut ever_evicted = vec![false; n_keys];
        let mut total = 0;
        let mut source = 0;
        let mut keys: Vec<usize> = (0..n_keys).collect();
        keys.shuffle(&mut rng);
        for task in keys.chunks(per_task) {
            let steps = rng.gen_range(1..=15);
            for _ in 0..steps {
                let bsz = rng.gen_range(1..=12);
                let batch: Vec<Sample> = (0..bsz)
                    .map(|_| {
                        let k = *task.choose(&mut rng).unwrap();
                        source += 1;
                        arrived[k].push(source);
                        sample(k, source)
                    })
                    .collect();
                total += bsz;
                buf.update(batch).unwrap();
                rep.updates += 1;

                if buf.len() != cap.min(total) {
                    fail(&mut rep, s, format!("len {} != min({cap}, {total})", buf.len()));
                }
                let counts: Vec<usize> = (0..n_keys).map(|k| buf.count(k)).collect();
                let max = *counts.iter().max().unwrap();
                for k in 0..n_keys {
                    let held: Vec<usize> = buf.queue(k).map(|q| q.iter().map(|x| x.source).collect()).unwrap_or_default();
                    let a = &arrived[k];
                    if held[..] != a[a.len() - held.len()..] {
                        fail(&mut rep, s, format!("key {k} does not hold its most recent arrivals"));
                    }
                    if held.len() < a.len() {
                        ever_evicted[k] = true;
                    }
                    if ever_evicted[k] && counts[k] + 1 < max {
                        fail(&mut rep, s, format!("evicted key {k} holds {} while max is {max}", counts[k]));
                    }
                }

                let b = rng.gen_range(2..=24);
                let present = buf.keys();
                let current: Vec<usize> = task.iter().copied().filter(|k| present.contains(k)).collect();
                for mp in [0, 1] {
                    let batch = memory::ber_select(&buf, task, b, mp, &mut rng).unwrap();
                    rep.batches += 1;
                    check_batch(&buf, &batch, b, &mut |m| fail(&mut rep, s, format!("BER m_p={mp}: {m}")));
                    let mut per = vec![0usize; n_keys];
                    batch.keys.iter().for_each(|&k| per[k] += 1);
                    if mp == 1 && b <= present.len() && !current.is_empty() {
                        let hit = current.iter().filter(|&&k| per[k] > 0).count();
                        if hit < current.len().min(b - 1).max(1) {
                            fail(&mut rep, s, format!("only {hit} of {} current keys in batch", current.len()));
                        }
                        if present.iter().all(|&k| buf.count(k) >= 2) && per.iter().all(|&c| c < 2) {
                            fail(&mut rep, s, "no positive pair".into());
                        }
                    } else {
                        let n_c = b / present.len();
                        for &k in &present {
                            if per[k] < n_c.min(buf.count(k)) {
                                fail(&mut rep, s, format!("key {k} got {} < quota {n_c}", per[k]));
                            }
                        }
                    }
                }
                let er = memory::er_select(&buf, task, b, &mut rng).unwrap();
                rep.batches += 1;
                check_batch(&buf, &er, b, &mut |m| fail(&mut rep, s, format!("ER: {m}")));
                let n_cur = er.keys.iter().filter(|k| task.contains(k)).count();
                let cur_avail: usize = task.iter().map(|&k| buf.count(k)).sum();
                let prev_avail = buf.len() - cur_avail;
                let want = if prev_avail == 0 { b } else { b.div_ceil(2) };
                let expect_cur = want.min(cur_avail).max(b.saturating_sub(prev_avail)).min(cur_avail);
                if n_cur != expect_cur {
                    fail(&mut rep, s, format!("ER current share {n_cur} != {expect_cur}"));
                }
            }
        }
    }
    rep
}

fn check_batch(buf: &MemoryBuffer, batch: &memory::TrainBatch, b: usize, fail: &mut dyn FnMut(String)) {
    if batch.len() != b.min(buf.len()) {
        fail(format!("size {} != min({b}, {})", batch.len(), buf.len()));
    }
    let mut slots = batch.slots.clone();
    slots.sort_unstable();
    slots.dedup();
    if slots.len() != batch.slots.len() {
        fail("duplicate slot".into());
    }
    for (i, &(k, o)) in batch.slots.iter().enumerate() {
        if o >= buf.count(k) || batch.keys[i] != k || batch.labels[i] != buf.get((k, o)).label {
            fail(format!("slot ({k},{o}) inconsistent"));
        }
    }
}

// ---------------------------------------------------------------------------
// metrics

pub fn random_matrix(t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..t)
        .map(|r| (0..=r).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

/// Literal transcriptions with 1-based task indices.
pub fn oracle_accuracy(a: &[Vec<f64>], t: usize) -> f64 {
    let mut s = 0.0;
    for i in 1..=t {
        s += a[t - 1][i - 1];
    }
    s / t as f64
}

pub fn oracle_forgetting(a: &[Vec<f64>], t: usize) -> f64 {
    if t == 1 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 1..t {
        let mut best = f64::NEG_INFINITY;
        for j in i..t {
            best = best.max(a[j - 1][i - 1] - a[t - 1][i - 1]);
        }
        s += best;
    }
    s / (t - 1) as f64
}

pub fn oracle_intransigence(ms: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let t = ms[0].len();
    ms.iter()
        .map(|m| {
            let mut s = 0.0;
            for i in 0..t {
                let best = ms.iter().map(|o| o[i][i]).fold(f64::NEG_INFINITY, f64::max);
                s += best - m[i][i];
            }
            s / t as f64
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn oracle_rho(reps: &[Vec<f64>]) -> f64 {
    let d = reps[0].len();
    let gram: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| reps.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let mut s: Vec<f64> = jacobi_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.truncate(reps.len().min(d));
    let total: f64 = s.iter().sum();
    let u = 1.0 / s.len() as f64;
    s.iter().map(|v| u * (u / (v / total + metrics::RHO_EPS)).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MetricReport {
    pub cases: usize,
    pub max_err: f64,
    pub max_rho_err: f64,
}

pub fn metric_check(cases: usize, seed: u64) -> MetricReport {
    let mut rng = rng(seed);
    let mut rep = MetricReport {
        cases,
        ..MetricReport::default()
    };
    let mut rho_err: f64 = 0.0;
    let mut bump = |e: f64| rep.max_err = rep.max_err.max(e);
    for _ in 0..cases {
        let t = rng.gen_range(1..=10);
        let ms: Vec<Vec<Vec<f64>>> = (0..rng.gen_range(1..=4)).map(|_| random_matrix(t, &mut rng)).collect();
        let am: Vec<AccuracyMatrix> = ms.iter().map(|m| AccuracyMatrix::from_rows(m.clone()).unwrap()).collect();
        for (m, a) in ms.iter().zip(&am) {
            for tt in 1..=t {
                bump((metrics::avg_accuracy(a, tt).unwrap() - oracle_accuracy(m, tt)).abs());
                bump((metrics::avg_forgetting(a, tt).unwrap() - oracle_forgetting(m, tt)).abs());
            }
        }
        let refs: Vec<&AccuracyMatrix> = am.iter().collect();
        let got = metrics::avg_intransigence(&refs).unwrap();
        for (g, o) in got.iter().zip(oracle_intransigence(&ms)) {
            bump((g - o).abs());
        }

        let rows = rng.gen_range(2..=12);
        let cols = rng.gen_range(1..=8);
        let reps: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let got = metrics::rho_spectrum(&Tensor2::from_rows(&reps).unwrap()).unwrap().rho;
        let want = oracle_rho(&reps);
        rho_err = rho_err.max((got - want).abs() / want.max(1e-3));
    }
    rep.max_rho_err = rho_err;
    rep
}

// ---------------------------------------------------------------------------
// IDX fixtures

pub fn idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, n as u32, rows as u32, cols as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

/// Writes a ten-class 4×4 dataset under `<root>/<dir>/` in the standard
/// four-file layout. Each class lights a distinct pixel pattern plus noise.
pub fn write_fixture(root: &std::path::Path, dir: &str, train_per_class: usize, test_per_class: usize, seed: u64) {
    let d = root.join(dir);
    std::fs::create_dir_all(&d).unwrap();
    let mut rng = rng(seed);
    let mut split = |per: usize| {
        let mut px = Vec::new();
        let mut lb = Vec::new();
        for i in 0..per * 10 {
            let c = (i % 10) as u8;
            for k in 0..16u8 {
                let on = (k + c) % 10 < 3 || k == c;
                let base: u8 = if on { 200 } else { 20 };
                px.push(base.saturating_add(rng.gen_range(0..40)));
            }
            lb.push(c);
        }
        (idx_images(per * 10, 4, 4, &px), idx_labels(&lb))
    };
    let (tri, trl) = split(train_per_class);
    let (tei, tel) = split(test_per_class);
    std::fs::write(d.join("train-images-idx3-ubyte"), tri).unwrap();
    std::fs::write(d.join("train-labels-idx1-ubyte"), trl).unwrap();
    std::fs::write(d.join("t10k-images-idx3-ubyte"), tei).unwrap();
    std::fs::write(d.join("t10k-labels-idx1-ubyte"), tel).unwrap();
}
