//! Config-driven experiment runner: seeded runs of (benchmark × method),
//! artifacts on disk, cross-method summaries and canned scenarios.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetPair, IdxSource, Preprocess, Split, TaskSequence};
use crate::error::{Error, Result};
use crate::losses::{Auxiliary, DrlTerms, LossSpec};
use crate::memory::{ReplaySpec, Strategy};
use crate::metrics::{self, AccuracyMatrix, SimilarityStats};
use crate::nn::{self, Activation, MlpModel, RepresentationTap};
use crate::tensor::Tensor2;
use crate::theory;
use crate::train::{self, TrainMethod, TrainSettings};

pub const ARTIFACT_FORMAT: &str = "drlab-run-v1";
pub const DEFAULT_SEEDS: usize = 10;
/// Mean activation above which a hidden unit counts as active.
pub const ACTIVE_THRESHOLD: f64 = 0.5;
/// Test samples used for the ρ-spectrum of the final model.
pub const RHO_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    SplitMnist,
    PermutedMnist,
    SplitFashion,
    Gaussian2d,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::SplitMnist => "split_mnist",
            Benchmark::PermutedMnist => "permuted_mnist",
            Benchmark::SplitFashion => "split_fashion",
            Benchmark::Gaussian2d => "gaussian2d",
        }
    }

    fn permuted(self) -> bool {
        self == Benchmark::PermutedMnist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Drl,
    DrlBtOnly,
    DrlWiOnly,
    Ber,
    Er,
    Agem,
    GssGreedy,
    Multisim,
    Rmargin,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Drl => "drl",
            Method::DrlBtOnly => "drl_bt_only",
            Method::DrlWiOnly => "drl_wi_only",
            Method::Ber => "ber",
            Method::Er => "er",
            Method::Agem => "agem",
            Method::GssGreedy => "gss_greedy",
            Method::Multisim => "multisim",
            Method::Rmargin => "rmargin",
        }
    }
}

/// Hyperparameter defaults for one benchmark family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defaults {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_agem: f64,
    pub ref_batch_size: usize,
    pub alpha: f64,
    pub lambda_drl: f64,
    pub lambda_multisim: f64,
    pub lambda_rmargin: f64,
    pub lambda_bt_only: f64,
}

pub const PERMUTED_DEFAULTS: Defaults = Defaults {
    batch_size: 20,
    lr: 0.1,
    lr_agem: 0.02,
    ref_batch_size: 256,
    alpha: 2.0,
    lambda_drl: 1e-3,
    lambda_multisim: 5.0,
    lambda_rmargin: 2e-5,
    lambda_bt_only: 1e-4,
};

pub const SPLIT_DEFAULTS: Defaults = Defaults {
    batch_size: 10,
    lr: 0.02,
    lr_agem: 0.001,
    ref_batch_size: 256,
    alpha: 2.0,
    lambda_drl: 1e-2,
    lambda_multisim: 1.0,
    lambda_rmargin: 1e-3,
    lambda_bt_only: 5e-4,
};

pub fn defaults_for(benchmark: Benchmark) -> Defaults {
    if benchmark.permuted() {
        PERMUTED_DEFAULTS
    } else {
        SPLIT_DEFAULTS
    }
}

pub const GSS_BATCH: usize = 10;
pub const GSS_MEMORY_BATCH: usize = 10;
pub const GSS_N_ITER: usize = 5;
pub const GSS_COMPARISON: usize = 10;

/// Experiment file schema. Every field but `benchmark` and `method` is
/// optional and falls back to the per-benchmark defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Option<Benchmark>,
    pub method: Option<Method>,
    /// Free-form name used in file names and summaries; defaults to the method.
    pub label: Option<String>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub ref_batch_size: Option<usize>,
    pub memory_size: Option<usize>,
    /// Overrides `memory_size` with this many slots per class.
    pub memory_per_class: Option<usize>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_ms: Option<f64>,
    pub beta_ms: Option<f64>,
    pub gamma_ms: Option<f64>,
    pub gamma_rm: Option<f64>,
    pub beta_rm_init: Option<f64>,
    pub p_rho: Option<f64>,
    pub tap: Option<RepresentationTap>,
    pub min_positive_pairs: Option<usize>,
    pub stream_load_size: Option<usize>,
    pub gss_n_iter: Option<usize>,
    pub gss_comparison_size: Option<usize>,
    pub gss_memory_batch_size: Option<usize>,
    pub l1_coeff: Option<f64>,
    pub l1_tasks: Option<usize>,
    pub train_per_task: Option<usize>,
    pub n_tasks: Option<usize>,
    pub preprocess: Option<Preprocess>,
    /// Fraction of the training split held out and used in place of the test split.
    pub validation_fraction: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(benchmark: Benchmark, method: Method) -> Self {
        Self {
            benchmark: Some(benchmark),
            method: Some(method),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (0..DEFAULT_SEEDS as u64).collect())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let benchmark = self.benchmark.ok_or_else(|| Error::Config("`benchmark` is required".into()))?;
        let method = self.method.ok_or_else(|| Error::Config("`method` is required".into()))?;
        let d = defaults_for(benchmark);
        let n_classes = match benchmark {
            Benchmark::Gaussian2d => 3,
            _ => 10,
        };
        let n_tasks = self.n_tasks.unwrap_or(match benchmark {
            Benchmark::PermutedMnist => 10,
            Benchmark::Gaussian2d => 2,
            _ => 5,
        });
        if n_tasks == 0 {
            return Err(Error::Config("n_tasks must be positive".into()));
        }
        if !benchmark.permuted() && n_tasks != default_groups(benchmark).len() {
            return Err(Error::Config(format!(
                "{} has a fixed sequence of {} tasks",
                benchmark.name(),
                default_groups(benchmark).len()
            )));
        }
        let memory_size = match self.memory_per_class {
            Some(m) => m * n_classes,
            None => self.memory_size.unwrap_or(300),
        };
        if memory_size == 0 {
            return Err(Error::Config("memory size must be positive".into()));
        }

        let lambda_default = match method {
            Method::Drl | Method::DrlWiOnly => d.lambda_drl,
            Method::DrlBtOnly => d.lambda_bt_only,
            Method::Multisim => d.lambda_multisim,
            Method::Rmargin => d.lambda_rmargin,
            _ => 0.0,
        };
        let base = LossSpec::default();
        let loss = LossSpec {
            auxiliary: match method {
                Method::Drl | Method::DrlBtOnly | Method::DrlWiOnly => Auxiliary::Drl,
                Method::Multisim => Auxiliary::Multisim,
                Method::Rmargin => Auxiliary::RMargin,
                _ => Auxiliary::None,
            },
            lambda: self.lambda.unwrap_or(lambda_default),
            alpha: self.alpha.unwrap_or(d.alpha),
            drl_terms: match method {
                Method::DrlBtOnly => DrlTerms::BetweenOnly,
                Method::DrlWiOnly => DrlTerms::WithinOnly,
                _ => DrlTerms::Both,
            },
            alpha_ms: self.alpha_ms.unwrap_or(base.alpha_ms),
            beta_ms: self.beta_ms.unwrap_or(base.beta_ms),
            gamma_ms: self.gamma_ms.unwrap_or(base.gamma_ms),
            gamma_rm: self.gamma_rm.unwrap_or(base.gamma_rm),
            beta_rm_init: self.beta_rm_init.unwrap_or(base.beta_rm_init),
            p_rho: self.p_rho.unwrap_or(base.p_rho),
            tap: self.tap.unwrap_or(base.tap),
        };
        if loss.auxiliary == Auxiliary::None && self.lambda.is_some_and(|l| l != 0.0) {
            return Err(Error::Config(format!("method {} takes no auxiliary loss weight", method.name())));
        }
        loss.validate()?;

        let batch_size = self.batch_size.unwrap_or(d.batch_size);
        let train_method = match method {
            Method::Agem => TrainMethod::Agem {
                batch_size,
                ref_batch_size: self.ref_batch_size.unwrap_or(d.ref_batch_size),
            },
            Method::GssGreedy => TrainMethod::GssGreedy {
                batch_size: self.batch_size.unwrap_or(GSS_BATCH),
                memory_batch_size: self.gss_memory_batch_size.unwrap_or(GSS_MEMORY_BATCH),
                n_iter: self.gss_n_iter.unwrap_or(GSS_N_ITER),
                comparison_size: self.gss_comparison_size.unwrap_or(GSS_COMPARISON),
            },
            Method::Er => TrainMethod::Replay(ReplaySpec {
                strategy: Strategy::Er,
                batch_size,
                min_positive_pairs: self.min_positive_pairs.unwrap_or(0),
                stream_load_size: self.stream_load_size.unwrap_or(1),
            }),
            _ => TrainMethod::Replay(ReplaySpec {
                strategy: Strategy::Ber,
                batch_size,
                min_positive_pairs: self.min_positive_pairs.unwrap_or(1),
                stream_load_size: self.stream_load_size.unwrap_or(1),
            }),
        };
        if let TrainMethod::Replay(spec) = train_method {
            spec.validate()?;
        }
        let lr = self.lr.unwrap_or(if method == Method::Agem { d.lr_agem } else { d.lr });
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        let validation_fraction = self.validation_fraction.unwrap_or(0.0);
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {validation_fraction}"
            )));
        }
        let l1_coeff = self.l1_coeff.unwrap_or(0.0);
        if !(l1_coeff >= 0.0 && l1_coeff.is_finite()) {
            return Err(Error::Config(format!("l1_coeff must be non-negative, got {l1_coeff}")));
        }
        let hidden = self.hidden.clone().unwrap_or_else(|| vec![100, 100]);
        if hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }

        Ok(RunConfig {
            benchmark,
            method,
            label: self.label.clone().unwrap_or_else(|| method.name().to_string()),
            hidden,
            activation: self.activation.unwrap_or(Activation::Relu),
            lr,
            loss,
            train: train_method,
            memory_size,
            key_by_task: benchmark.permuted(),
            l1_coeff,
            l1_tasks: self.l1_tasks.unwrap_or(if l1_coeff > 0.0 { 1 } else { 0 }),
            train_per_task: self.train_per_task.unwrap_or(1000),
            n_tasks,
            preprocess: self.preprocess.unwrap_or_default(),
            validation_fraction,
        })
    }
}

/// A fully resolved run description; this is what artifacts echo and hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub benchmark: Benchmark,
    pub method: Method,
    pub label: String,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub loss: LossSpec,
    pub train: TrainMethod,
    pub memory_size: usize,
    pub key_by_task: bool,
    pub l1_coeff: f64,
    pub l1_tasks: usize,
    pub train_per_task: usize,
    pub n_tasks: usize,
    pub preprocess: Preprocess,
    pub validation_fraction: f64,
}

impl RunConfig {
    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            method: self.train,
            loss: self.loss,
            lr: self.lr,
            l1_coeff: self.l1_coeff,
            l1_tasks: self.l1_tasks,
            memory_size: self.memory_size,
            key_by_task: self.key_by_task,
            seed,
        }
    }

    /// `blob`-prefixed SHA-256 of the canonical JSON of this config and the seed.
    pub fn hash(&self, seed: u64) -> String {
        let body = serde_json::json!({ "config": self, "seed": seed });
        blob_hash(body.to_string().as_bytes())
    }
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn default_groups(benchmark: Benchmark) -> Vec<Vec<usize>> {
    match benchmark {
        Benchmark::Gaussian2d => vec![vec![0, 1], vec![2]],
        _ => (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect(),
    }
}

/// Dataset cache shared by runs; loads each source once per preprocessing mode.
pub struct DataStore {
    root: PathBuf,
    cache: Mutex<HashMap<(Option<IdxSource>, Preprocess), DatasetPair>>,
}

impl DataStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Root from `DRLAB_DATA_DIR`, falling back to `./data`.
    pub fn from_env() -> Self {
        Self::new(data::data_root(None))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn pair(&self, benchmark: Benchmark, preprocess: Preprocess) -> Result<DatasetPair> {
        let source = match benchmark {
            Benchmark::SplitMnist | Benchmark::PermutedMnist => Some(IdxSource::Mnist),
            Benchmark::SplitFashion => Some(IdxSource::FashionMnist),
            Benchmark::Gaussian2d => None,
        };
        let key = (source, preprocess);
        if let Some(p) = self.cache.lock().expect("data cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let pair = match source {
            Some(src) => data::load_idx_source(&self.root, src, preprocess)?,
            None => {
                let spec = theory::two_task_spec(1000);
                DatasetPair::new(data::gen_gaussian(&spec, 0)?, data::gen_gaussian(&spec, 1)?, preprocess)?
            }
        };
        self.cache.lock().expect("data cache poisoned").insert(key, pair.clone());
        Ok(pair)
    }
}

fn holdout(pair: &DatasetPair, fraction: f64) -> Result<DatasetPair> {
    let n = pair.train.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!("validation fraction {fraction} leaves an empty split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    let (val, train) = idx.split_at(n_val);
    let mut val = val.to_vec();
    let mut train = train.to_vec();
    val.sort_unstable();
    train.sort_unstable();
    let mut v = pair.train.subset(&val);
    v.split = Split::Test;
    Ok(DatasetPair {
        train: Arc::new(pair.train.subset(&train)),
        test: Arc::new(v),
    })
}

pub fn build_tasks(cfg: &RunConfig, store: &DataStore, seed: u64) -> Result<TaskSequence> {
    let mut pair = store.pair(cfg.benchmark, cfg.preprocess)?;
    if cfg.validation_fraction > 0.0 {
        pair = holdout(&pair, cfg.validation_fraction)?;
    }
    let cap = Some(cfg.train_per_task);
    if cfg.benchmark.permuted() {
        data::make_permuted_tasks(&pair, cfg.n_tasks, cap, seed)
    } else {
        data::make_class_tasks(&pair, &default_groups(cfg.benchmark), cap, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Average accuracy after the last completed task, in `[0, 1]`.
    pub avg_accuracy: f64,
    pub avg_forgetting: f64,
    /// Average accuracy after each task.
    pub accuracy_curve: Vec<f64>,
}

impl FinalMetrics {
    pub fn from_matrix(a: &AccuracyMatrix) -> Result<Self> {
        let t = a.n_tasks();
        if t == 0 {
            return Ok(Self {
                avg_accuracy: 0.0,
                avg_forgetting: 0.0,
                accuracy_curve: vec![],
            });
        }
        Ok(Self {
            avg_accuracy: metrics::avg_accuracy(a, t)?,
            avg_forgetting: metrics::avg_forgetting(a, t)?,
            accuracy_curve: (1..=t).map(|k| metrics::avg_accuracy(a, k)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub format: String,
    pub config: RunConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Hash over everything except wall-clock timings.
    pub content_hash: String,
    pub valid: bool,
    pub error: Option<String>,
    pub accuracy: AccuracyMatrix,
    pub task_seconds: Vec<f64>,
    pub metrics: FinalMetrics,
    pub rho: Option<f64>,
    /// Active units per hidden layer after the first task.
    pub active_dims_task1: Vec<usize>,
    pub steps: usize,
}

impl RunArtifact {
    fn seal(mut self) -> Self {
        let mut body = serde_json::to_value(&self).expect("artifact serialises");
        if let Some(o) = body.as_object_mut() {
            o.remove("task_seconds");
            o.remove("content_hash");
        }
        self.content_hash = blob_hash(body.to_string().as_bytes());
        self
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}_seed{}.json", self.config.label, self.config.benchmark.name(), self.seed)
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One finished seed together with the trained model and its tasks.
pub struct SeedRun {
    pub artifact: RunArtifact,
    pub model: MlpModel,
    pub tasks: TaskSequence,
}

pub fn run_seed(cfg: &RunConfig, seed: u64, store: &DataStore) -> Result<SeedRun> {
    let tasks = build_tasks(cfg, store, seed)?;
    let mut dims = vec![tasks.input_dim];
    dims.extend(&cfg.hidden);
    dims.push(tasks.n_classes);
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(7);
    let mut model = MlpModel::new(&dims, cfg.activation, &mut init)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seconds: Vec<f64> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut clock = Instant::now();
    let outcome = train::online_train_with(&mut model, &tasks, &cfg.settings(seed), |end| {
        rows.push(end.row.to_vec());
        seconds.push(clock.elapsed().as_secs_f64());
        if end.task == 0 {
            active = metrics::active_dims(end.model, &end.tasks.tasks[0].train.features, ACTIVE_THRESHOLD)?;
        }
        clock = Instant::now();
        Ok(())
    });
    let (accuracy, steps, error) = match outcome {
        Ok(o) => {
            seconds = o.task_seconds;
            (o.accuracy, o.steps, None)
        }
        Err(e @ Error::Divergence(_)) => {
            log::warn!("{} seed {seed}: {e}", cfg.label);
            (AccuracyMatrix::from_rows(rows)?, 0, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let rho = if error.is_none() {
        match representation_sample(&model, &tasks, RHO_SAMPLES, cfg.loss.tap).and_then(|r| metrics::rho_spectrum(&r)) {
            Ok(s) => Some(s.rho),
            Err(e) => {
                log::warn!("rho unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    let artifact = RunArtifact {
        format: ARTIFACT_FORMAT.into(),
        config: cfg.clone(),
        seed,
        config_hash: cfg.hash(seed),
        content_hash: String::new(),
        valid: error.is_none(),
        error,
        metrics: FinalMetrics::from_matrix(&accuracy)?,
        accuracy,
        task_seconds: seconds,
        rho,
        active_dims_task1: active,
        steps,
    }
    .seal();
    Ok(SeedRun { artifact, model, tasks })
}

/// Representations of up to `n` test samples spread evenly over all tasks.
pub fn representation_sample(model: &MlpModel, tasks: &TaskSequence, n: usize, tap: RepresentationTap) -> Result<Tensor2> {
    let per = n.div_ceil(tasks.len().max(1));
    let mut data = Vec::new();
    let mut rows = 0;
    for task in &tasks.tasks {
        let (x, _) = task.test_chunk(0, per.min(task.n_test()));
        let r = nn::forward(model, &x)?.representation(tap)?;
        rows += r.rows();
        data.extend_from_slice(r.data());
    }
    let cols = model.representation_width(tap)?;
    Tensor2::new(rows, cols, data)
}

/// Gradient/representation similarities on `per_class` test samples of
/// every class seen by the sequence.
pub fn probe_similarities(
    model: &MlpModel,
    tasks: &TaskSequence,
    per_class: usize,
    tap: RepresentationTap,
) -> Result<SimilarityStats> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for task in &tasks.tasks {
        let (x, y) = task.test_chunk(0, task.n_test());
        for &c in &task.classes {
            for (i, _) in y.iter().enumerate().filter(|(_, &l)| l == c).take(per_class) {
                rows.push(x.row(i).to_vec());
                labels.push(c);
            }
        }
    }
    let x = Tensor2::from_rows(&rows)?;
    metrics::similarity_stats(model, &x, &labels, tap)
}

fn pool(n: usize) -> Result<rayon::ThreadPool> {
    let workers = n.clamp(1, std::thread::available_parallelism().map_or(1, |p| p.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs every seed of `config`, writing artifacts when an output directory is set.
pub fn run(config: &ExperimentConfig, store: &DataStore) -> Result<Vec<RunArtifact>> {
    let cfg = config.resolve()?;
    let seeds = config.seeds();
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let artifacts: Vec<RunArtifact> = pool(seeds.len())?.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let a = run_seed(&cfg, s, store)?.artifact;
                if let Some(dir) = &config.output_dir {
                    a.write_to(dir)?;
                }
                log::info!(
                    "{} {} seed {s}: acc {:.2} forgetting {:.2}",
                    cfg.label,
                    cfg.benchmark.name(),
                    100.0 * a.metrics.avg_accuracy,
                    100.0 * a.metrics.avg_forgetting
                );
                Ok(a)
            })
            .collect::<Result<_>>()
    })?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// summaries

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Self {
        Self {
            mean: metrics::mean(v),
            std: metrics::std_dev(v),
        }
    }
}

/// One row of a summary table; accuracies in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: Method,
    pub n_runs: usize,
    pub n_invalid: usize,
    pub accuracy: Stat,
    pub forgetting: Stat,
    pub intransigence: Option<f64>,
    pub rho: Option<Stat>,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_forgetting: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub benchmark: Benchmark,
    pub methods: Vec<MethodSummary>,
    pub notice: Option<String>,
}

impl Summary {
    pub fn get(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "benchmark,label,method,n_runs,n_invalid,acc_mean,acc_std,forgetting_mean,forgetting_std,intransigence,rho_mean,rho_std\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{},{},{}",
                self.benchmark.name(),
                m.label,
                m.method.name(),
                m.n_runs,
                m.n_invalid,
                m.accuracy.mean,
                m.accuracy.std,
                m.forgetting.mean,
                m.forgetting.std,
                opt(m.intransigence),
                opt(m.rho.map(|r| r.mean)),
                opt(m.rho.map(|r| r.std)),
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.benchmark.name());
        let _ = writeln!(s, "{:<16} {:>5} {:>16} {:>16} {:>8}", "method", "runs", "accuracy", "forgetting", "intrans");
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<16} {:>5} {:>7.2} ± {:<6.2} {:>7.2} ± {:<6.2} {:>8}",
                m.label,
                m.n_runs,
                m.accuracy.mean,
                m.accuracy.std,
                m.forgetting.mean,
                m.forgetting.std,
                m.intransigence.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
            );
        }
        if let Some(n) = &self.notice {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn mean_matrix(ms: &[&AccuracyMatrix]) -> Result<AccuracyMatrix> {
    let t = ms[0].n_tasks();
    if ms.iter().any(|m| m.n_tasks() != t) {
        return Err(Error::Comparison("runs of one method cover different task counts".into()));
    }
    let rows = (0..t)
        .map(|r| (0..=r).map(|i| metrics::mean(&ms.iter().map(|m| m.get(r, i)).collect::<Vec<_>>())).collect())
        .collect();
    AccuracyMatrix::from_rows(rows)
}

/// Groups artifacts by label and tabulates accuracy, forgetting and (with
/// at least two methods) intransigence. Invalid runs are counted but not
/// averaged.
pub fn summarize_artifacts(artifacts: &[RunArtifact]) -> Result<Summary> {
    let Some(first) = artifacts.first() else {
        return Err(Error::Comparison("no run artifacts to summarise".into()));
    };
    let benchmark = first.config.benchmark;
    if let Some(a) = artifacts.iter().find(|a| a.config.benchmark != benchmark) {
        return Err(Error::Comparison(format!(
            "mixed benchmarks: {} and {}",
            benchmark.name(),
            a.config.benchmark.name()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&RunArtifact>> = BTreeMap::new();
    for a in artifacts {
        groups.entry(a.config.label.as_str()).or_default().push(a);
    }
    let mut methods = Vec::new();
    let mut means = Vec::new();
    for (label, runs) in &groups {
        let mut runs: Vec<&RunArtifact> = runs.clone();
        runs.sort_by_key(|a| a.seed);
        let valid: Vec<&RunArtifact> = runs.iter().copied().filter(|a| a.valid).collect();
        let acc: Vec<f64> = valid.iter().map(|a| 100.0 * a.metrics.avg_accuracy).collect();
        let fgt: Vec<f64> = valid.iter().map(|a| 100.0 * a.metrics.avg_forgetting).collect();
        let rhos: Vec<f64> = valid.iter().filter_map(|a| a.rho).collect();
        if !valid.is_empty() {
            means.push((methods.len(), mean_matrix(&valid.iter().map(|a| &a.accuracy).collect::<Vec<_>>())?));
        }
        methods.push(MethodSummary {
            label: label.to_string(),
            method: runs[0].config.method,
            n_runs: valid.len(),
            n_invalid: runs.len() - valid.len(),
            accuracy: Stat::of(&acc),
            forgetting: Stat::of(&fgt),
            intransigence: None,
            rho: (!rhos.is_empty()).then(|| Stat::of(&rhos)),
            seeds: valid.iter().map(|a| a.seed).collect(),
            per_seed_accuracy: acc,
            per_seed_forgetting: fgt,
        });
    }
    let notice = if means.len() >= 2 {
        let mats: Vec<&AccuracyMatrix> = means.iter().map(|(_, m)| m).collect();
        let values = metrics::avg_intransigence(&mats)?;
        for ((k, _), v) in means.iter().zip(values) {
            methods[*k].intransigence = Some(100.0 * v);
        }
        None
    } else {
        Some("intransigence needs at least two methods; omitted".to_string())
    };
    Ok(Summary {
        benchmark,
        methods,
        notice,
    })
}

pub fn load_artifacts(dir: &Path) -> Result<Vec<RunArtifact>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) else {
            continue;
        };
        if value.get("format").and_then(|f| f.as_str()) == Some(ARTIFACT_FORMAT) {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}

/// Summarises every artifact in `dir` and writes `summary.csv` and `summary.json` next to them.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let summary = summarize_artifacts(&load_artifacts(dir)?)?;
    write_atomic(&dir.join("summary.csv"), summary.to_csv().as_bytes())?;
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// scenarios

pub const SCENARIOS: [&str; 6] = [
    "ablation_drl",
    "replay_comparison",
    "memory_size_sweep",
    "l1_compactness",
    "theory_tables",
    "demo_2d",
];

/// L1 weight used by the compactness scenario.
pub const L1_COEFF: f64 = 0.03;

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub out: PathBuf,
    pub benchmark: Benchmark,
    pub seeds: Vec<u64>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            out: PathBuf::from("results"),
            benchmark: Benchmark::SplitMnist,
            seeds: (0..DEFAULT_SEEDS as u64).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub text: String,
    pub data: serde_json::Value,
}

/// The config matrix a run-based scenario expands to.
pub fn scenario_configs(name: &str, opts: &ScenarioOptions) -> Result<Vec<ExperimentConfig>> {
    let base = |method: Method, label: &str, dir: &Path| ExperimentConfig {
        label: Some(label.to_string()),
        seeds: Some(opts.seeds.clone()),
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentConfig::new(opts.benchmark, method)
    };
    let dir = opts.out.join(name);
    Ok(match name {
        "ablation_drl" => vec![
            base(Method::Ber, "none", &dir),
            base(Method::DrlBtOnly, "bt", &dir),
            base(Method::DrlWiOnly, "wi", &dir),
            base(Method::Drl, "both", &dir),
        ],
        "replay_comparison" => [
            Method::Drl,
            Method::Ber,
            Method::Er,
            Method::Agem,
            Method::GssGreedy,
            Method::Multisim,
            Method::Rmargin,
        ]
        .iter()
        .map(|&m| base(m, m.name(), &dir))
        .collect(),
        "memory_size_sweep" => {
            let mut v = Vec::new();
            for (sub, fixed) in [("fixed_300", true), ("per_class_50", false)] {
                for m in [Method::Drl, Method::Ber, Method::Er] {
                    let mut c = base(m, m.name(), &dir.join(sub));
                    if fixed {
                        c.memory_size = Some(300);
                    } else {
                        c.memory_per_class = Some(50);
                    }
                    v.push(c);
                }
            }
            v
        }
        "l1_compactness" => {
            let mut l1 = base(Method::Ber, "l1", &dir);
            l1.l1_coeff = Some(L1_COEFF);
            l1.l1_tasks = Some(1);
            vec![base(Method::Ber, "no_l1", &dir), l1]
        }
        "theory_tables" | "demo_2d" => vec![],
        other => return Err(Error::UnknownScenario(other.to_string())),
    })
}

pub fn scenario(name: &str, opts: &ScenarioOptions, store: &DataStore) -> Result<ScenarioReport> {
    let configs = scenario_configs(name, opts)?;
    let dir = opts.out.join(name);
    let report = match name {
        "theory_tables" => theory_tables(&opts.seeds)?,
        "demo_2d" => demo_2d(&opts.seeds)?,
        "memory_size_sweep" => {
            let mut text = String::new();
            let mut data = serde_json::Map::new();
            for sub in ["fixed_300", "per_class_50"] {
                for c in configs.iter().filter(|c| c.output_dir.as_deref() == Some(&dir.join(sub))) {
                    run(c, store)?;
                }
                let s = summarize(&dir.join(sub))?;
                let _ = write!(text, "[{sub}]\n{}", s.to_text());
                data.insert(sub.into(), serde_json::to_value(&s)?);
            }
            ScenarioReport {
                name: name.into(),
                text,
                data: data.into(),
            }
        }
        _ => {
            for c in &configs {
                run(c, store)?;
            }
            let s = summarize(&dir)?;
            let mut text = s.to_text();
            let mut data = serde_json::to_value(&s)?;
            if name == "l1_compactness" {
                let dims = active_dims_table(&load_artifacts(&dir)?);
                for (label, d) in &dims {
                    let _ = writeln!(text, "{label}: active units after task 1 = {:.1} ± {:.1}", d.mean, d.std);
                }
                data["active_dims_task1"] = serde_json::to_value(&dims)?;
            }
            ScenarioReport {
                name: name.into(),
                text,
                data,
            }
        }
    };
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.text.as_bytes())?;
    Ok(report)
}

/// Mean/std of active units in the last hidden layer after task 1, by label.
pub fn active_dims_table(artifacts: &[RunArtifact]) -> BTreeMap<String, Stat> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in artifacts.iter().filter(|a| a.valid) {
        if let Some(&d) = a.active_dims_task1.last() {
            by.entry(a.config.label.clone()).or_default().push(d as f64);
        }
    }
    by.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect()
}

fn theory_tables(seeds: &[u64]) -> Result<ScenarioReport> {
    let lemma = theory::lemma1_check(10_000, seeds.first().copied().unwrap_or(0))?;
    let tables = pool(seeds.len())?.install(|| {
        seeds
            .par_iter()
            .map(|&s| theory::table2(s, theory::Geometry::default(), theory::PartitionParams::default()))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut text = format!(
        "lemma 1: {} pairs, max relative error {:.3e}\n",
        lemma.n_pairs, lemma.max_rel_error
    );
    if let Some(t) = tables.first() {
        let _ = writeln!(text, "seed {} partition sizes {:?}", t.seed, t.partition_sizes);
        for m in &t.models {
            let _ = writeln!(text, "{} (train acc {:.3})", m.model, m.accuracy);
            for r in &m.rows {
                let _ = writeln!(
                    text,
                    "  {:?}: neg g<0 {:.3} β>s_p {:.3} x>0 {:.3} exc {} | pos g<0 {:.3} viol {}",
                    r.set,
                    r.negative.pr_g_negative,
                    r.negative.pr_beta_gt_sp,
                    r.negative.pr_x_positive,
                    r.negative.exceptions,
                    r.positive.pr_g_negative,
                    r.positive.violations
                );
            }
        }
    }
    Ok(ScenarioReport {
        name: "theory_tables".into(),
        text,
        data: serde_json::json!({ "lemma1": lemma, "table2": tables }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo2dSummary {
    pub seeds: Vec<u64>,
    pub gss_band_fraction: Vec<f64>,
    pub gss_task1_after: Vec<f64>,
    pub random_task1_after: Vec<f64>,
    pub median_band_fraction: f64,
    pub random_wins: usize,
}

pub fn demo_2d_summary(seeds: &[u64]) -> Result<(Demo2dSummary, Vec<theory::DemoOutcome>)> {
    let mut out = Vec::new();
    let mut s = Demo2dSummary {
        seeds: seeds.to_vec(),
        gss_band_fraction: vec![],
        gss_task1_after: vec![],
        random_task1_after: vec![],
        median_band_fraction: 0.0,
        random_wins: 0,
    };
    for &seed in seeds {
        let g = theory::two_task_2d_demo(theory::MemoryPolicy::GssIqp, seed, 0.1)?;
        let r = theory::two_task_2d_demo(theory::MemoryPolicy::Random, seed, 0.1)?;
        s.gss_band_fraction.push(g.band_fraction);
        s.gss_task1_after.push(g.task1_acc_after);
        s.random_task1_after.push(r.task1_acc_after);
        s.random_wins += usize::from(r.task1_acc_after > g.task1_acc_after);
        out.push(g);
        out.push(r);
    }
    let mut b = s.gss_band_fraction.clone();
    b.sort_by(f64::total_cmp);
    s.median_band_fraction = match b.len() {
        0 => 0.0,
        n if n % 2 == 1 => b[n / 2],
        n => 0.5 * (b[n / 2 - 1] + b[n / 2]),
    };
    Ok((s, out))
}

fn demo_2d(seeds: &[u64]) -> Result<ScenarioReport> {
    let (s, outcomes) = demo_2d_summary(seeds)?;
    let mut text = format!(
        "{} seeds: GSS memory in boundary band (median) {:.3}; task-1 accuracy after task 2: random {:.3} vs GSS {:.3}; random better on {}\n",
        seeds.len(),
        s.median_band_fraction,
        metrics::mean(&s.random_task1_after),
        metrics::mean(&s.gss_task1_after),
        s.random_wins
    );
    if let Some(o) = outcomes.first() {
        let _ = write!(
            text,
            "\nseed {} after task 1:\n{}\nafter task 2 (GSS memory):\n{}",
            o.seed,
            theory::grid_to_text(&o.grid_task1),
            theory::grid_to_text(&o.grid_task2)
        );
    }
    Ok(ScenarioReport {
        name: "demo_2d".into(),
        text,
        data: serde_json::json!({ "summary": s, "runs": outcomes }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"benchmark":"split_mnist","method":"drl","lamda":0.1}"#);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn defaults_follow_benchmark_and_method() {
        let c = ExperimentConfig::new(Benchmark::SplitMnist, Method::Agem).resolve().unwrap();
        assert_eq!(c.lr, 0.001);
        let c = ExperimentConfig::new(Benchmark::PermutedMnist, Method::Agem).resolve().unwrap();
        assert_eq!(c.lr, 0.02);
        assert!(c.key_by_task);
        let c = ExperimentConfig::new(Benchmark::PermutedMnist, Method::Drl).resolve().unwrap();
        assert_eq!((c.lr, c.loss.lambda, c.loss.alpha), (0.1, 1e-3, 2.0));
        assert!(matches!(c.train, TrainMethod::Replay(ReplaySpec { batch_size: 20, .. })));
        let c = ExperimentConfig::new(Benchmark::SplitFashion, Method::Multisim).resolve().unwrap();
        assert_eq!(c.loss.lambda, 1.0);
        let c = ExperimentConfig::new(Benchmark::SplitMnist, Method::DrlBtOnly).resolve().unwrap();
        assert_eq!((c.loss.lambda, c.loss.drl_terms), (5e-4, DrlTerms::BetweenOnly));
    }

    #[test]
    fn memory_per_class_overrides_size() {
        let mut c = ExperimentConfig::new(Benchmark::SplitMnist, Method::Er);
        c.memory_per_class = Some(50);
        assert_eq!(c.resolve().unwrap().memory_size, 500);
    }

    #[test]
    fn scenario_names() {
        let o = ScenarioOptions::default();
        assert_eq!(scenario_configs("ablation_drl", &o).unwrap().len(), 4);
        assert!(matches!(scenario_configs("nope", &o), Err(Error::UnknownScenario(_))));
    }
}
