//! Dataset ingestion and task-sequence construction.
//!
//! IDX files (the MNIST distribution format) are parsed strictly: magic,
//! dimensions, exact payload length. Task sequences keep the large test split
//! shared behind an [`Arc`] and materialise rows (and permutations) lazily.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, MlpModel};
use crate::tensor::Tensor2;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "DRLAB_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, features: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Ingest(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            name: name.into(),
            split,
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "truncated header".into(),
        })
}

/// Raw IDX image payload: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_all(path)?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(fmt(format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(fmt(format!("truncated: {} bytes, expected {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(fmt(format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(fmt(format!("truncated: {} bytes, expected {expected}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(bytes[8..].to_vec())
}

/// Parses an image/label IDX pair with pixels scaled to `[0, 1]`.
///
/// The result is not standardised; use [`Standardizer`] with statistics from
/// the training split.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Ingest(format!(
            "{} images in {} but {} labels in {}",
            n,
            images_path.display(),
            labels.len(),
            labels_path.display()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor2::new(n, rows * cols, data)?;
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, split, features, labels.into_iter().map(usize::from).collect())
}

/// Per-feature z-scoring. Features that are constant on the fitting data keep
/// unit scale and are only centred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn fit(features: &Tensor2) -> Self {
        let d = features.cols();
        let n = features.rows().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| {
            let sd = (s / n).sqrt();
            if sd < Self::STD_FLOOR { 1.0 } else { sd }
        }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &mut Tensor2) -> Result<()> {
        if features.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                features.cols()
            )));
        }
        let d = features.cols();
        for r in 0..features.rows() {
            let row = features.row_mut(r);
            for k in 0..d {
                row[k] = (row[k] - self.mean[k]) / self.std[k];
            }
        }
        Ok(())
    }
}

/// Train/test pair standardised with training statistics.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

/// Input scaling applied when a train/test pair is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Keep features as loaded (pixels in `[0, 1]`).
    #[default]
    Unit,
    /// Per-feature z-scoring with training statistics.
    Standardize,
}

impl DatasetPair {
    pub fn new(train: Dataset, test: Dataset, preprocess: Preprocess) -> Result<Self> {
        match preprocess {
            Preprocess::Standardize => Self::standardized(train, test),
            Preprocess::Unit => {
                let (mut train, mut test) = (train, test);
                if train.dim() != test.dim() {
                    return Err(Error::Shape(format!(
                        "train has {} features, test has {}",
                        train.dim(),
                        test.dim()
                    )));
                }
                let k = train.n_classes.max(test.n_classes);
                train.n_classes = k;
                test.n_classes = k;
                Ok(Self {
                    train: Arc::new(train),
                    test: Arc::new(test),
                })
            }
        }
    }

    pub fn standardized(mut train: Dataset, mut test: Dataset) -> Result<Self> {
        let st = Standardizer::fit(&train.features);
        st.apply(&mut train.features)?;
        st.apply(&mut test.features)?;
        let k = train.n_classes.max(test.n_classes);
        train.n_classes = k;
        test.n_classes = k;
        Ok(Self {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// Image datasets in the standard four-file IDX layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdxSource {
    Mnist,
    FashionMnist,
}

impl IdxSource {
    pub fn dir_name(self) -> &'static str {
        match self {
            IdxSource::Mnist => "mnist",
            IdxSource::FashionMnist => "fashion_mnist",
        }
    }
}

/// Resolves the dataset root: explicit argument, then `DRLAB_DATA_DIR`, then `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads `<root>/<source>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_idx_source(root: &Path, source: IdxSource, preprocess: Preprocess) -> Result<DatasetPair> {
    let dir = root.join(source.dir_name());
    let file = |s: &str| dir.join(s);
    let train = load_idx(
        &file("train-images-idx3-ubyte"),
        &file("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(&file("t10k-images-idx3-ubyte"), &file("t10k-labels-idx1-ubyte"), Split::Test)?;
    let mut pair = DatasetPair::new(train, test, preprocess)?;
    for ds in [&mut pair.train, &mut pair.test] {
        Arc::get_mut(ds).expect("freshly built").name = source.dir_name().to_string();
    }
    Ok(pair)
}

/// One task of a sequence.
///
/// The training stream is materialised (it is capped and small); the test
/// split is a list of indices into the shared test set plus an optional
/// feature permutation.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    /// Indices of `train` rows in the source training split.
    pub train_source_idx: Vec<usize>,
    pub test_source: Arc<Dataset>,
    pub test_idx: Vec<usize>,
    pub permutation: Option<Arc<Vec<usize>>>,
}

impl Task {
    pub fn n_test(&self) -> usize {
        self.test_idx.len()
    }

    /// Test rows `[start, end)` with the task permutation applied.
    pub fn test_chunk(&self, start: usize, end: usize) -> (Tensor2, Vec<usize>) {
        let idx = &self.test_idx[start..end];
        let mut x = self.test_source.features.select_rows(idx);
        if let Some(p) = &self.permutation {
            x = permute_features(&x, p);
        }
        (x, idx.iter().map(|&i| self.test_source.labels[i]).collect())
    }

    pub fn test_accuracy(&self, model: &MlpModel) -> Result<f64> {
        if self.test_idx.is_empty() {
            return Ok(0.0);
        }
        let chunk = 2048;
        let mut correct = 0.0;
        let mut start = 0;
        while start < self.n_test() {
            let end = (start + chunk).min(self.n_test());
            let (x, y) = self.test_chunk(start, end);
            correct += nn::accuracy(model, &x, &y)? * (end - start) as f64;
            start = end;
        }
        Ok(correct / self.n_test() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub train_cap: Option<usize>,
    pub n_classes: usize,
    pub input_dim: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn cap_indices(mut idx: Vec<usize>, cap: Option<usize>, rng: &mut ChaCha8Rng, what: &str) -> Vec<usize> {
    if let Some(cap) = cap {
        if cap > idx.len() {
            log::warn!("train cap {cap} exceeds the {} available samples for {what}; using all", idx.len());
        } else {
            idx.shuffle(rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
    }
    idx
}

/// Class-incremental tasks over consecutive class groups `(0,1), (2,3), …`.
pub fn make_split_tasks(
    pair: &DatasetPair,
    classes_per_task: usize,
    train_cap: Option<usize>,
    seed: u64,
) -> Result<TaskSequence> {
    let k = pair.train.n_classes;
    if classes_per_task == 0 || k % classes_per_task != 0 {
        return Err(Error::Config(format!(
            "{k} classes cannot be split into groups of {classes_per_task}"
        )));
    }
    let groups: Vec<Vec<usize>> = (0..k).collect::<Vec<_>>().chunks(classes_per_task).map(|g| g.to_vec()).collect();
    make_class_tasks(pair, &groups, train_cap, seed)
}

/// One task per class group, in the given order.
pub fn make_class_tasks(
    pair: &DatasetPair,
    groups: &[Vec<usize>],
    train_cap: Option<usize>,
    seed: u64,
) -> Result<TaskSequence> {
    let k = pair.train.n_classes;
    let mut seen = vec![false; k];
    for &c in groups.iter().flatten() {
        if c >= k || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Config(format!("class {c} is out of range or appears in two task groups")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for (id, group) in groups.iter().enumerate() {
        let in_group = |y: usize| group.contains(&y);
        let train_idx: Vec<usize> = (0..pair.train.len()).filter(|&i| in_group(pair.train.labels[i])).collect();
        let train_idx = cap_indices(train_idx, train_cap, &mut rng, &format!("task {id}"));
        let test_idx: Vec<usize> = (0..pair.test.len()).filter(|&i| in_group(pair.test.labels[i])).collect();
        tasks.push(Task {
            id,
            classes: group.clone(),
            train: pair.train.subset(&train_idx),
            train_source_idx: train_idx,
            test_source: Arc::clone(&pair.test),
            test_idx,
            permutation: None,
        });
    }
    Ok(TaskSequence {
        tasks,
        train_cap,
        n_classes: k,
        input_dim: pair.train.dim(),
    })
}

/// Domain-incremental tasks: task 0 keeps the original feature order, later
/// tasks apply independent seeded permutations.
pub fn make_permuted_tasks(
    pair: &DatasetPair,
    n_tasks: usize,
    train_cap: Option<usize>,
    seed: u64,
) -> Result<TaskSequence> {
    let d = pair.train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n_tasks);
    for id in 0..n_tasks {
        let perm: Vec<usize> = if id == 0 {
            (0..d).collect()
        } else {
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng);
            p
        };
        let train_idx = cap_indices((0..pair.train.len()).collect(), train_cap, &mut rng, &format!("task {id}"));
        let mut train = pair.train.subset(&train_idx);
        let permutation = if id == 0 {
            None
        } else {
            train.features = permute_features(&train.features, &perm);
            Some(Arc::new(perm))
        };
        tasks.push(Task {
            id,
            classes: (0..pair.train.n_classes).collect(),
            train,
            train_source_idx: train_idx,
            test_source: Arc::clone(&pair.test),
            test_idx: (0..pair.test.len()).collect(),
            permutation,
        });
    }
    Ok(TaskSequence {
        tasks,
        train_cap,
        n_classes: pair.train.n_classes,
        input_dim: d,
    })
}

/// Column `k` of the output is column `perm[k]` of the input.
pub fn permute_features(x: &Tensor2, perm: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        for (dst, &p) in out.row_mut(r).iter_mut().zip(perm) {
            *dst = src[p];
        }
    }
    out
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// One Gaussian class component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianClass {
    pub mean: Vec<f64>,
    /// Row-major covariance, `dim × dim`.
    pub cov: Vec<Vec<f64>>,
    pub count: usize,
}

/// Lower Cholesky factor; positive semi-definite matrices with exact zero
/// pivots are accepted so that a zero covariance is allowed.
fn cholesky(cov: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = cov.len();
    if cov.iter().any(|r| r.len() != d) {
        return Err(Error::Config("covariance must be square".into()));
    }
    for i in 0..d {
        for j in 0..d {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 {
                return Err(Error::Config("covariance must be symmetric".into()));
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = cov[i][i] - s;
                if v < -1e-12 {
                    return Err(Error::Config("covariance is not positive semi-definite".into()));
                }
                l[i][i] = v.max(0.0).sqrt();
            } else if l[j][j] > 0.0 {
                l[i][j] = (cov[i][j] - s) / l[j][j];
            } else if (cov[i][j] - s).abs() > 1e-12 {
                return Err(Error::Config("covariance is not positive semi-definite".into()));
            }
        }
    }
    Ok(l)
}

/// Seeded draws from a mixture of labelled Gaussians; class `c` is `spec[c]`.
pub fn gen_gaussian(spec: &[GaussianClass], seed: u64) -> Result<Dataset> {
    let dim = spec.first().map_or(0, |c| c.mean.len());
    if spec.iter().any(|c| c.mean.len() != dim || c.cov.len() != dim) {
        return Err(Error::Config("all Gaussian classes must share one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = spec.iter().map(|c| c.count).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (class, c) in spec.iter().enumerate() {
        let l = cholesky(&c.cov)?;
        for _ in 0..c.count {
            let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..dim {
                let v: f64 = (0..=i).map(|k| l[i][k] * z[k]).sum();
                data.push(c.mean[i] + v);
            }
            labels.push(class);
        }
    }
    let mut ds = Dataset::new("gaussian", Split::Train, Tensor2::new(total, dim, data)?, labels)?;
    ds.n_classes = spec.len();
    Ok(ds)
}

pub fn isotropic(mean: [f64; 2], var: f64, count: usize) -> GaussianClass {
    GaussianClass {
        mean: mean.to_vec(),
        cov: vec![vec![var, 0.0], vec![0.0, var]],
        count,
    }
}
