//! Datasets: synthetic source/target task pairs, CSV ingestion, class-aware
//! subsampling, 4:1 splitting and feature normalization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Mat,
    labels: Vec<usize>,
    num_classes: usize,
    pub provenance: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset must contain at least one example".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(Self { features, labels, num_classes, provenance: BTreeMap::new() })
    }

    pub fn with_provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_string(), value.to_string());
        self
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Rows `idx` in the given order; provenance is carried over.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let p = self.dim();
        let mut data = Vec::with_capacity(idx.len() * p);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} out of range for {} rows", self.len())));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Dataset::new(Mat::from_vec(idx.len(), p, data)?, labels, self.num_classes)?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

fn default_rotation() -> f64 {
    0.0
}

/// Gaussian-mixture source task and a shifted/rotated target task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPairSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Distance between opposing class means, in units of the unit noise.
    pub class_sep: f64,
    /// Length of the displacement applied to every target class mean.
    pub shift: f64,
    /// Rotation angle (radians) applied to target means in the first two
    /// coordinates.
    #[serde(default = "default_rotation")]
    pub rotation: f64,
    pub n_source: usize,
    pub n_target_pool: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskPairSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 || self.dim == 0 {
            return Err(Error::Config("task needs at least 2 classes and 1 dimension".into()));
        }
        if !(self.shift >= 0.0) || !self.class_sep.is_finite() || !self.rotation.is_finite() || !self.shift.is_finite()
        {
            return Err(Error::Config("task shift must be >= 0 and all reals finite".into()));
        }
        if self.n_source < c || self.n_target_pool < c || self.n_test < c {
            return Err(Error::Config(format!("every set needs at least num_classes = {c} examples")));
        }
        Ok(())
    }

    /// Class means: the first `2·dim` classes sit at `±(class_sep/2)·e_j`;
    /// any further classes on seeded random directions of the same radius.
    pub fn source_means(&self) -> Vec<Vec<f64>> {
        let r = self.class_sep / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(7);
        (0..self.num_classes)
            .map(|c| {
                let mut m = vec![0.0; self.dim];
                if c < 2 * self.dim {
                    m[c / 2] = if c % 2 == 0 { r } else { -r };
                } else {
                    let z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    m.iter_mut().zip(&z).for_each(|(mi, zi)| *mi = r * zi / norm);
                }
                m
            })
            .collect()
    }

    /// Source means rotated in the `(0,1)` plane, then displaced by `shift`
    /// along the all-ones direction.
    pub fn target_means(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.rotation.sin_cos();
        let unit = 1.0 / (self.dim as f64).sqrt();
        self.source_means()
            .into_iter()
            .map(|mut m| {
                if self.dim >= 2 {
                    let (a, b) = (m[0], m[1]);
                    m[0] = c * a - s * b;
                    m[1] = s * a + c * b;
                }
                m.iter_mut().for_each(|v| *v += self.shift * unit);
                m
            })
            .collect()
    }
}

fn sample_mixture(means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Result<(Mat, Vec<usize>)> {
    let c = means.len();
    let p = means[0].len();
    // equal class frequencies, shuffled order
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(n * p);
    for &y in &labels {
        for m in &means[y] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(m + z);
        }
    }
    Ok((Mat::from_vec(n, p, data)?, labels))
}

/// Generates `(source, target_pool, target_test)` from independent random
/// streams; deterministic in `spec.seed`.
pub fn gen_task_pair(spec: &TaskPairSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let src = spec.source_means();
    let tgt = spec.target_means();
    let make = |means: &[Vec<f64>], n: usize, stream: u64, role: &str| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let (x, y) = sample_mixture(means, n, &mut rng)?;
        Ok(Dataset::new(x, y, spec.num_classes)?
            .with_provenance("generator", "gaussian_mixture")
            .with_provenance("role", role)
            .with_provenance("seed", spec.seed))
    };
    Ok((
        make(&src, spec.n_source, 1, "source")?,
        make(&tgt, spec.n_target_pool, 2, "target_pool")?,
        make(&tgt, spec.n_test, 3, "target_test")?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    /// Exactly `n / C` examples per class.
    #[default]
    Balanced,
    /// Per-class counts proportional to the pool's class frequencies.
    Stratified,
}

/// Splits `total` in proportion to `weights` with largest-remainder rounding;
/// ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class draw counts for a size-`n` subsample.
pub fn subsample_counts(pool: &Dataset, n: usize, mode: SubsampleMode) -> Result<Vec<usize>> {
    let c = pool.num_classes();
    let available = pool.class_counts();
    let counts = match mode {
        SubsampleMode::Balanced => {
            if n == 0 || !n.is_multiple_of(c) {
                return Err(Error::Data(format!("balanced subsample size {n} is not divisible by {c} classes")));
            }
            vec![n / c; c]
        }
        SubsampleMode::Stratified => {
            if n == 0 || n > pool.len() {
                return Err(Error::Data(format!("stratified subsample size {n} exceeds pool of {}", pool.len())));
            }
            let w: Vec<f64> = available.iter().map(|&a| a as f64).collect();
            largest_remainder(&w, n)
        }
    };
    for (class, (&want, &have)) in counts.iter().zip(&available).enumerate() {
        if want > have {
            return Err(Error::Data(format!("class {class} has {have} examples in the pool, {want} requested")));
        }
    }
    Ok(counts)
}

/// Pool indices for a class-aware subsample, without replacement, ascending.
pub fn subsample_indices(pool: &Dataset, n: usize, seed: u64, mode: SubsampleMode) -> Result<Vec<usize>> {
    let counts = subsample_counts(pool, n, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(n);
    for (mut members, &take) in pool.class_indices().into_iter().zip(&counts) {
        members.shuffle(&mut rng);
        idx.extend_from_slice(&members[..take]);
    }
    idx.sort_unstable();
    Ok(idx)
}

pub fn balanced_subsample(pool: &Dataset, n: usize, seed: u64, mode: SubsampleMode) -> Result<Dataset> {
    let idx = subsample_indices(pool, n, seed, mode)?;
    Ok(pool.subset(&idx)?.with_provenance("subsample_seed", seed).with_provenance("subsample_n", n))
}

/// `reps` draws with seeds `base_seed + r`.
pub fn replicate_sets(
    pool: &Dataset,
    n: usize,
    reps: usize,
    base_seed: u64,
    mode: SubsampleMode,
) -> Result<Vec<Dataset>> {
    (0..reps)
        .map(|r| {
            Ok(balanced_subsample(pool, n, base_seed.wrapping_add(r as u64), mode)?.with_provenance("replicate", r))
        })
        .collect()
}

/// Train/validation index sets for a stratified 4:1 split.
///
/// The validation set holds `max(1, ⌊n/5⌋)` examples. Each class first
/// contributes `⌊n_c/5⌋`; the remaining slots go to classes in a seeded
/// order, so when classes are tiny some of them end up absent from training.
pub fn split_indices(dataset: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} example(s) into train and validation")));
    }
    let n_val = (n / 5).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = dataset.class_indices();
    for members in classes.iter_mut() {
        members.shuffle(&mut rng);
    }
    let mut val_counts: Vec<usize> = classes.iter().map(|m| m.len() / 5).collect();
    let mut extra = n_val - val_counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(&mut rng);
    // classes with a larger leftover share first, seeded order among equals
    order.sort_by_key(|&c| std::cmp::Reverse(classes[c].len() % 5));
    for &c in &order {
        if extra == 0 {
            break;
        }
        if val_counts[c] < classes[c].len() && !classes[c].len().is_multiple_of(5) {
            val_counts[c] += 1;
            extra -= 1;
        }
    }
    for &c in &order {
        if extra == 0 {
            break;
        }
        if val_counts[c] < classes[c].len() - 1 {
            val_counts[c] += 1;
            extra -= 1;
        }
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (members, &v) in classes.iter().zip(&val_counts) {
        val.extend_from_slice(&members[..v]);
        train.extend_from_slice(&members[v..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset, seed)?;
    let t = dataset.subset(&train)?.with_provenance("split", "train");
    let v = dataset.subset(&val)?.with_provenance("split", "val");
    let missing: Vec<usize> = t.class_counts().iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect();
    if !missing.is_empty() {
        log::debug!("4:1 split leaves classes {missing:?} without training examples");
    }
    Ok((t, v))
}

/// Per-feature standardization fitted on a training subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(train: &Dataset) -> Normalizer {
        let (n, p) = (train.len() as f64, train.dim());
        let x = train.features();
        let mut mean = vec![0.0; p];
        for i in 0..train.len() {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; p];
        for i in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.mean.len() {
            return Err(Error::Dimension(format!("normalizer has {} features, data {}", self.mean.len(), data.dim())));
        }
        let mut x = data.features().clone();
        for i in 0..x.rows() {
            for ((v, m), s) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        let mut out = Dataset::new(x, data.labels().to_vec(), data.num_classes())?;
        out.provenance = data.provenance.clone();
        Ok(out)
    }
}

pub fn normalize_fit(train: &Dataset) -> Normalizer {
    Normalizer::fit(train)
}

pub fn normalize_apply(norm: &Normalizer, data: &Dataset) -> Result<Dataset> {
    norm.apply(data)
}

/// Reads `label,f0,...,f{p-1}`. With `num_classes = None` the class count is
/// one more than the largest label seen.
pub fn load_dataset_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let csv_err = |line: u64, msg: String| Error::Csv { path: path.to_path_buf(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let p = headers.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("label".to_string()).chain((0..p).map(|j| format!("f{j}"))).collect();
    if p == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(csv_err(
            1,
            format!("header must be label,f0,...,f{{p-1}}; got {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != p + 1 {
            return Err(csv_err(line, format!("expected {} columns, found {}", p + 1, record.len())));
        }
        let label: usize =
            record[0].parse().map_err(|_| csv_err(line, format!("label {:?} is not a class index", &record[0])))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(csv_err(line, format!("label {label} out of range for {c} classes")));
            }
        }
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| csv_err(line, format!("f{j} value {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("f{j} is not finite")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset::new(Mat::from_vec(labels.len(), p, data)?, labels, c)?.with_provenance("path", path.display()))
}

pub fn save_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let to_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), line: 0, msg: e.to_string() };
    let header: Vec<String> =
        std::iter::once("label".to_string()).chain((0..data.dim()).map(|j| format!("f{j}"))).collect();
    w.write_record(&header).map_err(to_err)?;
    for i in 0..data.len() {
        let row: Vec<String> = std::iter::once(data.labels()[i].to_string())
            .chain(data.features().row(i).iter().map(|v| format!("{v:?}")))
            .collect();
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
