//! Datasets and non-IID client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;
use crate::rng::mix64;

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("dataset has no samples".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Per-feature mean and standard deviation. Constant features report 1.
    pub fn feature_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = self.features.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(self.features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((v, x), m) in var.iter_mut().zip(self.features.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        (mean, std)
    }

    /// Applies `(x - mean) / std` column-wise.
    pub fn standardize_with(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.dim() || std.len() != self.dim() {
            return Err(Error::Shape(format!(
                "moments of length {}/{} for {} features",
                mean.len(),
                std.len(),
                self.dim()
            )));
        }
        for r in 0..self.len() {
            for ((x, m), s) in self.features.row_mut(r).iter_mut().zip(mean).zip(std) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
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

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Shape(format!(
                "row {bad} out of range for {} samples",
                self.len()
            )));
        }
        Batch::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Row indices owned by one client.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Shard {
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_histogram(&self, labels: &[usize], num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &i in &self.indices {
            h[labels[i]] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet { mu: f64 },
    Pathological { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    /// Splits `labels` across clients. `min_size` applies to the Dirichlet scheme.
    pub fn apply(&self, labels: &[usize], num_classes: usize, min_size: usize) -> Result<Vec<Shard>> {
        match self.scheme {
            PartitionScheme::Dirichlet { mu } => {
                dirichlet_partition(labels, num_classes, self.num_clients, mu, min_size, self.seed)
            }
            PartitionScheme::Pathological { n } => {
                pathological_partition(labels, num_classes, self.num_clients, n, self.seed)
            }
        }
    }
}

/// Gaussian blobs: class centers ~ 3·N(0, I), samples ~ N(center, spread²·I).
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    Ok(gen_synthetic_split(num_classes, dim, per_class, 0, spread, seed)?.0)
}

/// Train and test sets drawn around the same class centers. The train set
/// equals `gen_synthetic` with the same arguments.
pub fn gen_synthetic_split(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Option<Dataset>)> {
    if num_classes == 0 || dim == 0 || train_per_class == 0 {
        return Err(Error::Config(
            "num_classes, dim and per_class must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut sample = |center: &[f64], n: usize, feats: &mut Vec<f64>| {
        for _ in 0..n {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                feats.push(c + spread * z);
            }
        }
    };
    let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
    let (mut test_x, mut test_y) = (Vec::new(), Vec::new());
    for (k, center) in centers.iter().enumerate() {
        sample(center, train_per_class, &mut train_x);
        train_y.extend(std::iter::repeat_n(k, train_per_class));
    }
    for (k, center) in centers.iter().enumerate() {
        sample(center, test_per_class, &mut test_x);
        test_y.extend(std::iter::repeat_n(k, test_per_class));
    }
    let classes = num_classes.max(2);
    let train = Dataset::new(
        Matrix::from_vec(train_y.len(), dim, train_x)?,
        train_y,
        classes,
    )?;
    let test = if test_per_class > 0 {
        Some(Dataset::new(
            Matrix::from_vec(test_y.len(), dim, test_x)?,
            test_y,
            classes,
        )?)
    } else {
        None
    };
    Ok((train, test))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

/// Loads an IDX image file (`u8`, count×rows×cols) and its IDX label file.
/// Pixels are scaled to `[0, 1]`, rows flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = fs::read(ip)?;
    let lab = fs::read(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: ip.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let dim = rows * cols;
    let pixels = &img[16..];
    if pixels.len() < count * dim {
        return Err(Error::Truncated {
            path: ip.to_path_buf(),
            detail: format!("expected {} pixel bytes, found {}", count * dim, pixels.len()),
        });
    }

    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lp.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = be_u32(&lab, 4, lp)? as usize;
    let label_bytes = &lab[8..];
    if label_bytes.len() < label_count {
        return Err(Error::Truncated {
            path: lp.to_path_buf(),
            detail: format!("expected {label_count} labels, found {}", label_bytes.len()),
        });
    }
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let features = pixels[..count * dim]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(count, dim, features)?, labels, classes)
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Config(format!("label {y} >= num_classes {num_classes}")))?
            .push(i);
    }
    Ok(by_class)
}

/// Largest-remainder apportionment of `total` items by `weights` (summing to 1).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub const DIRICHLET_MAX_ATTEMPTS: u64 = 100;

/// Per-class client proportions drawn from `Dirichlet(mu·1)`; class indices
/// are shuffled and dealt by largest-remainder rounding. Draws are repeated
/// on fresh substreams until every shard holds at least `min_size` samples.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    mu: f64,
    min_size: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("dirichlet mu must be > 0, got {mu}")));
    }
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    let by_class = indices_by_class(labels, num_classes)?;
    let min_size = min_size.max(1);
    let gamma = Gamma::new(mu, 1.0).map_err(|e| Error::Config(format!("gamma({mu}): {e}")))?;

    'attempt: for attempt in 0..DIRICHLET_MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(attempt)));
        let mut shards = vec![Shard::default(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                continue 'attempt;
            }
            let weights: Vec<f64> = draws.iter().map(|d| d / total).collect();
            let mut pool = class_indices.clone();
            pool.shuffle(&mut rng);
            let mut start = 0;
            for (shard, count) in shards.iter_mut().zip(apportion(pool.len(), &weights)) {
                shard.indices.extend_from_slice(&pool[start..start + count]);
                start += count;
            }
        }
        if shards.iter().all(|s| s.len() >= min_size) {
            for s in &mut shards {
                s.indices.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::PartitionInfeasible(format!(
        "no Dirichlet({mu}) draw gave all {num_clients} clients >= {min_size} samples in {DIRICHLET_MAX_ATTEMPTS} attempts"
    )))
}

/// Each client receives data from exactly `n` distinct classes.
///
/// Client slots are filled by cycling through a shuffled order of the
/// classes present, so any `n` consecutive slots hold distinct classes and
/// every class is held by `⌊nP/C⌋` or `⌈nP/C⌉` clients. A class's indices
/// are cut into one contiguous slice per holder, the remainder going to
/// the last slice.
pub fn pathological_partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    let by_class = indices_by_class(labels, num_classes)?;
    let mut classes: Vec<usize> = (0..num_classes).filter(|&k| !by_class[k].is_empty()).collect();
    let c = classes.len();
    if num_clients == 0 || n == 0 {
        return Err(Error::Config("num_clients and n must be >= 1".into()));
    }
    if n > c {
        return Err(Error::Config(format!(
            "pathological n = {n} exceeds the {c} classes present"
        )));
    }
    if n * num_clients < c {
        return Err(Error::Config(format!(
            "pathological partition infeasible: n*P = {} < {c} classes",
            n * num_clients
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let mut clients: Vec<usize> = (0..num_clients).collect();
    clients.shuffle(&mut rng);

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (pos, &client) in clients.iter().enumerate() {
        for j in 0..n {
            holders[classes[(pos * n + j) % c]].push(client);
        }
    }

    let mut shards = vec![Shard::default(); num_clients];
    for (k, idx) in by_class.iter().enumerate() {
        let h = &holders[k];
        if h.is_empty() {
            continue;
        }
        if idx.len() < h.len() {
            return Err(Error::PartitionInfeasible(format!(
                "class {k} has {} samples for {} holders",
                idx.len(),
                h.len()
            )));
        }
        let size = idx.len() / h.len();
        for (j, &client) in h.iter().enumerate() {
            let end = if j + 1 == h.len() { idx.len() } else { (j + 1) * size };
            shards[client].indices.extend_from_slice(&idx[j * size..end]);
        }
    }
    for s in &mut shards {
        s.indices.sort_unstable();
    }
    Ok(shards)
}

/// Mean over clients of the χ² distance between the client's label
/// distribution and the global one. Larger means more heterogeneous.
pub fn label_heterogeneity(shards: &[Shard], labels: &[usize], num_classes: usize) -> f64 {
    let mut global = vec![0.0; num_classes];
    for &y in labels {
        global[y] += 1.0;
    }
    let n = labels.len() as f64;
    for g in &mut global {
        *g /= n;
    }
    let used: Vec<&Shard> = shards.iter().filter(|s| !s.is_empty()).collect();
    let total: f64 = used
        .iter()
        .map(|s| {
            let h = s.label_histogram(labels, num_classes);
            let len = s.len() as f64;
            h.iter()
                .zip(&global)
                .filter(|(_, &g)| g > 0.0)
                .map(|(&c, &g)| (c as f64 / len - g).powi(2) / g)
                .sum::<f64>()
        })
        .sum();
    total / used.len().max(1) as f64
}
