//! Datasets: a synthetic multiclass task, the IDX (MNIST-format) reader and
//! the Dirichlet label-skew partition.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::filter::ClientId;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} labels of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidDimension(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-feature noise around the class centre.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 20,
            train_size: 2000,
            test_size: 1000,
            noise: 0.25,
        }
    }
}

/// Gaussian class clusters in `[0, 1]^dim`: centres are uniform in the unit
/// cube, samples are centre plus noise, clipped to the cube. Labels are
/// balanced up to rounding. Returns `(train, test)`.
pub fn synthetic(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.dim == 0 {
        return Err(Error::Config("synthetic task needs >= 2 classes and >= 1 feature".into()));
    }
    let centres: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut draw = |n: usize| {
        let mut features = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.num_classes;
            for &mu in &centres[c] {
                let z: f64 = StandardNormal.sample(rng);
                features.push((mu + spec.noise * z).clamp(0.0, 1.0));
            }
            labels.push(c as u32);
        }
        Dataset::new(features, labels, spec.dim, spec.num_classes)
    };
    let train = draw(spec.train_size)?;
    let test = draw(spec.test_size)?;
    Ok((train, test))
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(path.display().to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image/label pair, scales pixels to `[0, 1]` and keeps a
/// uniform random subset of `limit` examples (all of them if `limit`
/// exceeds the file).
pub fn load_idx_subset(
    images_path: &Path,
    labels_path: &Path,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if limit == 0 {
        return Err(Error::CountMismatch("requested 0 examples".into()));
    }
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = read_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = read_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_images = read_u32(&images, 4, images_path)? as usize;
    let rows = read_u32(&images, 8, images_path)? as usize;
    let cols = read_u32(&images, 12, images_path)? as usize;
    let n_labels = read_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch(format!("{n_images} images but {n_labels} labels")));
    }
    let dim = rows * cols;
    if images.len() < 16 + n_images * dim {
        return Err(Error::TruncatedFile(images_path.display().to_string()));
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::TruncatedFile(labels_path.display().to_string()));
    }
    if dim == 0 {
        return Err(Error::CountMismatch("images have zero pixels".into()));
    }

    let mut chosen: Vec<usize> = if limit >= n_images {
        (0..n_images).collect()
    } else {
        rand::seq::index::sample(rng, n_images, limit).into_vec()
    };
    chosen.sort_unstable();
    let label_bytes = &labels[8..8 + n_labels];
    let num_classes = label_bytes.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(2);
    let mut features = Vec::with_capacity(chosen.len() * dim);
    let mut out_labels = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let start = 16 + i * dim;
        features.extend(images[start..start + dim].iter().map(|&p| f64::from(p) / 255.0));
        out_labels.push(u32::from(label_bytes[i]));
    }
    Dataset::new(features, out_labels, dim, num_classes)
}

/// One client's private shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: ClientId,
    pub data: Dataset,
    /// Indices into the full training set.
    pub indices: Vec<usize>,
}

/// Dirichlet label-skew partition.
///
/// Each client draws class proportions `q ~ Dir(α·p)`, `p` the global class
/// prior. Every class's examples are then shuffled and split across clients
/// in proportion to their weight on that class (largest-remainder rounding),
/// so each example lands on exactly one client. Clients left empty take one
/// example from the largest shard.
pub fn partition_dirichlet(
    data: &Dataset,
    k: usize,
    alpha_d: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClientState>> {
    if !(alpha_d > 0.0) {
        return Err(Error::Config(format!("alpha_d must be > 0, got {alpha_d}")));
    }
    if k == 0 || data.len() < k {
        return Err(Error::TooFewExamples(format!(
            "{} examples cannot cover {k} clients",
            data.len()
        )));
    }
    let counts = data.class_counts();
    let n = data.len() as f64;
    let prior: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();

    let mut q = vec![vec![0.0; data.num_classes]; k];
    for row in q.iter_mut() {
        *row = dirichlet(&prior, alpha_d, rng)?;
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let weights: Vec<f64> = q.iter().map(|row| row[class]).collect();
        let alloc = largest_remainder(&weights, members.len());
        let mut at = 0;
        for (c, take) in alloc.into_iter().enumerate() {
            shards[c].extend_from_slice(&members[at..at + take]);
            at += take;
        }
    }

    for c in 0..k {
        if shards[c].is_empty() {
            let donor = (0..k).max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j))).unwrap();
            let moved = shards[donor].pop().expect("some shard is non-empty");
            shards[c].push(moved);
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(c, mut idx)| {
            idx.sort_unstable();
            ClientState {
                client_id: ClientId(c as u32),
                data: data.subset(&idx),
                indices: idx,
            }
        })
        .collect())
}

/// `Dir(α·p)` via normalised Gamma draws. If every draw underflows to 0
/// (tiny `α`), all mass goes to one component chosen in proportion to `p`.
fn dirichlet(prior: &[f64], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(prior.len());
    for &p in prior {
        let shape = alpha * p;
        draws.push(if shape > 0.0 {
            Gamma::new(shape, 1.0)
                .map_err(|e| Error::Config(format!("gamma({shape}): {e}")))?
                .sample(rng)
        } else {
            0.0
        });
    }
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        return Ok(draws.into_iter().map(|g| g / total).collect());
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = prior.len() - 1;
    for (i, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            pick = i;
            break;
        }
    }
    let mut one_hot = vec![0.0; prior.len()];
    one_hot[pick] = 1.0;
    Ok(one_hot)
}

/// Splits `total` items in proportion to `weights`; remainders go to the
/// largest fractional parts, ties to the lower index.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        let mut out = vec![0; weights.len()];
        for i in 0..total {
            out[i % weights.len()] += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}
