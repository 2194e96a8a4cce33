//! Datasets, deterministic erased/held-out splits, and verification-target
//! selection.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::tensor::Tensor;

/// Labeled feature matrix with entries confined to a value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub k: usize,
    pub value_range: (f64, f64),
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, k: usize, value_range: (f64, f64)) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::shape("dataset features must be rank-2"));
        }
        if x.shape()[0] != y.len() {
            return Err(Error::shape(format!(
                "{} rows but {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!("label {bad} out of range for k={k}")));
        }
        let (lo, hi) = value_range;
        if x.data().iter().any(|&v| v < lo || v > hi) {
            return Err(Error::shape("feature outside value range"));
        }
        Ok(Dataset { x, y, k, value_range })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Copy out the rows at `indices` as (features, labels).
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::shape(format!("index {i} out of bounds")));
            }
            data.extend_from_slice(self.x.row(i));
            labels.push(self.y[i]);
        }
        Ok((Tensor::matrix(indices.len(), dim, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(indices)?;
        Dataset::new(x, y, self.k, self.value_range)
    }

    /// CSV export with header `f0..f{dim-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let dim = self.dim();
        let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", row.join(","), self.y[i])?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path, k: usize, value_range: (f64, f64)) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty CSV"))?;
        let dim = header.split(',').count() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::format(format!("row {} has {} fields", lineno + 2, fields.len())));
            }
            for f in &fields[..dim] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::format(format!("bad float on row {}: {e}", lineno + 2)))?,
                );
            }
            labels.push(
                fields[dim]
                    .parse::<usize>()
                    .map_err(|e| Error::format(format!("bad label on row {}: {e}", lineno + 2)))?,
            );
        }
        let n = labels.len();
        Dataset::new(Tensor::matrix(n, dim, data)?, labels, k, value_range)
    }
}

/// Train/erased/held-out partition. `erased` is a subset of `train` by index.
#[derive(Debug, Clone)]
pub struct ErasedSplit {
    pub train: Dataset,
    pub erased_indices: Vec<usize>,
    pub erased: Dataset,
    pub heldout: Dataset,
    pub esr: f64,
}

/// Verification targets: model-unseen samples with an assigned wrong label.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub x: Tensor,
    pub y_true: Vec<usize>,
    pub y_wrong: Vec<usize>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WrongLabelMode {
    /// Second-highest-probability class under the trained model.
    SecondBest,
    /// A fixed class; samples whose true label equals it are skipped.
    Fixed(usize),
}

/// Minimum query count for the CLT-based test to apply.
pub const MIN_TARGETS: usize = 30;

/// Deterministic class centers for the synthetic blob generator. Fixed
/// across seeds so that sweeps over the data seed share one geometry.
fn blob_centers(k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x424c_4f42); // "BLOB"
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(0.1..0.9)).collect()
    };
    // farthest-point selection over candidate draws keeps classes separated
    let mut centers = vec![draw(&mut rng)];
    while centers.len() < k {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..50 {
            let c = draw(&mut rng);
            let min_dist = centers
                .iter()
                .map(|e| {
                    e.iter()
                        .zip(&c)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().map_or(true, |(d, _)| min_dist > *d) {
                best = Some((min_dist, c));
            }
        }
        centers.push(best.unwrap().1);
    }
    centers
}

/// Gaussian clusters, one per class, clamped to [0,1].
pub fn gen_blobs(n_per_class: usize, k: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || dim < 2 {
        return Err(Error::config("gen_blobs needs k >= 2 and dim >= 2"));
    }
    if spread < 0.0 {
        return Err(Error::config("spread must be non-negative"));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be positive"));
    }
    let centers = blob_centers(k, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).unwrap();
    let n = n_per_class * k;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..k {
        for _ in 0..n_per_class {
            for &c in &centers[class] {
                let v = if spread > 0.0 { c + noise.sample(&mut rng) } else { c };
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::matrix(n, dim, data)?, labels, k, (0.0, 1.0))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: &mut usize) -> Result<u32> {
    if *off + 4 > bytes.len() {
        return Err(Error::format("truncated IDX header"));
    }
    let v = u32::from_be_bytes(bytes[*off..*off + 4].try_into().unwrap());
    *off += 4;
    Ok(v)
}

/// Parse an IDX image/label file pair; pixels are rescaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut off = 0;
    if read_be_u32(&img_bytes, &mut off)? != IDX_IMAGES_MAGIC {
        return Err(Error::format("bad IDX image magic"));
    }
    let count = read_be_u32(&img_bytes, &mut off)? as usize;
    let rows = read_be_u32(&img_bytes, &mut off)? as usize;
    let cols = read_be_u32(&img_bytes, &mut off)? as usize;
    let dim = rows * cols;
    if img_bytes.len() - off != count * dim {
        return Err(Error::format("truncated IDX image payload"));
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let mut loff = 0;
    if read_be_u32(&lbl_bytes, &mut loff)? != IDX_LABELS_MAGIC {
        return Err(Error::format("bad IDX label magic"));
    }
    let lcount = read_be_u32(&lbl_bytes, &mut loff)? as usize;
    if lcount != count {
        return Err(Error::format(format!("{count} images but {lcount} labels")));
    }
    if lbl_bytes.len() - loff != count {
        return Err(Error::format("truncated IDX label payload"));
    }

    let data: Vec<f64> = img_bytes[off..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[loff..].iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(Tensor::matrix(count, dim, data)?, labels, k, (0.0, 1.0))
}

/// Deterministic shuffle, held-out carved first, then `esr * |train|`
/// (rounded) indices marked as erased.
pub fn split(dataset: &Dataset, esr: f64, heldout_fraction: f64, seed: u64) -> Result<ErasedSplit> {
    if !(0.0..1.0).contains(&esr) || esr <= 0.0 {
        return Err(Error::config("esr must be in (0,1)"));
    }
    if !(0.0..1.0).contains(&heldout_fraction) || heldout_fraction <= 0.0 {
        return Err(Error::config("heldout fraction must be in (0,1)"));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_heldout = ((n as f64) * heldout_fraction).round() as usize;
    if n_heldout == 0 || n_heldout >= n {
        return Err(Error::config("heldout partition empty or full"));
    }
    let heldout_idx = &order[..n_heldout];
    let train_idx = &order[n_heldout..];
    let n_erased = ((train_idx.len() as f64) * esr).round() as usize;
    if n_erased == 0 {
        return Err(Error::config("erased set is empty at this esr"));
    }
    let erased_local: Vec<usize> = (0..n_erased).collect();
    let train = dataset.subset(train_idx)?;
    let erased = train.subset(&erased_local)?;
    let heldout = dataset.subset(heldout_idx)?;
    Ok(ErasedSplit { train, erased_indices: erased_local, erased, heldout, esr })
}

/// Pick the `m` held-out samples the model classifies correctly with the
/// highest confidence (at least `conf_threshold`), and assign wrong labels.
pub fn select_targets(
    params: &ModelParams,
    heldout: &Dataset,
    m: usize,
    conf_threshold: f64,
    mode: WrongLabelMode,
) -> Result<TargetSet> {
    if m < MIN_TARGETS {
        return Err(Error::config(format!("need at least {MIN_TARGETS} targets, asked for {m}")));
    }
    // (confidence, index, wrong label)
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..heldout.len() {
        let (class, probs) = predict(params, heldout.x.row(i))?;
        if class != heldout.y[i] || probs[class] < conf_threshold {
            continue;
        }
        let wrong = match mode {
            WrongLabelMode::SecondBest => {
                let mut best: Option<usize> = None;
                for (c, &p) in probs.iter().enumerate() {
                    if c == class {
                        continue;
                    }
                    // ties break to the lowest class index
                    if best.map_or(true, |b| p > probs[b]) {
                        best = Some(c);
                    }
                }
                best.ok_or_else(|| Error::config("need at least 2 classes"))?
            }
            WrongLabelMode::Fixed(c) => {
                if heldout.y[i] == c {
                    continue;
                }
                c
            }
        };
        candidates.push((probs[class], i, wrong));
    }
    if candidates.len() < m {
        return Err(Error::InsufficientTargets { needed: m, found: candidates.len() });
    }
    // highest confidence first; index breaks exact ties deterministically
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    candidates.truncate(m);
    let indices: Vec<usize> = candidates.iter().map(|c| c.1).collect();
    let (x, y_true) = heldout.gather(&indices)?;
    let y_wrong = candidates.iter().map(|c| c.2).collect();
    Ok(TargetSet { x, y_true, y_wrong })
}
