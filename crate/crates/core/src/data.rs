//! Datasets, non-i.i.d. partitioning, poisoning transforms and attack scoring.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{evaluate_accuracy, Model};
use crate::rng;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

/// On-disk JSON form: `{"features": [[...], ...], "labels": [...], "classes": C}`.
/// `classes` is optional and defaults to `max(label) + 1`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetJson {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
}

impl LabeledDataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledDataset {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        LabeledDataset::new(dim, classes, rows.into_iter().flatten().collect(), labels)
    }

    /// An empty dataset sharing this dataset's shape.
    pub fn empty_like(&self) -> Self {
        LabeledDataset {
            dim: self.dim,
            classes: self.classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = self.empty_like();
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    fn push(&mut self, row: &[f64], label: usize) {
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Moves the first `per_class` samples of every class into a second
    /// dataset; returns `(rest, taken)`.
    pub fn split_per_class(&self, per_class: usize) -> (Self, Self) {
        let mut taken_count = vec![0; self.classes];
        let mut rest = self.empty_like();
        let mut taken = self.empty_like();
        for i in 0..self.len() {
            let l = self.labels[i];
            if taken_count[l] < per_class {
                taken_count[l] += 1;
                taken.push(self.row(i), l);
            } else {
                rest.push(self.row(i), l);
            }
        }
        (rest, taken)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetJson {
            features: (0..self.len()).map(|i| self.row(i).to_vec()).collect(),
            labels: self.labels.clone(),
            classes: Some(self.classes),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(text)?;
        let classes = doc
            .classes
            .unwrap_or_else(|| doc.labels.iter().max().map_or(2, |m| (m + 1).max(2)));
        LabeledDataset::from_rows(doc.features, doc.labels, classes)
    }
}

/// Gaussian class clusters around distinct random means, clipped to `[0, 1]`.
/// Samples are emitted class-interleaved: row `i` has label `i % classes`.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::invalid("synth_blobs needs classes >= 2, per_class >= 1, dim >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be finite and non-negative"));
    }
    let mut rng = rng::stream(seed, rng::Stream::Dataset, 0, 0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let m: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..0.9)).collect();
        if !means.contains(&m) {
            means.push(m);
        }
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = LabeledDataset::new(dim, classes, Vec::new(), Vec::new())?;
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let row: Vec<f64> = mean
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            out.push(&row, c);
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: "truncated header".into(),
        })
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(Error::Parse {
            offset: 16 + body.len(),
            message: format!("expected {} pixel bytes, found {}", count * dim, body.len()),
        });
    }
    let pixels = body[..count * dim].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, dim, pixels))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Parse {
            offset: 8 + body.len(),
            message: format!("expected {count} labels, found {}", body.len()),
        });
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Parses an IDX image/label pair (MNIST layout). Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::invalid(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(10));
    LabeledDataset::new(dim, classes, pixels, labels)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub node_count: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Splits `data` over `spec.node_count` nodes. For every class a fraction
/// vector is drawn from a symmetric Dirichlet(alpha) and that class's
/// samples are dealt out with largest-remainder rounding.
pub fn dirichlet_partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    if spec.node_count == 0 {
        return Err(Error::invalid("node_count must be at least 1"));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::invalid("alpha must be positive and finite"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot partition an empty dataset"));
    }
    let n = spec.node_count;
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut parts = vec![data.empty_like(); n];
    for class in 0..data.classes() {
        let mut rng = rng::stream(spec.seed, rng::Stream::Partition, class as u64, 0);
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        members.shuffle(&mut rng);
        let fractions = dirichlet_sample(&gamma, n, &mut rng);
        let counts = largest_remainder(&fractions, members.len());
        let mut cursor = 0;
        for (node, &count) in counts.iter().enumerate() {
            for &i in &members[cursor..cursor + count] {
                parts[node].push(data.row(i), class);
            }
            cursor += count;
        }
    }
    Ok(parts)
}

fn dirichlet_sample(gamma: &Gamma<f64>, n: usize, rng: &mut rng::SimRng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|d| d / sum).collect()
    } else {
        // every gamma draw underflowed: the limit puts all mass on one node
        let mut v = vec![0.0; n];
        v[rng.random_range(0..n)] = 1.0;
        v
    }
}

/// Integer counts summing to `total`, proportional to `fractions`. Leftover
/// units go to the largest fractional parts, ties to the lowest index.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// One feature overwrite of a backdoor trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternPixel {
    pub index: usize,
    pub value: f64,
}

/// The adversary's data transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    LabelFlip { t1: usize, t2: usize },
    Backdoor { pattern: Vec<PatternPixel>, target: usize },
}

impl AttackSpec {
    pub fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        match self {
            AttackSpec::LabelFlip { t1, t2 } => {
                if t1 == t2 {
                    return Err(Error::invalid("label flip classes must differ"));
                }
                if *t1 >= classes || *t2 >= classes {
                    return Err(Error::invalid(format!(
                        "label flip classes ({t1}, {t2}) out of range for {classes} classes"
                    )));
                }
            }
            AttackSpec::Backdoor { pattern, target } => {
                if *target >= classes {
                    return Err(Error::invalid(format!(
                        "backdoor target {target} out of range for {classes} classes"
                    )));
                }
                if let Some(p) = pattern.iter().find(|p| p.index >= dim) {
                    return Err(Error::invalid(format!(
                        "pattern index {} out of range for dimension {dim}",
                        p.index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        match self {
            AttackSpec::LabelFlip { t1, t2 } => apply_label_flip(data, *t1, *t2),
            AttackSpec::Backdoor { pattern, target } => apply_backdoor(data, pattern, *target),
        }
    }
}

/// A `side x side` block of max-intensity pixels in the top-left corner of a
/// row-major image of width `image_width`.
pub fn corner_square_pattern(image_width: usize, side: usize) -> Vec<PatternPixel> {
    (0..side)
        .flat_map(|r| (0..side).map(move |c| r * image_width + c))
        .map(|index| PatternPixel { index, value: 1.0 })
        .collect()
}

/// Swaps labels `t1` and `t2`; features and all other samples are untouched.
pub fn apply_label_flip(data: &LabeledDataset, t1: usize, t2: usize) -> Result<LabeledDataset> {
    AttackSpec::LabelFlip { t1, t2 }.validate(data.classes(), data.dim())?;
    let mut out = data.clone();
    for l in &mut out.labels {
        if *l == t1 {
            *l = t2;
        } else if *l == t2 {
            *l = t1;
        }
    }
    Ok(out)
}

/// Stamps `pattern` onto every sample and relabels every sample as `target`.
pub fn apply_backdoor(data: &LabeledDataset, pattern: &[PatternPixel], target: usize) -> Result<LabeledDataset> {
    AttackSpec::Backdoor {
        pattern: pattern.to_vec(),
        target,
    }
    .validate(data.classes(), data.dim())?;
    let mut out = data.clone();
    for i in 0..out.len() {
        let row = &mut out.features[i * out.dim..(i + 1) * out.dim];
        for p in pattern {
            row[p.index] = p.value;
        }
    }
    out.labels.iter_mut().for_each(|l| *l = target);
    Ok(out)
}

/// The segment of a clean test set the attack alters, already transformed.
pub fn attack_segment(clean_test: &LabeledDataset, spec: &AttackSpec) -> Result<LabeledDataset> {
    if clean_test.is_empty() {
        return Err(Error::invalid("attack test set is empty"));
    }
    spec.validate(clean_test.classes(), clean_test.dim())?;
    match spec {
        AttackSpec::LabelFlip { t1, t2 } => {
            let idx: Vec<usize> = (0..clean_test.len())
                .filter(|&i| clean_test.label(i) == *t1 || clean_test.label(i) == *t2)
                .collect();
            if idx.is_empty() {
                return Err(Error::UndefinedScore(format!(
                    "test set has no samples of class {t1} or {t2}"
                )));
            }
            apply_label_flip(&clean_test.subset(&idx), *t1, *t2)
        }
        AttackSpec::Backdoor { .. } => spec.apply(clean_test),
    }
}

/// Accuracy of `model` on the altered segment of `clean_test`.
pub fn attack_score(model: &Model, clean_test: &LabeledDataset, spec: &AttackSpec) -> Result<f64> {
    evaluate_accuracy(model, &attack_segment(clean_test, spec)?)
}
