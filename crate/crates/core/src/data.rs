//! Datasets, synthetic generators, and label-skewed partitioning.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<f64>>,
    /// Base-2 divergence of each client's label histogram from uniform.
    pub jsd: Vec<f64>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid("feature rows and labels differ in length"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::numeric("dataset contains non-finite features"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
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

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn label_histogram(&self, idx: &[usize]) -> Vec<f64> {
        label_histogram(idx.iter().map(|&i| self.labels[i]), self.num_classes)
    }

    /// Rescales every feature to zero mean and unit variance. Constant
    /// features are only centered.
    pub fn standardize(&mut self) {
        let (n, d) = (self.features.rows(), self.features.cols());
        if n == 0 {
            return;
        }
        for c in 0..d {
            let mean = (0..n).map(|r| self.features.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| (self.features.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for r in 0..n {
                let v = (self.features.get(r, c) - mean) * scale;
                self.features.set(r, c, v);
            }
        }
    }
}

pub fn label_histogram(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    let mut total = 0.0;
    for y in labels {
        counts[y] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Gaussian clusters around well-separated random centers.
pub fn make_blobs<R: Rng + ?Sized>(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || dim == 0 {
        return Err(Error::invalid("blob counts must all be at least 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be a non-negative real"));
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| 2.0 * unit.sample(rng)).collect())
        .collect();
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(center.iter().map(|m| m + spread * unit.sample(rng)));
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels,
        num_classes,
        "blobs",
    )
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(&ai, _)| ai > 0.0)
            .map(|(&ai, &mi)| ai * (ai / mi).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0))
}

pub fn uniform(num_classes: usize) -> Vec<f64> {
    vec![1.0 / num_classes as f64; num_classes]
}

const PARTITION_RETRIES: usize = 1000;

/// Label-skewed split: each class is divided among clients according to a
/// symmetric Dirichlet draw. Draws leaving any client under `min_samples`
/// are rejected and redrawn.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    num_clients: usize,
    concentration: f64,
    min_samples: usize,
    rng: &mut R,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config(
            "partition.clients",
            "need at least one client",
        ));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::config("partition.concentration", "must be positive"));
    }
    if num_clients * min_samples > indices.len() {
        return Err(Error::config(
            "partition.min_samples",
            format!(
                "{num_clients} clients × {min_samples} samples exceeds {} available",
                indices.len()
            ),
        ));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::config("partition.concentration", e.to_string()))?;
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for &i in indices {
        by_class[dataset.labels[i]].push(i);
    }

    for _ in 0..PARTITION_RETRIES {
        let mut clients = vec![Vec::new(); num_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                // every component underflowed; fall back to one random owner
                weights.iter_mut().for_each(|w| *w = 0.0);
                weights[rng.gen_range(0..num_clients)] = 1.0;
            } else {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            let mut start = 0;
            let mut cumulative = 0.0;
            for (k, w) in weights.iter().enumerate() {
                cumulative += w;
                let end = if k + 1 == num_clients {
                    members.len()
                } else {
                    ((cumulative * members.len() as f64).round() as usize)
                        .clamp(start, members.len())
                };
                clients[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_samples) {
            return Ok(finish_partition(dataset, clients));
        }
    }
    Err(Error::config(
        "partition.min_samples",
        format!(
            "could not give every client {min_samples} samples after {PARTITION_RETRIES} draws"
        ),
    ))
}

/// Pathological split: sort by label, cut into `num_clients × shards_per_client`
/// contiguous shards, and deal shards out at random.
pub fn shards_partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    num_clients: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<Partition> {
    let num_shards = num_clients * shards_per_client;
    if num_shards == 0 || num_shards > indices.len() {
        return Err(Error::config(
            "partition.shards",
            "shard count must be in 1..=samples",
        ));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_by_key(|&i| (dataset.labels[i], i));
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(rng);
    let bound = |s: usize| s * sorted.len() / num_shards;
    let clients = shard_ids
        .chunks(shards_per_client)
        .map(|chunk| {
            chunk
                .iter()
                .flat_map(|&s| sorted[bound(s)..bound(s + 1)].iter().copied())
                .collect()
        })
        .collect();
    Ok(finish_partition(dataset, clients))
}

fn finish_partition(dataset: &Dataset, mut clients: Vec<Vec<usize>>) -> Partition {
    clients.iter_mut().for_each(|c| c.sort_unstable());
    let histograms: Vec<Vec<f64>> = clients.iter().map(|c| dataset.label_histogram(c)).collect();
    let u = uniform(dataset.num_classes);
    let jsd = histograms
        .iter()
        .map(|h| jsd(h, &u).expect("same length"))
        .collect();
    Partition {
        client_indices: clients,
        histograms,
        jsd,
    }
}

/// Reads the `n,d,num_classes` header format.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(parse_err(1, "file is empty".into())),
        Some(r) => r?,
    };
    if header.len() != 3 {
        return Err(parse_err(
            1,
            format!(
                "header must be `n,d,num_classes`, found {} fields",
                header.len()
            ),
        ));
    }
    let field = |i: usize, what: &str| -> Result<usize> {
        header[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(1, format!("header {what} is not a count: {:?}", &header[i])))
    };
    let (n, d, num_classes) = (field(0, "n")?, field(1, "d")?, field(2, "num_classes")?);
    if d == 0 || num_classes == 0 {
        return Err(parse_err(1, "d and num_classes must be positive".into()));
    }

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 1, record.len()),
            ));
        }
        for v in record.iter().take(d) {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("not a real number: {v:?}")))?;
            if !x.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {v:?}")));
            }
            data.push(x);
        }
        let label_field = &record[d];
        let y: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label is not a class id: {label_field:?}")))?;
        if y >= num_classes {
            return Err(parse_err(
                line,
                format!("label {y} out of range for {num_classes} classes"),
            ));
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no samples after the header".into()));
    }
    if labels.len() != n {
        return Err(parse_err(
            1,
            format!("header declares {n} samples, file has {}", labels.len()),
        ));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, num_classes, name)
}

pub fn write_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{}",
            dataset.len(),
            dataset.dim(),
            dataset.num_classes
        )?;
        for r in 0..dataset.len() {
            for v in dataset.features.row(r) {
                // shortest representation that round-trips exactly
                write!(w, "{v:?},")?;
            }
            writeln!(w, "{}", dataset.labels[r])?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
