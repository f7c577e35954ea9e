//! Synthetic datasets, client partitions, and minibatch sampling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matmul, DenseMatrix};

/// Attempts at drawing a Dirichlet partition with no empty client.
pub const DIRICHLET_MAX_ATTEMPTS: usize = 100;

/// Supervision attached to a set of feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// Class index per row.
    Classes(Vec<usize>),
    /// Real target vector per row (`m x d1`).
    Values(DenseMatrix),
}

/// Feature rows (`m x d2`) with their targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub features: DenseMatrix,
    pub targets: Targets,
}

impl DataBatch {
    pub fn new(features: DenseMatrix, targets: Targets) -> Result<Self> {
        let m = features.rows();
        let tm = match &targets {
            Targets::Classes(l) => l.len(),
            Targets::Values(v) => v.rows(),
        };
        if tm != m {
            return Err(Error::InvalidData(format!(
                "{m} feature rows but {tm} targets"
            )));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices` (repeats allowed), in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(indices)),
        };
        Ok(Self {
            features: self.features.select_rows(indices),
            targets,
        })
    }
}

/// A full dataset. For classification `num_classes` is the label range; for
/// regression it is the target dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: DataBatch,
    num_classes: usize,
    ground_truth: Option<DenseMatrix>,
}

impl Dataset {
    pub fn new(samples: DataBatch, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        match &samples.targets {
            Targets::Classes(labels) => {
                if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                    return Err(Error::InvalidData(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            Targets::Values(v) => {
                if v.cols() != num_classes {
                    return Err(Error::InvalidData(format!(
                        "targets have {} columns, expected {num_classes}",
                        v.cols()
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, w: DenseMatrix) -> Self {
        self.ground_truth = Some(w);
        self
    }

    pub fn samples(&self) -> &DataBatch {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The matrix that generated the targets, when synthetic.
    pub fn ground_truth(&self) -> Option<&DenseMatrix> {
        self.ground_truth.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.samples.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<DataBatch> {
        self.samples.select(indices)
    }

    /// Class counts over `indices`.
    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        if let Some(labels) = self.labels() {
            for &i in indices {
                h[labels[i]] += 1;
            }
        }
        h
    }

    /// Writes one row per sample: features, label (or targets), and the
    /// owning shard when a partition is given (`-1` if unassigned).
    pub fn write_csv<W: Write>(&self, partition: Option<&Partition>, out: W) -> Result<()> {
        let mut owner = vec![-1i64; self.len()];
        if let Some(p) = partition {
            for (c, shard) in p.shards.iter().enumerate() {
                for &i in shard {
                    owner[i] = c as i64;
                }
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let d = self.feature_dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        match &self.samples.targets {
            Targets::Classes(_) => header.push("label".into()),
            Targets::Values(v) => header.extend((0..v.cols()).map(|j| format!("y{j}"))),
        }
        header.push("shard".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .samples
                .features
                .row(i)
                .iter()
                .map(|x| x.to_string())
                .collect();
            match &self.samples.targets {
                Targets::Classes(l) => rec.push(l[i].to_string()),
                Targets::Values(v) => rec.extend(v.row(i).iter().map(|x| x.to_string())),
            }
            rec.push(owner[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameters of the synthetic classification generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    /// Std-dev of the logit noise applied before the argmax.
    pub noise: f64,
    /// Distance of each cluster center from the origin.
    pub separation: f64,
}

/// Draws a ground-truth `W*` (`classes x features`), places one Gaussian
/// cluster per class at `separation * w_c / |w_c|`, samples each point from a
/// uniformly chosen cluster, and labels it `argmax(W* x + noise)`.
pub fn generate_classification<R: Rng + ?Sized>(
    spec: &ClassificationSpec,
    rng: &mut R,
) -> Result<Dataset> {
    let ClassificationSpec {
        samples: m,
        features: d,
        classes: k,
        noise,
        separation,
    } = *spec;
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if m < k {
        return Err(Error::InvalidArgument(format!(
            "need at least as many samples as classes ({m} < {k})"
        )));
    }
    if !(noise >= 0.0) || !(separation >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise and separation must be nonnegative".into(),
        ));
    }
    let w_star = gaussian_matrix(k, d, 1.0, rng)?;
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let row = w_star.row(c);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|x| separation * x / norm).collect()
        })
        .collect();

    let mut features = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let cluster = rng.random_range(0..k);
        let x: Vec<f64> = centers[cluster]
            .iter()
            .map(|c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let label = (0..k)
            .map(|c| {
                let logit: f64 = w_star.row(c).iter().zip(&x).map(|(w, xi)| w * xi).sum();
                let eps: f64 = rng.sample(StandardNormal);
                logit + noise * eps
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, z)| {
                if z > best.1 {
                    (c, z)
                } else {
                    best
                }
            })
            .0;
        features.extend(x);
        labels.push(label);
    }
    let batch = DataBatch::new(DenseMatrix::new(m, d, features)?, Targets::Classes(labels))?;
    Ok(Dataset::new(batch, k)?.with_ground_truth(w_star))
}

/// Linear-Gaussian regression data: `y = W* x + noise`, `x ~ N(0, I)`.
pub fn generate_regression<R: Rng + ?Sized>(
    m: usize,
    d2: usize,
    d1: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be nonnegative".into()));
    }
    let w_star = gaussian_matrix(d1, d2, 1.0 / (d2 as f64).sqrt(), rng)?;
    let x = gaussian_matrix(m, d2, 1.0, rng)?;
    let mut y = matmul(&x, &w_star.transpose())?;
    if noise > 0.0 {
        y = y.add(&gaussian_matrix(m, d1, noise, rng)?)?;
    }
    let batch = DataBatch::new(x, Targets::Values(y))?;
    Ok(Dataset::new(batch, d1)?.with_ground_truth(w_star))
}

/// How a partition was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    FixedRatio,
    Dirichlet { alpha: f64 },
}

/// Disjoint, non-empty index lists, one per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
}

impl Partition {
    /// Checks disjointness, range and non-emptiness.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Partition(format!("client {c} has no samples")));
            }
            for &i in shard {
                if i >= dataset_len {
                    return Err(Error::Partition(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn assigned(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

/// Largest-remainder apportionment of `count` items by `shares`
/// (nonnegative, summing to at most 1). Ties go to the lower index.
pub fn apportion(count: usize, shares: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * count as f64).collect();
    let total = (quotas.iter().sum::<f64>().round() as usize).min(count);
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Shuffles all indices and splits them into `n` near-equal contiguous shards.
pub fn partition_iid<R: Rng + ?Sized>(ds: &Dataset, n: usize, rng: &mut R) -> Result<Partition> {
    if n == 0 || n > ds.len() {
        return Err(Error::Partition(format!(
            "cannot split {} samples among {n} clients",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let counts = apportion(ds.len(), &vec![1.0 / n as f64; n]);
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for c in counts {
        let mut s = idx[start..start + c].to_vec();
        s.sort_unstable();
        shards.push(s);
        start += c;
    }
    let p = Partition {
        shards,
        scheme: PartitionScheme::Iid,
    };
    p.validate(ds.len())?;
    Ok(p)
}

/// Rescales each column of a client-by-class ratio table to sum to 1, so a
/// class's samples are fully distributed while keeping the relative skews.
pub fn normalize_columns(ratios: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = ratios.first().map(Vec::len).unwrap_or(0);
    let mut out = ratios.to_vec();
    for c in 0..k {
        let sum: f64 = ratios.iter().map(|r| r[c]).sum();
        if !(sum > 0.0) {
            return Err(Error::Partition(format!("class {c} has zero total ratio")));
        }
        for row in out.iter_mut() {
            row[c] /= sum;
        }
    }
    Ok(out)
}

fn labels_of(ds: &Dataset) -> Result<&[usize]> {
    ds.labels().ok_or_else(|| {
        Error::Partition("label-based partitions need a classification dataset".into())
    })
}

fn indices_by_class(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Deals each class's (shuffled) samples contiguously to clients according to
/// `ratios[client][class]`, with largest-remainder rounding.
pub fn partition_fixed_ratio<R: Rng + ?Sized>(
    ds: &Dataset,
    ratios: &[Vec<f64>],
    rng: &mut R,
) -> Result<Partition> {
    let labels = labels_of(ds)?;
    let k = ds.num_classes();
    let n = ratios.len();
    if n == 0 {
        return Err(Error::Partition("no clients in ratio table".into()));
    }
    for (i, row) in ratios.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Partition(format!(
                "ratio row {i} has {} entries, expected {k} classes",
                row.len()
            )));
        }
        if row.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Partition(format!(
                "ratio row {i} has a negative entry"
            )));
        }
    }
    for c in 0..k {
        let sum: f64 = ratios.iter().map(|r| r[c]).sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::Partition(format!(
                "class {c} ratios sum to {sum} > 1; normalize the columns first"
            )));
        }
    }

    let mut shards = vec![Vec::new(); n];
    for (c, mut members) in indices_by_class(labels, k).into_iter().enumerate() {
        members.shuffle(rng);
        let column: Vec<f64> = ratios.iter().map(|r| r[c]).collect();
        let mut start = 0;
        for (client, take) in apportion(members.len(), &column).into_iter().enumerate() {
            shards[client].extend_from_slice(&members[start..start + take]);
            start += take;
        }
    }
    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    let p = Partition {
        shards,
        scheme: PartitionScheme::FixedRatio,
    };
    p.validate(ds.len())?;
    Ok(p)
}

fn dirichlet_draw<R: Rng + ?Sized>(n: usize, gamma: &Gamma<f64>, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Per class, draws client proportions from Dirichlet(alpha * 1_n) and deals
/// that class's samples accordingly. A draw leaving any client empty is
/// discarded; after [`DIRICHLET_MAX_ATTEMPTS`] failures this errors.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    ds: &Dataset,
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    let labels = labels_of(ds)?;
    if n < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 clients, got {n}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Partition(format!("bad Dirichlet parameter: {e}")))?;
    let by_class = indices_by_class(labels, ds.num_classes());

    for _ in 0..DIRICHLET_MAX_ATTEMPTS {
        let mut shards = vec![Vec::new(); n];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let props = dirichlet_draw(n, &gamma, rng);
            let mut start = 0;
            for (client, take) in apportion(members.len(), &props).into_iter().enumerate() {
                shards[client].extend_from_slice(&members[start..start + take]);
                start += take;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in shards.iter_mut() {
                s.sort_unstable();
            }
            let p = Partition {
                shards,
                scheme: PartitionScheme::Dirichlet { alpha },
            };
            p.validate(ds.len())?;
            return Ok(p);
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet(alpha = {alpha}) draw gave all {n} clients data after {DIRICHLET_MAX_ATTEMPTS} attempts"
    )))
}

/// Uniform with-replacement minibatch from `shard`.
pub fn sample_minibatch<R: Rng + ?Sized>(
    ds: &Dataset,
    shard: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<DataBatch> {
    if shard.is_empty() || batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let picks: Vec<usize> = (0..batch_size)
        .map(|_| shard[rng.random_range(0..shard.len())])
        .collect();
    ds.subset(&picks)
}

/// Mean total-variation distance between each shard's label distribution and
/// the global one.
pub fn mean_label_tv_distance(ds: &Dataset, partition: &Partition) -> f64 {
    let all: Vec<usize> = (0..ds.len()).collect();
    let global = ds.class_histogram(&all);
    let m = ds.len() as f64;
    let per_client: Vec<f64> = partition
        .shards
        .iter()
        .map(|s| {
            let h = ds.class_histogram(s);
            let len = s.len() as f64;
            0.5 * h
                .iter()
                .zip(&global)
                .map(|(&a, &g)| (a as f64 / len - g as f64 / m).abs())
                .sum::<f64>()
        })
        .collect();
    per_client.iter().sum::<f64>() / per_client.len() as f64
}
