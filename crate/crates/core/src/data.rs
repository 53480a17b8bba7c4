//! Synthetic class-prototype datasets and their training/evaluation splits.
//!
//! Classes are unit prototypes drawn uniformly on the input hypersphere;
//! each sample is its prototype plus isotropic Gaussian noise. Samples carry
//! a stable id and a split key, and every split keeps the lowest-keyed
//! samples, so a smaller fraction is always a subset of a larger one.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Upper bound on `num_classes × samples_per_class`.
pub const MAX_SAMPLES: usize = 50_000_000;

/// Id namespaces for samples of the three sets.
pub const TRAIN_ID_BASE: u64 = 0;
pub const GALLERY_ID_BASE: u64 = 1 << 40;
pub const QUERY_ID_BASE: u64 = 2 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    DataSplit,
    ClassSplit,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" | "data-split" => Ok(Self::DataSplit),
            "class" | "class-split" => Ok(Self::ClassSplit),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    /// Per-sample ordering key used to pick nested subsets.
    pub keys: Vec<u64>,
    pub prototypes: Tensor,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Labelled probe and gallery sets drawn from the training prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub queries: Tensor,
    pub query_labels: Vec<usize>,
    pub query_ids: Vec<u64>,
    pub gallery: Tensor,
    pub gallery_labels: Vec<usize>,
    pub gallery_ids: Vec<u64>,
}

fn unit_gaussian_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, dim);
    for r in 0..rows {
        loop {
            let row = t.row_slice_mut(r);
            for x in row.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                row.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
    }
    t
}

fn noisy_copy(rng: &mut impl Rng, proto: &[f64], sigma: f64, out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(proto) {
        let z: f64 = StandardNormal.sample(rng);
        *o = p + sigma * z;
    }
}

pub fn generate(params: &DataParams, seed: u64) -> Result<SyntheticDataset> {
    let DataParams {
        num_classes,
        samples_per_class,
        input_dim,
        noise_sigma,
    } = *params;
    if num_classes < 2 || samples_per_class < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes and 2 samples per class, got {num_classes}×{samples_per_class}"
        )));
    }
    if input_dim == 0 {
        return Err(Error::Config("input dimension must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma {noise_sigma} must be ≥ 0"
        )));
    }
    let total = num_classes
        .checked_mul(samples_per_class)
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or_else(|| {
            Error::Size(format!(
                "{num_classes} classes × {samples_per_class} samples exceeds {MAX_SAMPLES}"
            ))
        })?;

    let prototypes = unit_gaussian_rows(
        &mut rng::stream(seed, tags::PROTOTYPES),
        num_classes,
        input_dim,
    );
    let mut sample_rng = rng::stream(seed, tags::SAMPLES);
    let mut key_rng = rng::stream(seed, tags::SPLIT_KEYS);
    let mut inputs = Tensor::zeros(total, input_dim);
    let mut labels = Vec::with_capacity(total);
    let mut keys = Vec::with_capacity(total);
    for c in 0..num_classes {
        for s in 0..samples_per_class {
            let idx = c * samples_per_class + s;
            noisy_copy(
                &mut sample_rng,
                prototypes.row_slice(c),
                noise_sigma,
                inputs.row_slice_mut(idx),
            );
            labels.push(c);
            keys.push(key_rng.random::<u64>());
        }
    }
    Ok(SyntheticDataset {
        inputs,
        labels,
        ids: (0..total as u64).map(|i| TRAIN_ID_BASE + i).collect(),
        keys,
        prototypes,
        num_classes,
        noise_sigma,
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    fn subset(&self, mut keep: Vec<usize>, num_classes: usize) -> Self {
        keep.sort_unstable();
        Self {
            inputs: self.inputs.select_rows(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            keys: keep.iter().map(|&i| self.keys[i]).collect(),
            prototypes: self.prototypes.clone(),
            num_classes,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    /// Training allocation of the given fraction.
    ///
    /// Data-split keeps `⌊f·n_c⌋` lowest-keyed samples of every class.
    /// Class-split keeps the classes `0..⌊f·C⌋` whole; labels stay in place
    /// so an old classifier's rows line up with the same classes later.
    pub fn split(&self, mode: SplitMode, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Split(format!("fraction {fraction} outside (0, 1]")));
        }
        match mode {
            SplitMode::DataSplit => {
                let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
                for (i, &y) in self.labels.iter().enumerate() {
                    per_class[y].push(i);
                }
                let mut keep = Vec::new();
                for (c, mut members) in per_class.into_iter().enumerate() {
                    let n = (fraction * members.len() as f64).floor() as usize;
                    if n == 0 {
                        return Err(Error::Split(format!(
                            "data-split {fraction} leaves class {c} without samples"
                        )));
                    }
                    members.sort_by_key(|&i| (self.keys[i], i));
                    keep.extend_from_slice(&members[..n]);
                }
                Ok(self.subset(keep, self.num_classes))
            }
            SplitMode::ClassSplit => {
                let k = (fraction * self.num_classes as f64).floor() as usize;
                if k == 0 {
                    return Err(Error::Split(format!(
                        "class-split {fraction} of {} classes keeps none",
                        self.num_classes
                    )));
                }
                let keep = (0..self.len()).filter(|&i| self.labels[i] < k).collect();
                Ok(self.subset(keep, k))
            }
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        DatasetManifest {
            num_classes: self.num_classes,
            num_samples: self.len(),
            samples_per_class_max: counts.iter().copied().max().unwrap_or(0),
            input_dim: self.input_dim(),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub num_samples: usize,
    pub samples_per_class_max: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Query labels cycle over classes; the gallery holds `gallery_per_class`
/// items of every class.
pub fn make_eval_set(
    prototypes: &Tensor,
    num_queries: usize,
    gallery_per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<EvalSet> {
    let num_classes = prototypes.rows();
    if gallery_per_class == 0 {
        return Err(Error::Retrieval(
            "every query class needs at least one gallery item".into(),
        ));
    }
    if num_classes == 0 || num_queries == 0 {
        return Err(Error::Config("eval set needs classes and queries".into()));
    }
    let dim = prototypes.cols();
    let mut q_rng = rng::stream(seed, tags::QUERIES);
    let mut queries = Tensor::zeros(num_queries, dim);
    let mut query_labels = Vec::with_capacity(num_queries);
    for i in 0..num_queries {
        let c = i % num_classes;
        noisy_copy(
            &mut q_rng,
            prototypes.row_slice(c),
            noise_sigma,
            queries.row_slice_mut(i),
        );
        query_labels.push(c);
    }
    let mut g_rng = rng::stream(seed, tags::GALLERY);
    let total = num_classes * gallery_per_class;
    let mut gallery = Tensor::zeros(total, dim);
    let mut gallery_labels = Vec::with_capacity(total);
    for c in 0..num_classes {
        for s in 0..gallery_per_class {
            let idx = c * gallery_per_class + s;
            noisy_copy(
                &mut g_rng,
                prototypes.row_slice(c),
                noise_sigma,
                gallery.row_slice_mut(idx),
            );
            gallery_labels.push(c);
        }
    }
    Ok(EvalSet {
        queries,
        query_labels,
        query_ids: (0..num_queries as u64).map(|i| QUERY_ID_BASE + i).collect(),
        gallery,
        gallery_labels,
        gallery_ids: (0..total as u64).map(|i| GALLERY_ID_BASE + i).collect(),
    })
}

/// Fraction of samples whose nearest prototype (Euclidean) is their own.
pub fn nearest_prototype_accuracy(ds: &SyntheticDataset) -> f64 {
    let mut correct = 0usize;
    for (x, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
        let best = ds
            .prototypes
            .iter_rows()
            .enumerate()
            .map(|(c, p)| {
                (
                    c,
                    x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                )
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c);
        if best == Some(y) {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}
