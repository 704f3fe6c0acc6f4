//! Linear and K-NN probes on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Layout, ModelState, ParamVector, SegmentTag};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Tensor;

/// Rows evaluated per encoder call during feature extraction.
pub const EXTRACT_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Encoder,
    RawInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: FeatureSource,
}

impl FeatureMatrix {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, source: FeatureSource) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} outside {classes} classes")));
        }
        features.ensure_finite("features")?;
        Ok(FeatureMatrix {
            features,
            labels,
            classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }
}

/// Encoder embeddings of every sample, computed in eval mode.
pub fn extract_features(state: &ModelState, ds: &Dataset) -> Result<FeatureMatrix> {
    let n = ds.len();
    let mut data = Vec::with_capacity(n * state.spec().embed_dim);
    let mut start = 0;
    while start < n {
        let end = (start + EXTRACT_BATCH).min(n);
        data.extend(state.encode_eval(&ds.inputs.slice_outer(start, end))?.into_data());
        start = end;
    }
    let features = Tensor::new([n, state.spec().embed_dim], data)?;
    FeatureMatrix::new(features, ds.labels.clone(), ds.classes, FeatureSource::Encoder)
}

/// Flattened inputs standardized per feature with `train` statistics.
pub fn raw_features(train: &Dataset, test: &Dataset) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (xtr, xte) = (train.flat_inputs(), test.flat_inputs());
    let s = Standardizer::fit(&xtr)?;
    Ok((
        FeatureMatrix::new(s.apply(&xtr)?, train.labels.clone(), train.classes, FeatureSource::RawInput)?,
        FeatureMatrix::new(s.apply(&xte)?, test.labels.clone(), test.classes, FeatureSource::RawInput)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
}

/// Feature preprocessing applied before the linear probe, fitted on the
/// train split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    None,
    /// Subtract the mean feature and divide by one global scale so the
    /// average squared feature is 1 (rotation-equivariant).
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scaling: FeatureScaling,
    pub knn_k: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            scaling: FeatureScaling::Global,
            knn_k: 20,
        }
    }
}

fn scale_features(train: &Tensor, test: &Tensor, scaling: FeatureScaling) -> (Tensor, Tensor) {
    if scaling == FeatureScaling::None {
        return (train.clone(), test.clone());
    }
    let (n, d) = (train.dim(0), train.dim(1));
    let mut mean = vec![0.0; d];
    for row in train.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = train
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    let scale = (ss / (n * d) as f64).sqrt().max(1e-12);
    let f = |t: &Tensor| {
        let mut o = t.clone();
        for row in o.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v = (*v - m) / scale);
        }
        o
    };
    (f(train), f(test))
}

fn accuracy(x: &Tensor, labels: &[usize], w: &[f64], b: &[f64], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let (n, d) = (x.dim(0), x.dim(1));
    let mut logits = vec![0.0; n * k];
    for row in logits.chunks_exact_mut(k) {
        row.copy_from_slice(b);
    }
    kernels::gemm_nn(n, d, k, x.data(), w, &mut logits);
    let correct = logits
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / n as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on frozen features, zero-initialized
/// and trained with Adam on shuffled minibatches (`seed` drives only the
/// shuffling).
pub fn linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("train dim {} vs test dim {}", train.dim(), test.dim())));
    }
    if train.is_empty() {
        return Err(Error::Degenerate("empty probe train set".into()));
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(Error::Degenerate("probe train set has a single class".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be positive".into()));
    }
    let k = train.classes.max(test.classes);
    let d = train.dim();
    let (xtr, xte) = scale_features(&train.features, &test.features, cfg.scaling);
    let mut layout = Layout::new();
    layout.push("w", vec![d, k], SegmentTag::Weight);
    layout.push("b", vec![k], SegmentTag::Bias);
    let layout = std::sync::Arc::new(layout);
    let mut params = ParamVector::zeros(layout.clone());
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = ParamVector::zeros(layout);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xtr.gather_outer(chunk);
            let bsz = chunk.len();
            let (w, b) = params.values().split_at(d * k);
            let mut p = vec![0.0; bsz * k];
            for row in p.chunks_exact_mut(k) {
                row.copy_from_slice(b);
            }
            kernels::gemm_nn(bsz, d, k, xb.data(), w, &mut p);
            for (row, &i) in p.chunks_exact_mut(k).zip(chunk) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                row.iter_mut().for_each(|v| {
                    *v = (*v - mx).exp();
                    z += *v;
                });
                row.iter_mut().for_each(|v| *v /= z);
                row[train.labels[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v /= bsz as f64);
            }
            let g = grad.values_mut();
            g.fill(0.0);
            let (gw, gb) = g.split_at_mut(d * k);
            kernels::gemm_tn(d, bsz, k, xb.data(), &p, gw);
            for row in p.chunks_exact(k) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            adam_step(&mut params, &grad, &mut adam, cfg.lr)?;
        }
    }
    let (w, b) = params.values().split_at(d * k);
    Ok(ProbeResult {
        kind: ProbeKind::Linear,
        train_accuracy: accuracy(&xtr, &train.labels, w, b, k),
        test_accuracy: accuracy(&xte, &test.labels, w, b, k),
        seed,
        epochs: Some(cfg.epochs),
        k: None,
    })
}

fn knn_predict(train: &FeatureMatrix, query: &[f64], k: usize, classes: usize) -> usize {
    let mut dist: Vec<(f64, usize)> = train
        .features
        .rows()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; classes];
    let mut sums = vec![0.0; classes];
    for &(dd, i) in &dist[..k] {
        votes[train.labels[i]] += 1;
        sums[train.labels[i]] += dd;
    }
    let mut best = 0;
    for c in 1..classes {
        let better = votes[c] > votes[best] || (votes[c] == votes[best] && sums[c] < sums[best]);
        if better {
            best = c;
        }
    }
    best
}

fn knn_accuracy(train: &FeatureMatrix, eval: &FeatureMatrix, k: usize, classes: usize) -> f64 {
    if eval.is_empty() {
        return 0.0;
    }
    let rows: Vec<&[f64]> = eval.features.rows().collect();
    let correct: usize = rows
        .par_iter()
        .zip(eval.labels.par_iter())
        .map(|(q, &y)| usize::from(knn_predict(train, q, k, classes) == y))
        .sum();
    correct as f64 / eval.len() as f64
}

/// Euclidean K-nearest-neighbour majority vote. Vote ties go to the class
/// with the smallest summed distance, then to the lowest label.
pub fn knn_probe(train: &FeatureMatrix, test: &FeatureMatrix, k: usize) -> Result<ProbeResult> {
    if k == 0 || k > train.len() {
        return Err(Error::Domain(format!("K={k} with {} training points", train.len())));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("train dim {} vs test dim {}", train.dim(), test.dim())));
    }
    let classes = train.classes.max(test.classes);
    Ok(ProbeResult {
        kind: ProbeKind::Knn,
        train_accuracy: knn_accuracy(train, train, k, classes),
        test_accuracy: knn_accuracy(train, test, k, classes),
        seed: 0,
        epochs: None,
        k: Some(k),
    })
}

/// Mean test accuracy of linear probes over `seeds`.
pub fn mean_linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig, seeds: &[u64]) -> Result<f64> {
    let mut acc = 0.0;
    for &s in seeds {
        acc += linear_probe(train, test, cfg, s)?.test_accuracy;
    }
    Ok(acc / seeds.len().max(1) as f64)
}
