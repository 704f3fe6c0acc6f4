//! Datasets: synthetic generators, binary image formats, subsampling and
//! augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel (images) or per-feature (vectors) standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits statistics on `inputs`: per channel for `[n, C, H, W]`,
    /// per feature for `[n, d]`.
    pub fn fit(inputs: &Tensor) -> Result<Self> {
        let (groups, inner) = group_view(inputs)?;
        let n = inputs.dim(0);
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; groups];
        let mut sq = vec![0.0; groups];
        for sample in inputs.data().chunks_exact(groups * inner) {
            for (c, chunk) in sample.chunks_exact(inner).enumerate() {
                mean[c] += chunk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for sample in inputs.data().chunks_exact(groups * inner) {
            for (c, chunk) in sample.chunks_exact(inner).enumerate() {
                sq[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(1e-8)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, inputs: &Tensor) -> Result<Tensor> {
        let (groups, inner) = group_view(inputs)?;
        if groups != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer for {} groups applied to {:?}",
                self.mean.len(),
                inputs.shape()
            )));
        }
        let mut out = inputs.clone();
        for sample in out.data_mut().chunks_exact_mut(groups * inner) {
            for (c, chunk) in sample.chunks_exact_mut(inner).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
            }
        }
        Ok(out)
    }
}

fn group_view(inputs: &Tensor) -> Result<(usize, usize)> {
    match inputs.rank() {
        2 => Ok((inputs.dim(1), 1)),
        4 => Ok((inputs.dim(1), inputs.dim(2) * inputs.dim(3))),
        _ => Err(Error::Shape(format!("dataset inputs {:?}", inputs.shape()))),
    }
}

/// Labelled inputs `[n, …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() < 2 || inputs.dim(0) != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} outside {classes} classes")));
        }
        inputs.ensure_finite("dataset inputs")?;
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.inputs.rank() == 4
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Splits off the first `n_train` samples as the train split.
    pub fn split_at(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::Domain(format!("cannot split {} samples at {n_train}", self.len())));
        }
        let all: Vec<usize> = (0..self.len()).collect();
        let mut train = self.select(&all[..n_train]);
        let mut test = self.select(&all[n_train..]);
        train.split = Split::Train;
        test.split = Split::Test;
        Ok((train, test))
    }

    /// Standardizes with statistics fitted on `self` and returns them.
    pub fn standardize(&mut self) -> Result<Standardizer> {
        let s = Standardizer::fit(&self.inputs)?;
        self.inputs = s.apply(&self.inputs)?;
        self.standardizer = Some(s.clone());
        Ok(s)
    }

    pub fn standardize_with(&mut self, s: &Standardizer) -> Result<()> {
        self.inputs = s.apply(&self.inputs)?;
        self.standardizer = Some(s.clone());
        Ok(())
    }

    /// Inputs flattened to `[n, numel]`.
    pub fn flat_inputs(&self) -> Tensor {
        let n = self.len();
        let per = self.inputs.len() / n.max(1);
        self.inputs.clone().reshape([n, per]).expect("same element count")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Standardizes `train` and applies the same statistics to `test`.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<()> {
    let s = train.standardize()?;
    test.standardize_with(&s)
}

/// `k` Gaussian clusters with unit covariance whose means are pairwise
/// `separation` apart (simplex corners when `k ≤ d`, otherwise random
/// directions of the same norm). Labels are balanced and shuffled.
pub fn synth_blobs(n: usize, d: usize, k: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::Domain(format!("synth_blobs needs n ≥ k ≥ 2 and d ≥ 1 (n={n}, k={k}, d={d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / 2f64.sqrt();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if k <= d {
                (0..d).map(|j| if j == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        for mu in &means[l] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + z);
        }
    }
    Dataset::new(Tensor::new([n, d], data)?, labels, k, Split::Train)
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Parameters of [`synth_glyphs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphParams {
    /// Canvas side length (at least 7).
    pub side: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Probability of dropping each stroke pixel.
    pub dropout: f64,
    /// Random placement on the canvas; centered when false.
    pub jitter: bool,
}

impl Default for GlyphParams {
    fn default() -> Self {
        GlyphParams {
            side: 8,
            noise: 0.2,
            dropout: 0.1,
            jitter: true,
        }
    }
}

/// Ten-class digit images drawn from a 5×7 bitmap font: each sample is a
/// glyph at a random offset with stroke dropout, a random amplitude in
/// [0.6, 1.4] and additive Gaussian noise. Labels cycle through 0..9.
pub fn synth_glyphs(n: usize, p: &GlyphParams, seed: u64) -> Result<Dataset> {
    if p.side < 7 || n == 0 {
        return Err(Error::Domain(format!("synth_glyphs needs side ≥ 7 and n ≥ 1 (side={})", p.side)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = p.side;
    let mut data = vec![0.0; n * s * s];
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for (i, img) in data.chunks_exact_mut(s * s).enumerate() {
        let (ox, oy) = if p.jitter {
            (rng.random_range(0..=s - 5), rng.random_range(0..=s - 7))
        } else {
            ((s - 5) / 2, (s - 7) / 2)
        };
        let amp = rng.random_range(0.6..1.4);
        for (r, row) in GLYPHS[labels[i]].iter().enumerate() {
            for (c, bit) in row.bytes().enumerate() {
                let keep = rng.random::<f64>() >= p.dropout;
                if bit == b'1' && keep {
                    img[(oy + r) * s + ox + c] = amp;
                }
            }
        }
    }
    if p.noise > 0.0 {
        for v in data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += p.noise * z;
        }
    }
    Dataset::new(Tensor::new([n, 1, s, s], data)?, labels, 10, Split::Train)
}

/// I.i.d. `N(0, σ²)` inputs of per-sample `shape`; labels are all zero.
pub fn gaussian_noise_inputs(n: usize, shape: &[usize], sigma: f64, seed: u64) -> Result<Dataset> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise sigma must be positive, got {sigma}")));
    }
    if n == 0 || shape.is_empty() {
        return Err(Error::Domain("noise dataset needs n ≥ 1 and a sample shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let data = (0..n * per)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    let full = [&[n][..], shape].concat();
    Dataset::new(Tensor::new(full, data)?, vec![0; n], 1, Split::Train)
}

/// Uniform subsample without replacement. With `stratified`, every class
/// receives its proportional share (largest remainders, ties to lower
/// class ids).
pub fn subsample(ds: &Dataset, n_sub: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if n_sub == 0 {
        return Err(Error::Domain("subsample size must be positive".into()));
    }
    if n_sub > ds.len() {
        return Err(Error::Domain(format!("cannot draw {n_sub} of {} samples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = if stratified {
        let counts = ds.class_counts();
        let n = ds.len() as f64;
        let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * n_sub as f64 / n).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let mut missing = n_sub - quota.iter().sum::<usize>();
        for &c in order.iter().cycle().take(order.len() * 2) {
            if missing == 0 {
                break;
            }
            if quota[c] < counts[c] {
                quota[c] += 1;
                missing -= 1;
            }
        }
        let mut out = Vec::with_capacity(n_sub);
        for (c, &q) in quota.iter().enumerate() {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            out.extend_from_slice(&idx[..q]);
        }
        out
    } else {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_sub);
        idx
    };
    picked.shuffle(&mut rng);
    Ok(ds.select(&picked))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryFormat {
    Idx,
    CifarBin,
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, ParseError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(ParseError::Truncated {
            missing: at + 4 - bytes.len().min(at + 4),
        })
}

/// Parses IDX image (magic 0x803) and label (magic 0x801) buffers into
/// `[n, 1, H, W]` inputs with values in [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != 0x0803 {
        return Err(ParseError::BadMagic {
            expected: 0x0803,
            found: magic,
        }
        .into());
    }
    let (n, h, w) = (be_u32(images, 4)? as usize, be_u32(images, 8)? as usize, be_u32(images, 12)? as usize);
    if n == 0 || h == 0 || w == 0 {
        return Err(ParseError::Geometry(format!("{n} images of {h}×{w}")).into());
    }
    let need = 16 + n * h * w;
    if images.len() < need {
        return Err(ParseError::Truncated {
            missing: need - images.len(),
        }
        .into());
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != 0x0801 {
        return Err(ParseError::BadMagic {
            expected: 0x0801,
            found: lmagic,
        }
        .into());
    }
    let ln = be_u32(labels, 4)? as usize;
    if ln != n {
        return Err(ParseError::Geometry(format!("{ln} labels for {n} images")).into());
    }
    if labels.len() < 8 + n {
        return Err(ParseError::Truncated {
            missing: 8 + n - labels.len(),
        }
        .into());
    }
    let mut ys = Vec::with_capacity(n);
    for &b in &labels[8..8 + n] {
        if b as usize >= classes {
            return Err(ParseError::LabelOutOfRange { label: b, classes }.into());
        }
        ys.push(b as usize);
    }
    let data = images[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(Tensor::new([n, 1, h, w], data)?, ys, classes, Split::Train)
}

/// Parses CIFAR binary records (1 label byte + 3×32×32 pixel bytes).
pub fn parse_cifar(bytes: &[u8], classes: usize) -> Result<Dataset> {
    const REC: usize = 1 + 3072;
    if bytes.is_empty() {
        return Err(ParseError::Truncated { missing: REC }.into());
    }
    if bytes.len() % REC != 0 {
        return Err(ParseError::Truncated {
            missing: REC - bytes.len() % REC,
        }
        .into());
    }
    let n = bytes.len() / REC;
    let mut ys = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(REC) {
        if rec[0] as usize >= classes {
            return Err(ParseError::LabelOutOfRange { label: rec[0], classes }.into());
        }
        ys.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor::new([n, 3, 32, 32], data)?, ys, classes, Split::Train)
}

/// Average-pools images by an integer `factor` (trailing rows/columns that
/// do not fill a window are dropped).
pub fn downsample(ds: &Dataset, factor: usize) -> Result<Dataset> {
    if !ds.is_image() {
        return Err(Error::Contract("downsampling needs image inputs".into()));
    }
    if factor <= 1 {
        return Ok(ds.clone());
    }
    let s = ds.inputs.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::Domain(format!("factor {factor} larger than {h}×{w} images")));
    }
    let src = ds.inputs.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let scale = 1.0 / (factor * factor) as f64;
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[plane * h * w + (y * factor + dy) * w + x * factor + dx];
                    }
                }
                out[plane * oh * ow + y * ow + x] = acc * scale;
            }
        }
    }
    let mut d = ds.clone();
    d.inputs = Tensor::new([n, c, oh, ow], out)?;
    Ok(d)
}

/// Loads an image file. IDX needs the companion label file in `labels`.
/// Pixels are scaled to [0, 1]; standardization is left to the caller so
/// that train statistics can be shared with the test split.
pub fn load_binary_images(
    path: &Path,
    format: BinaryFormat,
    labels: Option<&Path>,
    classes: usize,
    downsample_factor: usize,
) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let ds = match format {
        BinaryFormat::Idx => {
            let lpath = labels.ok_or_else(|| Error::Config("idx images need a label file".into()))?;
            parse_idx(&bytes, &std::fs::read(lpath)?, classes)?
        }
        BinaryFormat::CifarBin => parse_cifar(&bytes, classes)?,
    };
    downsample(&ds, downsample_factor)
}

/// One image's augmentation draw: horizontal flip and crop offset into
/// the 4-pixel zero-padded canvas (`(4, 4)` is the identity crop).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

pub const PAD: usize = 4;

/// Applies the given per-image transforms to an `[n, C, H, W]` batch.
pub fn apply_crop_flip(batch: &Tensor, draws: &[CropFlip]) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::Contract(format!("augmentation needs images, got {:?}", batch.shape())));
    }
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if draws.len() != n {
        return Err(Error::Shape(format!("{} draws for {n} images", draws.len())));
    }
    let mut out = vec![0.0; batch.len()];
    let src = batch.data();
    for (i, d) in draws.iter().enumerate() {
        if d.dy > 2 * PAD || d.dx > 2 * PAD {
            return Err(Error::Domain(format!("crop offset {:?} outside padding", (d.dy, d.dx))));
        }
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = (y + d.dy) as isize - PAD as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let cx = (x + d.dx) as isize - PAD as isize;
                    if cx < 0 || cx >= w as isize {
                        continue;
                    }
                    let sx = if d.flip { w - 1 - cx as usize } else { cx as usize };
                    out[base + y * w + x] = src[base + sy as usize * w + sx];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Random flip (p = 0.5) and padded 4-pixel crop, deterministic per
/// `(seed, step)`.
pub fn augment(batch: &Tensor, seed: u64, step: u64) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::Contract(format!("augmentation needs images, got {:?}", batch.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let draws: Vec<CropFlip> = (0..batch.dim(0))
        .map(|_| CropFlip {
            flip: rng.random::<bool>(),
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
        })
        .collect();
    apply_crop_flip(batch, &draws)
}
