//! Supervised SGD training, iterative magnitude pruning and linear mode
//! connectivity.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::landscape::{path_barrier, PathCurve, CALIBRATION_BATCH};
use crate::nn::{init_params, ModelSpec, ModelState, ParamVector, SegmentTag};
use crate::optim::{sgd_step, MultiStep, SgdState};
use crate::probe::argmax;
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    FlipPadcrop4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: MultiStep,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augmentation: Augmentation,
    /// Seed of the batch ordering π.
    pub ordering_seed: u64,
    pub rewind_epochs: Vec<usize>,
    /// Record eval-mode training accuracy before training and after each
    /// epoch.
    pub track_train_accuracy: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 160,
            batch_size: 128,
            schedule: MultiStep {
                base: 0.1,
                milestones: vec![80, 120],
                factor: 10.0,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            augmentation: Augmentation::None,
            ordering_seed: 0,
            rewind_epochs: vec![0, 1, 2, 5],
            track_train_accuracy: false,
        }
    }
}

impl SupervisedConfig {
    /// The default recipe compressed to 40 epochs with drops at 20 and 30.
    pub fn compressed() -> Self {
        SupervisedConfig {
            epochs: 40,
            schedule: MultiStep {
                base: 0.1,
                milestones: vec![20, 30],
                factor: 10.0,
            },
            ..SupervisedConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.epochs)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.schedule.base >= 0.0 && self.schedule.factor > 0.0) {
            return Err(Error::Config("learning rate must be nonnegative and factor positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub state: ModelState,
    pub checkpoints: Vec<(usize, ModelState)>,
    /// `(epoch, accuracy)` pairs when tracking is enabled.
    pub train_accuracy: Vec<(usize, f64)>,
}

/// Fraction of `data` classified correctly in eval mode.
pub fn accuracy(state: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + 512).min(data.len());
        let out = state.forward_eval(&data.inputs.slice_outer(start, end))?;
        correct += out
            .rows()
            .zip(&data.labels[start..end])
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// SGD on label cross-entropy. With a mask, masked coordinates are zeroed
/// before the first step and stay exactly zero.
pub fn supervised_train(
    init: &ModelState,
    cfg: &SupervisedConfig,
    data: &Dataset,
    mask: Option<&PruneMask>,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if init.spec().classes.is_none() {
        return Err(Error::Contract("supervised training needs a classifier head".into()));
    }
    if data.is_empty() {
        return Err(Error::Domain("supervised training needs a nonempty dataset".into()));
    }
    let mut state = init.clone();
    if let Some(m) = mask {
        m.apply(state.params_mut())?;
    }
    let keep = mask.map(|m| m.keep.as_slice());
    let mut sgd = SgdState::new(state.params(), cfg.momentum, cfg.weight_decay);
    let aug_seed = derive_seed(cfg.ordering_seed, 7);
    let mut out = SupervisedOutcome {
        state: state.clone(),
        checkpoints: Vec::new(),
        train_accuracy: Vec::new(),
    };
    if cfg.rewind_epochs.contains(&0) {
        out.checkpoints.push((0, state.clone()));
    }
    if cfg.track_train_accuracy {
        out.train_accuracy.push((0, accuracy(&state, data)?));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.ordering_seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if state.has_batch_norm() && chunk.len() < 2 {
                continue;
            }
            let mut xb = data.inputs.gather_outer(chunk);
            if cfg.augmentation == Augmentation::FlipPadcrop4 {
                xb = augment(&xb, aug_seed, step as u64)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            step += 1;
            let mut g = Graph::new();
            let tr = state.trace(&mut g, &xb, true)?;
            let loss = g.label_cross_entropy(tr.output.expect("head traced"), &labels)?;
            let value = g.value(loss).item();
            let diverged = |reason: String| Error::Diverged {
                step,
                reason,
                last_good: Box::new(state.params().clone()),
            };
            if !value.is_finite() {
                return Err(diverged(format!("loss {value}")));
            }
            let grads = g.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let grad = tr.gradient(&grads, state.layout())?;
            let mut next = state.params().clone();
            sgd_step(&mut next, &grad, &mut sgd, lr, keep).map_err(|e| diverged(e.to_string()))?;
            state.set_params(next)?;
            state.update_running_stats(&tr.batch_stats)?;
        }
        let done = epoch + 1;
        if cfg.rewind_epochs.contains(&done) {
            out.checkpoints.push((done, state.clone()));
        }
        if cfg.track_train_accuracy {
            out.train_accuracy.push((done, accuracy(&state, data)?));
        }
    }
    out.state = state;
    Ok(out)
}

/// Classifier whose encoder (parameters and running statistics) is taken
/// from `encoder` and whose head is drawn from `head_seed`.
pub fn classifier_from_encoder(encoder: &ModelState, classes: usize, head_seed: u64) -> Result<ModelState> {
    let spec = encoder.spec().classifier(classes);
    let mut state = init_params(&spec, head_seed)?;
    state.params_mut().transplant(encoder.params(), "enc.")?;
    state.set_stats(encoder.stats().to_vec())?;
    Ok(state)
}

/// Randomly initialized classifier.
pub fn random_classifier(spec: &ModelSpec, classes: usize, seed: u64) -> Result<ModelState> {
    init_params(&spec.classifier(classes), seed)
}

/// `Σ_{i<r} (1−k)^i·k = 1 − (1−k)^r`
pub fn pruning_rate(k: f64, r: u32) -> f64 {
    1.0 - (1.0 - k).powi(r as i32)
}

/// Keep flags aligned with a parameter layout. Only weight segments are
/// prunable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub prunable: Vec<bool>,
    pub round: usize,
}

impl PruneMask {
    pub fn new(params: &ParamVector) -> Self {
        let mut prunable = vec![false; params.len()];
        for seg in params.layout().segments() {
            if seg.tag == SegmentTag::Weight {
                prunable[seg.range()].fill(true);
            }
        }
        PruneMask {
            keep: vec![true; params.len()],
            prunable,
            round: 0,
        }
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable.iter().filter(|&&p| p).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Pruned fraction of the prunable entries.
    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.prunable_count().max(1) as f64
    }

    /// Zeroes masked coordinates.
    pub fn apply(&self, params: &mut ParamVector) -> Result<()> {
        if params.len() != self.keep.len() {
            return Err(Error::Layout("mask length differs from parameters".into()));
        }
        for (p, &k) in params.values_mut().iter_mut().zip(&self.keep) {
            if !k {
                *p = 0.0;
            }
        }
        Ok(())
    }
}

/// Prunes `⌊k·n⌋` of the `n` surviving prunable entries with the smallest
/// magnitude, lowest index first among ties.
pub fn global_magnitude_prune(theta: &ParamVector, mask: &PruneMask, k: f64) -> Result<PruneMask> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Domain(format!("prune fraction {k} outside (0, 1)")));
    }
    if theta.len() != mask.keep.len() {
        return Err(Error::Layout("mask length differs from parameters".into()));
    }
    let v = theta.values();
    let mut alive: Vec<usize> = (0..v.len()).filter(|&i| mask.prunable[i] && mask.keep[i]).collect();
    if alive.is_empty() {
        return Err(Error::Domain("every prunable weight is already pruned".into()));
    }
    let count = (k * alive.len() as f64 + 1e-9).floor() as usize;
    alive.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(a.cmp(&b)));
    let mut next = mask.clone();
    for &i in &alive[..count] {
        next.keep[i] = false;
    }
    next.round += 1;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpPoint {
    pub round: usize,
    pub sparsity: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ImpOutcome {
    pub points: Vec<ImpPoint>,
    pub masks: Vec<PruneMask>,
}

/// Trains densely from `rewind`, then `rounds` times prunes a fraction `k`
/// globally, rewinds surviving weights (and running statistics) to
/// `rewind` and retrains.
pub fn imp_run(
    rewind: &ModelState,
    rounds: usize,
    k: f64,
    cfg: &SupervisedConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ImpOutcome> {
    let mut mask = PruneMask::new(rewind.params());
    let mut out = ImpOutcome {
        points: Vec::new(),
        masks: Vec::new(),
    };
    let mut state = rewind.clone();
    for round in 0..=rounds {
        let trained = supervised_train(&state, cfg, train, Some(&mask))?;
        out.points.push(ImpPoint {
            round,
            sparsity: mask.sparsity(),
            test_accuracy: accuracy(&trained.state, test)?,
        });
        out.masks.push(mask.clone());
        if round == rounds {
            break;
        }
        mask = global_magnitude_prune(trained.state.params(), &mask, k)?;
        state = rewind.clone();
        mask.apply(state.params_mut())?;
    }
    Ok(out)
}

/// Test error of `params` in the architecture of `template`, with running
/// statistics recalibrated on `train` when the model uses batch norm.
pub fn calibrated_error(template: &ModelState, params: &ParamVector, train: &Dataset, test: &Dataset) -> Result<f64> {
    let mut s = template.clone();
    s.set_params(params.clone())?;
    s.recalibrate(&train.inputs, CALIBRATION_BATCH)?;
    Ok(1.0 - accuracy(&s, test)?)
}

#[derive(Clone, Debug)]
pub struct LmcPair {
    pub i: usize,
    pub j: usize,
    /// Values are test errors along `γθ*_i + (1−γ)θ*_j`.
    pub curve: PathCurve,
}

#[derive(Clone, Debug)]
pub struct LmcResult {
    pub orderings: Vec<u64>,
    pub endpoint_errors: Vec<f64>,
    pub pairs: Vec<LmcPair>,
}

impl LmcResult {
    pub fn mean_barrier(&self) -> f64 {
        self.pairs.iter().map(|p| p.curve.barrier).sum::<f64>() / self.pairs.len() as f64
    }

    /// Pointwise mean and standard deviation of the pair curves.
    pub fn mean_curve(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.pairs.len() as f64;
        let len = self.pairs[0].curve.values.len();
        let mean: Vec<f64> = (0..len)
            .map(|t| self.pairs.iter().map(|p| p.curve.values[t]).sum::<f64>() / n)
            .collect();
        let std = (0..len)
            .map(|t| {
                let v = self.pairs.iter().map(|p| (p.curve.values[t] - mean[t]).powi(2)).sum::<f64>() / n;
                v.sqrt()
            })
            .collect();
        (mean, std)
    }
}

/// Trains one run per ordering from `init` and measures the barrier of
/// every pair of solutions.
pub fn lmc_experiment(
    init: &ModelState,
    orderings: &[u64],
    gamma_points: usize,
    cfg: &SupervisedConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<LmcResult> {
    if orderings.len() < 2 {
        return Err(Error::Domain("linear mode connectivity needs at least two orderings".into()));
    }
    let mut solutions = Vec::with_capacity(orderings.len());
    for &pi in orderings {
        let c = SupervisedConfig {
            ordering_seed: pi,
            rewind_epochs: Vec::new(),
            ..cfg.clone()
        };
        solutions.push(supervised_train(init, &c, train, None)?.state);
    }
    let endpoint_errors = solutions
        .iter()
        .map(|s| calibrated_error(init, s.params(), train, test))
        .collect::<Result<Vec<f64>>>()?;
    let mut pairs = Vec::new();
    for i in 0..solutions.len() {
        for j in i + 1..solutions.len() {
            let curve = path_barrier(solutions[i].params(), solutions[j].params(), gamma_points, |p| {
                calibrated_error(init, p, train, test)
            })?;
            pairs.push(LmcPair { i, j, curve });
        }
    }
    Ok(LmcResult {
        orderings: orderings.to_vec(),
        endpoint_errors,
        pairs,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layout;
    use std::sync::Arc;

    fn weights(v: &[f64]) -> ParamVector {
        let mut l = Layout::new();
        l.push("w", vec![v.len()], SegmentTag::Weight);
        ParamVector::new(Arc::new(l), v.to_vec()).unwrap()
    }

    #[test]
    fn rates() {
        assert!((pruning_rate(0.2, 1) - 0.2).abs() < 1e-10);
        assert!((pruning_rate(0.2, 2) - 0.36).abs() < 1e-10);
        assert!((pruning_rate(0.2, 3) - 0.488).abs() < 1e-10);
        assert_eq!(pruning_rate(0.2, 0), 0.0);
    }

    #[test]
    fn hand_prune() {
        let t = weights(&[0.1, -0.5, 0.3, -0.05]);
        let m = global_magnitude_prune(&t, &PruneMask::new(&t), 0.5).unwrap();
        assert_eq!(m.keep, vec![false, true, true, false]);
        let eq = weights(&[1.0; 4]);
        let m = global_magnitude_prune(&eq, &PruneMask::new(&eq), 0.5).unwrap();
        assert_eq!(m.keep, vec![false, false, true, true]);
    }

    #[test]
    fn two_rounds_prune_36_of_100() {
        let t = weights(&(0..100).map(|i| i as f64 * 0.37 % 1.0).collect::<Vec<_>>());
        let m1 = global_magnitude_prune(&t, &PruneMask::new(&t), 0.2).unwrap();
        let m2 = global_magnitude_prune(&t, &m1, 0.2).unwrap();
        assert_eq!((m1.pruned_count(), m2.pruned_count()), (20, 36));
        assert_eq!(m2.round, 2);
    }

    #[test]
    fn biases_are_never_prunable() {
        let mut l = Layout::new();
        l.push("w", vec![2], SegmentTag::Weight);
        l.push("b", vec![2], SegmentTag::Bias);
        l.push("g", vec![2], SegmentTag::Norm);
        let p = ParamVector::new(Arc::new(l), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = PruneMask::new(&p);
        assert_eq!(m.prunable_count(), 2);
        let m = global_magnitude_prune(&p, &m, 0.5).unwrap();
        assert_eq!(m.keep, vec![false, true, true, true, true, true]);
        let m = global_magnitude_prune(&p, &m, 0.5).unwrap();
        assert_eq!(m.pruned_count(), 1);
        let all = PruneMask {
            keep: vec![false, false, true, true, true, true],
            ..m
        };
        assert!(matches!(global_magnitude_prune(&p, &all, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn compressed_schedule_validates() {
        SupervisedConfig::compressed().validate().unwrap();
        let bad = SupervisedConfig {
            epochs: 10,
            ..SupervisedConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
