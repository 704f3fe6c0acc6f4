//! Distillation from a frozen random teacher into an α-local student.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph};
use crate::nn::{init_params, ModelSpec, ModelState, Mode, ParamVector};
use crate::ops::{self, LOG_EPS};
use crate::optim::{adam_step, AdamState};
use crate::probe::{extract_features, mean_linear_probe, FeatureMatrix, ProbeConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::Tensor;

/// Rows per forward call when evaluating over a whole dataset.
const EVAL_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature_t: f64,
    pub temperature_s: f64,
    pub ema_gamma: f64,
    pub loss_kind: LossKind,
    pub teacher_mode: Mode,
    pub student_mode: Mode,
    pub seed: u64,
    /// Epochs at which the student is kept as a checkpoint.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1e-10,
            lr: 1e-3,
            epochs: 20,
            batch_size: 256,
            temperature_t: 1.0,
            temperature_s: 1.0,
            ema_gamma: 0.0,
            loss_kind: LossKind::CrossEntropy,
            teacher_mode: Mode::Eval,
            student_mode: Mode::Train,
            seed: 0,
            checkpoint_epochs: Vec::new(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !unit(self.ema_gamma) {
            return Err(Error::Config(format!("ema_gamma {} outside [0, 1]", self.ema_gamma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for t in [self.temperature_t, self.temperature_s] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        Ok(())
    }
}

/// `((1−α)θ_T + αθ̃)/√(α² + (1−α)²)`
pub fn alpha_init(theta_t: &ParamVector, theta_fresh: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let delta = (alpha * alpha + (1.0 - alpha) * (1.0 - alpha)).sqrt();
    theta_t.lincomb((1.0 - alpha) / delta, theta_fresh, alpha / delta)
}

/// Per-sample mean cross-entropy between teacher and student distributions
/// and the matching KL divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub cross_entropy: f64,
    pub kl: f64,
}

pub fn distill_loss(teacher_logits: &Tensor, student_logits: &Tensor, cfg: &DistillConfig) -> Result<LossReport> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let t = ops::softmax(teacher_logits, cfg.temperature_t)?;
    let s = ops::softmax(student_logits, cfg.temperature_s)?;
    let n = t.dim(0).max(1) as f64;
    let ce = ops::cross_entropy(&t, &s)? / n;
    Ok(LossReport {
        cross_entropy: ce,
        kl: ce - ops::entropy(&t) / n,
    })
}

/// Outputs of `state` over all of `inputs` in eval mode.
pub fn eval_outputs(state: &ModelState, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.dim(0);
    let mut data = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        data.extend(state.forward_eval(&inputs.slice_outer(start, end))?.into_data());
        start = end;
    }
    let m = data.len() / n.max(1);
    Tensor::new([n, m], data)
}

/// Mean KL(teacher ‖ student) over `inputs`, both in eval mode.
pub fn eval_kl(teacher: &ModelState, student: &ModelState, inputs: &Tensor, cfg: &DistillConfig) -> Result<f64> {
    let t = ops::softmax(&eval_outputs(teacher, inputs)?, cfg.temperature_t)?;
    kl_to_targets(&t, student, inputs, cfg)
}

/// Mean KL(targets ‖ student) with precomputed teacher probabilities.
pub fn kl_to_targets(targets: &Tensor, student: &ModelState, inputs: &Tensor, cfg: &DistillConfig) -> Result<f64> {
    let s = ops::softmax(&eval_outputs(student, inputs)?, cfg.temperature_s)?;
    ops::mean_kl(targets, &s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub dist_from_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub model: String,
    pub accuracy: f64,
}

/// Training trace. Step 0 is an evaluation of the initial student against
/// the teacher on the full training inputs with both in eval mode; later
/// steps report the training-batch loss and KL.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Eval-mode KL to the teacher on the full training inputs after each
    /// epoch, `(epoch, kl)`.
    pub epoch_kl: Vec<(usize, f64)>,
    pub probes: Vec<ProbeRecord>,
    pub checkpoints: Vec<(usize, ModelState)>,
}

impl RunLog {
    pub fn initial_kl(&self) -> Option<f64> {
        self.steps.first().map(|s| s.kl)
    }

    pub fn final_dist(&self) -> Option<f64> {
        self.steps.last().map(|s| s.dist_from_init)
    }

    /// Distance from init at the end of `epoch` (1-based epoch count).
    pub fn dist_at_epoch(&self, epoch: usize) -> Option<f64> {
        self.steps.iter().rev().find(|s| s.epoch < epoch).map(|s| s.dist_from_init)
    }
}

/// Linear-probe evaluation scheduled during distillation.
#[derive(Clone, Debug)]
pub struct ProbePlan {
    pub train: Dataset,
    pub test: Dataset,
    pub epochs: Vec<usize>,
    pub cfg: ProbeConfig,
    pub seeds: Vec<u64>,
}

impl ProbePlan {
    pub fn accuracy(&self, state: &ModelState) -> Result<f64> {
        let (a, b) = self.features(state)?;
        mean_linear_probe(&a, &b, &self.cfg, &self.seeds)
    }

    pub fn features(&self, state: &ModelState) -> Result<(FeatureMatrix, FeatureMatrix)> {
        Ok((extract_features(state, &self.train)?, extract_features(state, &self.test)?))
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub teacher: ModelState,
    pub student_init: ModelState,
    pub student: ModelState,
    pub log: RunLog,
}

/// Initial teacher and fresh draw for `seed`: the teacher comes from the
/// run seed itself, the fresh draw from a derived sub-seed.
pub fn init_pair(spec: &ModelSpec, seed: u64) -> Result<(ModelState, ModelState)> {
    Ok((init_params(spec, seed)?, init_params(spec, derive_seed(seed, 1))?))
}

/// Teacher probabilities for one batch, in the teacher's own mode.
pub fn teacher_targets(teacher: &ModelState, xb: &Tensor, cfg: &DistillConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let tr = teacher.trace(&mut g, xb, false)?;
    ops::softmax(g.value(tr.output.expect("head traced")), cfg.temperature_t)
}

/// Loss terms of one batch and the student's parameter gradient.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Per-sample mean cross-entropy.
    pub cross_entropy: f64,
    /// Per-sample mean entropy of the targets.
    pub entropy: f64,
    pub grad: ParamVector,
    pub batch_stats: Vec<BatchStats>,
}

/// Gradient of the configured loss for `student` on `xb` against teacher
/// probabilities `target`. The KL loss differs from cross-entropy by the
/// constant target entropy.
pub fn batch_gradient(student: &ModelState, xb: &Tensor, target: &Tensor, cfg: &DistillConfig) -> Result<BatchGradient> {
    let b = xb.dim(0) as f64;
    let mut g = Graph::new();
    let tr = student.trace(&mut g, xb, true)?;
    let pred = g.softmax(tr.output.expect("head traced"), cfg.temperature_s)?;
    let ce = g.cross_entropy(target, pred, LOG_EPS)?;
    let ce = g.scale(ce, 1.0 / b);
    let entropy = ops::entropy(target) / b;
    let loss = match cfg.loss_kind {
        LossKind::CrossEntropy => ce,
        LossKind::Kl => {
            let h = g.constant(Tensor::scalar(-entropy));
            g.add(ce, h)?
        }
    };
    let cross_entropy = g.value(ce).item();
    if !cross_entropy.is_finite() {
        return Err(Error::NonFinite(format!("loss {cross_entropy}")));
    }
    let grads = g.backward(loss)?;
    Ok(BatchGradient {
        cross_entropy,
        entropy,
        grad: tr.gradient(&grads, student.layout())?,
        batch_stats: tr.batch_stats,
    })
}

/// Full distillation run from a freshly initialized teacher.
pub fn distill_run(spec: &ModelSpec, cfg: &DistillConfig, data: &Dataset, probe: Option<&ProbePlan>) -> Result<DistillOutcome> {
    let (teacher, fresh) = init_pair(spec, cfg.seed)?;
    distill_from(teacher, &fresh, cfg, data, probe)
}

/// Second round: the trained student becomes the teacher and a new
/// α-local student is drawn around it.
pub fn restart_round(prev: &DistillOutcome, cfg: &DistillConfig, data: &Dataset, probe: Option<&ProbePlan>) -> Result<DistillOutcome> {
    let fresh = init_params(prev.student.spec(), derive_seed(cfg.seed, 2))?;
    distill_from(prev.student.clone(), &fresh, cfg, data, probe)
}

/// Distills into `alpha_init(teacher, fresh, α)`. The student starts with
/// the teacher's running statistics.
pub fn distill_from(
    mut teacher: ModelState,
    fresh: &ModelState,
    cfg: &DistillConfig,
    data: &Dataset,
    probe: Option<&ProbePlan>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("distillation needs a nonempty dataset".into()));
    }
    teacher.set_mode(cfg.teacher_mode);
    let mut student = teacher.clone();
    student.set_params(alpha_init(teacher.params(), fresh.params(), cfg.alpha)?)?;
    student.set_mode(cfg.student_mode);
    let student_init = student.clone();
    let theta0 = student_init.params().clone();

    let inputs = &data.inputs;
    let n = data.len();
    let frozen = cfg.ema_gamma == 0.0;
    let eval_targets = ops::softmax(&eval_outputs(&teacher, inputs)?, cfg.temperature_t)?;
    let cached_targets = (frozen && cfg.teacher_mode == Mode::Eval).then(|| eval_targets.clone());
    let mut log = RunLog::default();
    log.steps.push(StepRecord {
        step: 0,
        epoch: 0,
        loss: f64::NAN,
        kl: kl_to_targets(&eval_targets, &student, inputs, cfg)?,
        dist_from_init: 0.0,
    });
    log.steps[0].loss = log.steps[0].kl;
    if let Some(p) = probe {
        if p.epochs.contains(&0) {
            log.probes.push(ProbeRecord {
                epoch: 0,
                model: "teacher".into(),
                accuracy: p.accuracy(&teacher)?,
            });
            log.probes.push(ProbeRecord {
                epoch: 0,
                model: "student".into(),
                accuracy: p.accuracy(&student)?,
            });
        }
    }
    if cfg.checkpoint_epochs.contains(&0) {
        log.checkpoints.push((0, student.clone()));
    }

    let mut adam = AdamState::new(student.params());
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.student_mode == Mode::Train && student.has_batch_norm() && chunk.len() < 2 {
                continue;
            }
            let xb = inputs.gather_outer(chunk);
            let target = match &cached_targets {
                Some(t) => t.gather_outer(chunk),
                None => teacher_targets(&teacher, &xb, cfg)?,
            };
            step += 1;
            let bg = batch_gradient(&student, &xb, &target, cfg).map_err(|e| Error::Diverged {
                step,
                reason: e.to_string(),
                last_good: Box::new(student.params().clone()),
            })?;
            let (ce_value, entropy, grad) = (bg.cross_entropy, bg.entropy, bg.grad);
            let mut next = student.params().clone();
            adam_step(&mut next, &grad, &mut adam, cfg.lr)?;
            student.set_params(next)?;
            if cfg.student_mode == Mode::Train {
                student.update_running_stats(&bg.batch_stats)?;
            }
            if !frozen {
                let blended = teacher.params().lincomb(1.0 - cfg.ema_gamma, student.params(), cfg.ema_gamma)?;
                teacher.set_params(blended)?;
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: ce_value,
                kl: ce_value - entropy,
                dist_from_init: student.params().distance(&theta0)?,
            });
        }
        let done = epoch + 1;
        let kl = if frozen {
            kl_to_targets(&eval_targets, &student, inputs, cfg)?
        } else {
            eval_kl(&teacher, &student, inputs, cfg)?
        };
        log.epoch_kl.push((done, kl));
        if let Some(p) = probe {
            if p.epochs.contains(&done) {
                log.probes.push(ProbeRecord {
                    epoch: done,
                    model: "student".into(),
                    accuracy: p.accuracy(&student)?,
                });
            }
        }
        if cfg.checkpoint_epochs.contains(&done) {
            log.checkpoints.push((done, student.clone()));
        }
    }
    Ok(DistillOutcome {
        teacher,
        student_init,
        student,
        log,
    })
}
