//! Experiment orchestration behind the command-line subcommands.
//!
//! Every command writes into its own output directory: the resolved
//! config (`config.toml`), CSV results, checkpoints and a `manifest.toml`
//! listing every artifact with its CRC32. Runs are deterministic given the
//! resolved config, so rerunning it reproduces identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{Arm, ExperimentConfig, View};
use crate::data::{gaussian_noise_inputs, subsample, Dataset};
use crate::distill::{distill_from, distill_run, init_pair, restart_round, DistillConfig, DistillOutcome, ProbePlan};
use crate::error::{Error, Result};
use crate::landscape::{eval_grid, non_local_view, orthogonalize, shared_view, slope_probe, EvalContext, Metric, Plane};
use crate::nn::{init_params, ModelState};
use crate::probe::{extract_features, knn_probe, linear_probe, raw_features};
use crate::rng::derive_seed;
use crate::supervised::{classifier_from_encoder, imp_run, lmc_experiment, pruning_rate, SupervisedConfig};

/// Environment variable naming the default output root.
pub const ENV_OUT: &str = "RTLAB_OUT";

/// Output directory: the explicit flag, then `out` from the config, then
/// `$RTLAB_OUT/<command>`, then `runs/<command>`.
pub fn resolve_out(cfg: &ExperimentConfig, flag: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out {
        return p.clone();
    }
    match std::env::var_os(ENV_OUT) {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub runs: usize,
    pub version: String,
    pub config: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: u64,
    pub crc32: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn begin(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Writes `manifest.toml` listing the files directly inside `dir`.
fn finish(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let mut artifacts = Vec::new();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.toml")
        .collect();
    names.sort();
    for name in names {
        let bytes = std::fs::read(dir.join(&name))?;
        artifacts.push(ArtifactEntry {
            file: name,
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(&bytes)),
        });
    }
    let m = Manifest {
        command: command.into(),
        seed: cfg.seed,
        runs: cfg.runs,
        version: env!("CARGO_PKG_VERSION").into(),
        config: "config.toml".into(),
        artifacts,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn save(dir: &Path, name: &str, state: &ModelState, seed: u64, step: u64) -> Result<()> {
    save_checkpoint(&dir.join(name), state, CheckpointMeta { seed, step })
}

/// Loads the configured dataset and checks it against the model input.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = cfg.data.load()?;
    let shape = train.sample_shape();
    let expected = &cfg.model.input_shape;
    let flat: usize = shape.iter().product();
    if shape != expected.as_slice() && !(expected.len() == 1 && expected[0] == flat) {
        return Err(Error::Config(format!(
            "model.input_shape {expected:?} does not match the data sample shape {shape:?}"
        )));
    }
    Ok((train, test))
}

fn probe_plan(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> ProbePlan {
    let mut epochs = cfg.probe_epochs.clone();
    epochs.push(cfg.distill.epochs);
    epochs.sort_unstable();
    epochs.dedup();
    ProbePlan {
        train: train.clone(),
        test: test.clone(),
        epochs,
        cfg: cfg.probe.clone(),
        seeds: vec![0],
    }
}

/// Linear-probe test accuracy on standardized raw pixels.
pub fn raw_accuracy(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<f64> {
    let (a, b) = raw_features(train, test)?;
    Ok(linear_probe(&a, &b, &cfg.probe, 0)?.test_accuracy)
}

fn distill_cfg(cfg: &ExperimentConfig, alpha: f64, seed: u64) -> DistillConfig {
    DistillConfig {
        alpha,
        seed,
        ..cfg.distill.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub inputs: String,
    pub alpha: f64,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub raw_accuracy: f64,
    pub gain: f64,
    pub initial_kl: f64,
    pub final_kl: f64,
}

#[derive(Serialize)]
struct EpochKlRow {
    epoch: usize,
    kl: f64,
}

fn accuracy_at(outcome: &DistillOutcome, model: &str, epoch: usize) -> Option<f64> {
    outcome
        .log
        .probes
        .iter()
        .find(|p| p.model == model && p.epoch == epoch)
        .map(|p| p.accuracy)
}

/// One distillation run with its artifacts written to `dir`.
fn distill_into(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &DistillConfig,
    inputs: &Dataset,
    label: &str,
    plan: &ProbePlan,
    raw: f64,
) -> Result<(DistillOutcome, DistillSummary)> {
    let run_cfg = ExperimentConfig {
        seed: run.seed,
        runs: 1,
        distill: run.clone(),
        ..cfg.clone()
    };
    begin(dir, &run_cfg)?;
    let (teacher, fresh) = init_pair(&cfg.model, run.seed)?;
    let out = distill_from(teacher, &fresh, run, inputs, Some(plan))?;
    let steps = out.log.steps.len().saturating_sub(1) as u64;
    save(dir, "teacher.rtlb", &out.teacher, run.seed, 0)?;
    save(dir, "fresh_init.rtlb", &fresh, derive_seed(run.seed, 1), 0)?;
    save(dir, "student_init.rtlb", &out.student_init, run.seed, 0)?;
    save(dir, "student.rtlb", &out.student, run.seed, steps)?;
    write_csv(&dir.join("runlog.csv"), &out.log.steps)?;
    let kl: Vec<EpochKlRow> = out.log.epoch_kl.iter().map(|&(epoch, kl)| EpochKlRow { epoch, kl }).collect();
    write_csv(&dir.join("epoch_kl.csv"), &kl)?;
    let mut probes = out.log.probes.clone();
    probes.push(crate::distill::ProbeRecord {
        epoch: 0,
        model: "raw_input".into(),
        accuracy: raw,
    });
    write_csv(&dir.join("probe.csv"), &probes)?;
    finish(dir, "distill", &run_cfg)?;
    let final_epoch = run.epochs;
    let teacher_accuracy = accuracy_at(&out, "teacher", 0).map_or_else(|| plan.accuracy(&out.teacher), Ok)?;
    let student_accuracy = accuracy_at(&out, "student", final_epoch).map_or_else(|| plan.accuracy(&out.student), Ok)?;
    let summary = DistillSummary {
        inputs: label.into(),
        alpha: run.alpha,
        seed: run.seed,
        teacher_accuracy,
        student_accuracy,
        raw_accuracy: raw,
        gain: student_accuracy - teacher_accuracy,
        initial_kl: out.log.initial_kl().unwrap_or(f64::NAN),
        final_kl: out.log.epoch_kl.last().map_or(f64::NAN, |e| e.1),
    };
    Ok((out, summary))
}

fn run_dir(out: &Path, alpha: f64, seed: u64) -> PathBuf {
    out.join(format!("alpha-{alpha}_seed-{seed}"))
}

/// Distillation for every configured α and seed, with scheduled probes.
pub fn cmd_distill(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DistillSummary>> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let plan = probe_plan(cfg, &train, &test);
    let raw = raw_accuracy(cfg, &train, &test)?;
    let alphas = if cfg.sweep.alphas.is_empty() {
        vec![cfg.distill.alpha]
    } else {
        cfg.sweep.alphas.clone()
    };
    let mut rows = Vec::new();
    for &alpha in &alphas {
        for seed in cfg.seeds() {
            let run = distill_cfg(cfg, alpha, seed);
            let (_, s) = distill_into(&run_dir(out, alpha, seed), cfg, &run, &train, "clean", &plan, raw)?;
            rows.push(s);
        }
    }
    write_csv(&out.join("summary.csv"), &rows)?;
    finish(out, "distill", cfg)?;
    Ok(rows)
}

/// Distillation on Gaussian-noise inputs, probed on the clean data.
pub fn cmd_noise_control(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DistillSummary>> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let plan = probe_plan(cfg, &train, &test);
    let raw = raw_accuracy(cfg, &train, &test)?;
    let mut rows = Vec::new();
    for seed in cfg.seeds() {
        let noise = gaussian_noise_inputs(train.len(), train.sample_shape(), cfg.data.noise_sigma, derive_seed(seed, 3))?;
        let run = distill_cfg(cfg, cfg.distill.alpha, seed);
        let (_, s) = distill_into(&out.join(format!("noise_seed-{seed}")), cfg, &run, &noise, "noise", &plan, raw)?;
        rows.push(s);
    }
    write_csv(&out.join("summary.csv"), &rows)?;
    finish(out, "noise-control", cfg)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_sub: usize,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
}

/// Distillation on nested training subsets; probes always use the full
/// splits.
pub fn cmd_size_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let plan = ProbePlan {
        epochs: Vec::new(),
        ..probe_plan(cfg, &train, &test)
    };
    let mut rows = Vec::new();
    for &n_sub in &cfg.sweep.sizes {
        for seed in cfg.seeds() {
            let data = subsample(&train, n_sub, derive_seed(seed, 4), cfg.sweep.stratified)?;
            let run = distill_cfg(cfg, cfg.distill.alpha, seed);
            let o = distill_run(&cfg.model, &run, &data, None)?;
            rows.push(SweepRow {
                n_sub,
                seed,
                teacher_accuracy: plan.accuracy(&o.teacher)?,
                student_accuracy: plan.accuracy(&o.student)?,
            });
        }
    }
    write_csv(&out.join("sweep.csv"), &rows)?;
    finish(out, "size-sweep", cfg)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartRow {
    pub seed: u64,
    pub round: usize,
    pub epoch: usize,
    pub kl: f64,
    pub dist_from_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub seed: u64,
    pub round: usize,
    pub initial_kl: f64,
    pub final_dist: f64,
    pub student_accuracy: f64,
}

/// Two distillation rounds; the second uses the first student as teacher.
pub fn cmd_restart(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<RestartRow>, Vec<RestartSummary>)> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let plan = ProbePlan {
        epochs: Vec::new(),
        ..probe_plan(cfg, &train, &test)
    };
    let (mut rows, mut summary) = (Vec::new(), Vec::new());
    for seed in cfg.seeds() {
        let run = distill_cfg(cfg, cfg.distill.alpha, seed);
        let r1 = distill_run(&cfg.model, &run, &train, None)?;
        let r2 = restart_round(&r1, &run, &train, None)?;
        for (round, o) in [(1, &r1), (2, &r2)] {
            rows.push(RestartRow {
                seed,
                round,
                epoch: 0,
                kl: o.log.initial_kl().unwrap_or(f64::NAN),
                dist_from_init: 0.0,
            });
            for &(epoch, kl) in &o.log.epoch_kl {
                rows.push(RestartRow {
                    seed,
                    round,
                    epoch,
                    kl,
                    dist_from_init: o.log.dist_at_epoch(epoch).unwrap_or(0.0),
                });
            }
            summary.push(RestartSummary {
                seed,
                round,
                initial_kl: o.log.initial_kl().unwrap_or(f64::NAN),
                final_dist: o.log.final_dist().unwrap_or(0.0),
                student_accuracy: plan.accuracy(&o.student)?,
            });
            save(out, &format!("round{round}_seed-{seed}.rtlb"), &o.student, seed, 0)?;
        }
    }
    write_csv(&out.join("restart.csv"), &rows)?;
    write_csv(&out.join("restart_summary.csv"), &summary)?;
    finish(out, "restart", cfg)?;
    Ok((rows, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model: String,
    pub kind: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Linear and K-NN probes of saved encoders plus the raw-input baseline.
pub fn cmd_probe(cfg: &ExperimentConfig, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<ProbeRow>> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let mut feats = vec![("raw_input".to_string(), raw_features(&train, &test)?)];
    for p in checkpoints {
        let (state, _) = load_checkpoint(p)?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        feats.push((name, (extract_features(&state, &train)?, extract_features(&state, &test)?)));
    }
    let mut rows = Vec::new();
    for (name, (a, b)) in &feats {
        for r in [linear_probe(a, b, &cfg.probe, cfg.seed)?, knn_probe(a, b, cfg.probe.knn_k)?] {
            rows.push(ProbeRow {
                model: name.clone(),
                kind: format!("{:?}", r.kind).to_lowercase(),
                train_accuracy: r.train_accuracy,
                test_accuracy: r.test_accuracy,
            });
        }
    }
    write_csv(&out.join("probe.csv"), &rows)?;
    finish(out, "probe", cfg)?;
    Ok(rows)
}

/// Anchor names a view needs, in order `(0,0)`, `(1,0)`, `(0,1)`.
pub fn view_anchors(view: View) -> [&'static str; 3] {
    match view {
        View::Shared => ["teacher", "trained_local", "trained_far"],
        View::NonLocal => ["teacher", "fresh_init", "trained_far"],
    }
}

#[derive(Serialize)]
struct GridRow {
    lambda1: f64,
    lambda2: f64,
    value: Option<f64>,
    status: &'static str,
}

#[derive(Serialize)]
struct PlaneMeta<'a> {
    view: View,
    orthogonalized: bool,
    v1_norm: f64,
    v2_norm: f64,
    cosine: f64,
    axis1: crate::landscape::Axis,
    axis2: crate::landscape::Axis,
    /// How `encoder_kl` turns embeddings into distributions, when evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder_kl: Option<&'static str>,
    anchors: Vec<AnchorMeta<'a>>,
}

#[derive(Serialize)]
struct AnchorMeta<'a> {
    name: &'a str,
    lambda1: f64,
    lambda2: f64,
    fidelity_error: f64,
}

#[derive(Debug)]
pub struct LandscapeOutcome {
    pub plane: Plane,
    pub grids: Vec<crate::landscape::LandscapeGrid>,
    pub slopes: Option<(f64, f64)>,
}

/// Builds the configured view from anchor checkpoints and evaluates the
/// configured metrics over the grid. With no anchors given, the anchors
/// are produced by distilling at `distill.alpha` and `landscape.far_alpha`
/// (both from the teacher of `seed`) and saved into `out`.
pub fn cmd_landscape(cfg: &ExperimentConfig, anchors: &BTreeMap<String, PathBuf>, out: &Path) -> Result<LandscapeOutcome> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let names = view_anchors(cfg.landscape.view);
    let states: Vec<ModelState> = if anchors.is_empty() {
        let local = distill_run(&cfg.model, &distill_cfg(cfg, cfg.distill.alpha, cfg.seed), &train, None)?;
        let far = distill_run(&cfg.model, &distill_cfg(cfg, cfg.landscape.far_alpha, cfg.seed), &train, None)?;
        let list = match cfg.landscape.view {
            View::Shared => [local.teacher, local.student, far.student],
            View::NonLocal => [far.teacher, far.student_init, far.student],
        };
        for (n, s) in names.iter().zip(&list) {
            save(out, &format!("{n}.rtlb"), s, cfg.seed, 0)?;
        }
        list.into_iter().collect()
    } else {
        if let Some(n) = names.iter().find(|n| !anchors.contains_key(**n)) {
            return Err(Error::Contract(format!("missing anchor {n} for the {:?} view", cfg.landscape.view)));
        }
        names
            .iter()
            .map(|n| load_checkpoint(&anchors[*n]).map(|c| c.0))
            .collect::<Result<Vec<_>>>()?
    };
    let (t, a, b) = (states[0].params(), states[1].params(), states[2].params());
    let mut plane = match cfg.landscape.view {
        View::Shared => shared_view(t, a, b)?,
        View::NonLocal => non_local_view(t, a, b)?,
    };
    if cfg.landscape.orthogonalize {
        plane = orthogonalize(&plane)?;
    }
    let mut ctx = EvalContext::new(&states[0], &train.inputs);
    ctx.temperature_t = cfg.distill.temperature_t;
    ctx.temperature_s = cfg.distill.temperature_s;
    ctx.probe = Some((&train, &test, cfg.probe.clone()));
    let mut grids = Vec::new();
    for &m in &cfg.landscape.metrics {
        let g = eval_grid(&plane, &cfg.landscape.axis1, &cfg.landscape.axis2, m, &ctx)?;
        let rows: Vec<GridRow> = g
            .rows()
            .map(|(lambda1, lambda2, value)| GridRow {
                lambda1,
                lambda2,
                value,
                status: if value.is_some() { "ok" } else { "failed" },
            })
            .collect();
        write_csv(&out.join(format!("grid_{}.csv", m.as_str())), &rows)?;
        grids.push(g);
    }
    let slopes = if cfg.landscape.slope_delta > 0.0 {
        let m = cfg.landscape.metrics.first().copied().unwrap_or(crate::landscape::Metric::DistillKl);
        let s = slope_probe(&plane, cfg.landscape.slope_delta, m, &ctx)?;
        #[derive(Serialize)]
        struct SlopeRow {
            metric: &'static str,
            delta: f64,
            slope_minus: f64,
            slope_plus: f64,
        }
        write_csv(
            &out.join("slope.csv"),
            &[SlopeRow {
                metric: m.as_str(),
                delta: cfg.landscape.slope_delta,
                slope_minus: s.0,
                slope_plus: s.1,
            }],
        )?;
        Some(s)
    } else {
        None
    };
    let meta = PlaneMeta {
        view: cfg.landscape.view,
        orthogonalized: plane.orthogonalized,
        v1_norm: plane.v1.norm(),
        v2_norm: plane.v2.norm(),
        cosine: plane.cosine(),
        axis1: cfg.landscape.axis1,
        axis2: cfg.landscape.axis2,
        encoder_kl: cfg
            .landscape
            .metrics
            .contains(&Metric::EncoderKl)
            .then_some("softmax over embedding dimensions at temperature 1"),
        anchors: plane
            .anchors
            .iter()
            .map(|a| AnchorMeta {
                name: &a.name,
                lambda1: a.coords.0,
                lambda2: a.coords.1,
                fidelity_error: plane.anchor_error(&a.name).unwrap_or(f64::NAN),
            })
            .collect(),
    };
    std::fs::write(
        out.join("plane.toml"),
        toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    finish(out, "landscape", cfg)?;
    Ok(LandscapeOutcome { plane, grids, slopes })
}

/// Classifier for `arm` and `seed`: the encoder is the distilled student
/// (or the checkpoint in `student`) or the random teacher it started from;
/// the head draw is shared by both arms.
pub fn arm_classifier(
    cfg: &ExperimentConfig,
    arm: Arm,
    seed: u64,
    student: Option<&ModelState>,
    train: &Dataset,
) -> Result<ModelState> {
    let head_seed = derive_seed(seed, 5);
    let encoder = match (arm, student) {
        (Arm::Random, _) => init_params(&cfg.model, seed)?,
        (Arm::Student, Some(s)) => s.clone(),
        (Arm::Student, None) => distill_run(&cfg.model, &distill_cfg(cfg, cfg.distill.alpha, seed), train, None)?.student,
    };
    classifier_from_encoder(&encoder, train.classes, head_seed)
}

fn supervised_cfg(cfg: &ExperimentConfig, ordering_seed: u64) -> SupervisedConfig {
    SupervisedConfig {
        ordering_seed,
        rewind_epochs: Vec::new(),
        ..cfg.supervised.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpRow {
    pub arm: String,
    pub seed: u64,
    pub round: usize,
    pub sparsity: f64,
    pub pruning_rate: f64,
    pub prunable: usize,
    pub pruned: usize,
    pub test_accuracy: f64,
}

#[derive(Serialize)]
struct ImpComparison {
    round: usize,
    pruning_rate: f64,
    student_mean: f64,
    random_mean: f64,
}

const IMP_META: &str = "# running statistics are rewound together with the surviving weights\nrunning_stats = \"rewound\"\nprunable = \"weight segments\"\nquantization = \"floor(k * alive) per round\"\n";

/// Iterative magnitude pruning for each configured arm and seed.
pub fn cmd_imp(cfg: &ExperimentConfig, rewind: Option<&Path>, out: &Path) -> Result<Vec<ImpRow>> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let given = rewind.map(load_checkpoint).transpose()?.map(|c| c.0);
    let mut rows = Vec::new();
    for seed in cfg.seeds() {
        for &arm in &cfg.imp.arms {
            let init = arm_classifier(cfg, arm, seed, given.as_ref(), &train)?;
            let res = imp_run(&init, cfg.imp.rounds, cfg.imp.k, &supervised_cfg(cfg, derive_seed(seed, 6)), &train, &test)?;
            for (p, m) in res.points.iter().zip(&res.masks) {
                rows.push(ImpRow {
                    arm: arm.as_str().into(),
                    seed,
                    round: p.round,
                    sparsity: p.sparsity,
                    pruning_rate: pruning_rate(cfg.imp.k, p.round as u32),
                    prunable: m.prunable_count(),
                    pruned: m.pruned_count(),
                    test_accuracy: p.test_accuracy,
                });
            }
        }
    }
    write_csv(&out.join("imp.csv"), &rows)?;
    if cfg.imp.arms.contains(&Arm::Student) && cfg.imp.arms.contains(&Arm::Random) {
        let mean = |arm: &str, round: usize| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.arm == arm && r.round == round)
                .map(|r| r.test_accuracy)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let cmp: Vec<ImpComparison> = (0..=cfg.imp.rounds)
            .map(|round| ImpComparison {
                round,
                pruning_rate: pruning_rate(cfg.imp.k, round as u32),
                student_mean: mean("student", round),
                random_mean: mean("random", round),
            })
            .collect();
        write_csv(&out.join("comparison.csv"), &cmp)?;
    }
    std::fs::write(out.join("imp_meta.toml"), IMP_META)?;
    finish(out, "imp", cfg)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierRow {
    pub arm: String,
    pub init: u64,
    pub i: usize,
    pub j: usize,
    pub barrier: f64,
    pub error_i: f64,
    pub error_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub arm: String,
    pub init: u64,
    pub i: usize,
    pub j: usize,
    pub gamma: f64,
    pub error: f64,
}

#[derive(Serialize)]
struct MeanCurveRow {
    arm: String,
    gamma: f64,
    mean: f64,
    std: f64,
}

/// Linear mode connectivity from each init (one per seed) over the
/// configured orderings, for every arm.
pub fn cmd_lmc(cfg: &ExperimentConfig, init: Option<&Path>, out: &Path) -> Result<(Vec<BarrierRow>, Vec<CurveRow>)> {
    begin(out, cfg)?;
    let (train, test) = load_data(cfg)?;
    let given = init.map(load_checkpoint).transpose()?.map(|c| c.0);
    let (mut barriers, mut curves, mut means) = (Vec::new(), Vec::new(), Vec::new());
    for &arm in &cfg.lmc.arms {
        let mut arm_curves: Vec<Vec<f64>> = Vec::new();
        let mut gammas = Vec::new();
        for seed in cfg.seeds() {
            let start = arm_classifier(cfg, arm, seed, given.as_ref(), &train)?;
            let orderings: Vec<u64> = (0..cfg.lmc.orderings as u64).map(|i| derive_seed(seed, 100 + i)).collect();
            let res = lmc_experiment(&start, &orderings, cfg.lmc.gamma_points, &supervised_cfg(cfg, 0), &train, &test)?;
            for p in &res.pairs {
                barriers.push(BarrierRow {
                    arm: arm.as_str().into(),
                    init: seed,
                    i: p.i,
                    j: p.j,
                    barrier: p.curve.barrier,
                    error_i: res.endpoint_errors[p.i],
                    error_j: res.endpoint_errors[p.j],
                });
                for (&gamma, &error) in p.curve.gammas.iter().zip(&p.curve.values) {
                    curves.push(CurveRow {
                        arm: arm.as_str().into(),
                        init: seed,
                        i: p.i,
                        j: p.j,
                        gamma,
                        error,
                    });
                }
                gammas = p.curve.gammas.clone();
                arm_curves.push(p.curve.values.clone());
            }
        }
        let n = arm_curves.len() as f64;
        for (t, &gamma) in gammas.iter().enumerate() {
            let mean = arm_curves.iter().map(|c| c[t]).sum::<f64>() / n;
            let var = arm_curves.iter().map(|c| (c[t] - mean).powi(2)).sum::<f64>() / n;
            means.push(MeanCurveRow {
                arm: arm.as_str().into(),
                gamma,
                mean,
                std: var.sqrt(),
            });
        }
    }
    write_csv(&out.join("lmc_barriers.csv"), &barriers)?;
    write_csv(&out.join("lmc_curves.csv"), &curves)?;
    write_csv(&out.join("lmc_mean.csv"), &means)?;
    finish(out, "lmc", cfg)?;
    Ok((barriers, curves))
}

/// Mean of `value` over rows satisfying `keep`.
pub fn mean_by<T>(rows: &[T], keep: impl Fn(&T) -> bool, value: impl Fn(&T) -> f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| keep(r)).map(value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}
