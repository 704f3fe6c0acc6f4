//! Experiment configuration documents.
//!
//! A config is a TOML document. Unknown keys are rejected at every level.
//! Overrides use dotted keys (`distill.alpha=0.5`); values are parsed as
//! TOML and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_binary_images, standardize_pair, synth_blobs, synth_glyphs, BinaryFormat, Dataset, GlyphParams, Split,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::landscape::{Axis, Metric};
use crate::nn::ModelSpec;
use crate::probe::ProbeConfig;
use crate::supervised::SupervisedConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Glyphs,
    Blobs,
    Idx,
    CifarBin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub glyphs: GlyphParams,
    /// Blob samples are reshaped to this shape.
    pub blob_shape: Vec<usize>,
    pub blob_classes: usize,
    pub blob_separation: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub classes: usize,
    pub downsample: usize,
    /// Standard deviation of Gaussian-noise distillation inputs.
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Glyphs,
            n_train: 1000,
            n_test: 1000,
            seed: 12345,
            glyphs: GlyphParams::default(),
            blob_shape: vec![1, 8, 8],
            blob_classes: 10,
            blob_separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            classes: 10,
            downsample: 1,
            noise_sigma: 1.0,
        }
    }
}

impl DataConfig {
    /// Train and test splits, standardized with train statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self.kind {
            DataKind::Glyphs => synth_glyphs(self.n_train + self.n_test, &self.glyphs, self.seed)?.split_at(self.n_train)?,
            DataKind::Blobs => {
                let d: usize = self.blob_shape.iter().product();
                let all = synth_blobs(self.n_train + self.n_test, d, self.blob_classes, self.blob_separation, self.seed)?;
                let mut shape = vec![all.len()];
                shape.extend(&self.blob_shape);
                let all = Dataset::new(all.inputs.reshape(shape)?, all.labels, all.classes, Split::Train)?;
                all.split_at(self.n_train)?
            }
            DataKind::Idx | DataKind::CifarBin => {
                let format = if self.kind == DataKind::Idx {
                    BinaryFormat::Idx
                } else {
                    BinaryFormat::CifarBin
                };
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("data.{what} is required for {format:?} data")))
                };
                let labels = |p: &Option<PathBuf>, what: &str| -> Result<Option<PathBuf>> {
                    if format == BinaryFormat::Idx {
                        need(p, what).map(Some)
                    } else {
                        Ok(None)
                    }
                };
                let load = |img: PathBuf, lab: Option<PathBuf>, limit: usize, split: Split| -> Result<Dataset> {
                    let mut ds = load_binary_images(&img, format, lab.as_deref(), self.classes, self.downsample)?;
                    if limit > 0 && limit < ds.len() {
                        ds = ds.select(&(0..limit).collect::<Vec<_>>());
                    }
                    ds.split = split;
                    Ok(ds)
                };
                (
                    load(need(&self.train_images, "train_images")?, labels(&self.train_labels, "train_labels")?, self.n_train, Split::Train)?,
                    load(need(&self.test_images, "test_images")?, labels(&self.test_labels, "test_labels")?, self.n_test, Split::Test)?,
                )
            }
        };
        standardize_pair(&mut train, &mut test)?;
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Shared,
    NonLocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSettings {
    pub view: View,
    pub orthogonalize: bool,
    pub axis1: Axis,
    pub axis2: Axis,
    pub metrics: Vec<Metric>,
    /// Step of the one-sided slope probe; 0 disables it.
    pub slope_delta: f64,
    /// Locality of the far student in the shared view.
    pub far_alpha: f64,
}

impl Default for LandscapeSettings {
    fn default() -> Self {
        let axis = Axis { lo: -0.5, hi: 1.5, n: 9 };
        LandscapeSettings {
            view: View::Shared,
            orthogonalize: true,
            axis1: axis,
            axis2: axis,
            metrics: vec![Metric::DistillKl],
            slope_delta: 0.0,
            far_alpha: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Rewind or start from the distilled student's encoder.
    Student,
    /// Rewind or start from the random teacher's encoder.
    Random,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Student => "student",
            Arm::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpSettings {
    pub rounds: usize,
    pub k: f64,
    pub arms: Vec<Arm>,
}

impl Default for ImpSettings {
    fn default() -> Self {
        ImpSettings {
            rounds: 3,
            k: 0.2,
            arms: vec![Arm::Student, Arm::Random],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmcSettings {
    pub orderings: usize,
    pub gamma_points: usize,
    pub arms: Vec<Arm>,
}

impl Default for LmcSettings {
    fn default() -> Self {
        LmcSettings {
            orderings: 3,
            gamma_points: 11,
            arms: vec![Arm::Student, Arm::Random],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    /// Locality values of the alpha sweep; empty runs `distill.alpha` only.
    pub alphas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub stratified: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            alphas: Vec::new(),
            sizes: vec![125, 250, 500, 1000],
            stratified: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; run `i` of a multi-run command uses `seed + i`.
    pub seed: u64,
    /// Number of seeds for multi-run commands.
    pub runs: usize,
    pub out: Option<PathBuf>,
    /// Epochs at which probes run during distillation.
    pub probe_epochs: Vec<usize>,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
    pub supervised: SupervisedConfig,
    pub landscape: LandscapeSettings,
    pub imp: ImpSettings,
    pub lmc: LmcSettings,
    pub sweep: SweepSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            runs: 1,
            out: None,
            probe_epochs: vec![0, 10, 20, 30],
            data: DataConfig::default(),
            model: ModelSpec::small_cnn([1, 8, 8]),
            distill: DistillConfig {
                epochs: 30,
                ..DistillConfig::default()
            },
            probe: ProbeConfig::default(),
            supervised: SupervisedConfig {
                epochs: 20,
                schedule: crate::optim::MultiStep {
                    base: 0.05,
                    milestones: vec![10, 15],
                    factor: 10.0,
                },
                ..SupervisedConfig::compressed()
            },
            landscape: LandscapeSettings::default(),
            imp: ImpSettings::default(),
            lmc: LmcSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` layered over the defaults, then applies dotted
    /// overrides. A partial section keeps the defaults of its other fields.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut doc = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.model.validate()?;
        self.distill.validate()?;
        self.supervised.validate()?;
        if !(self.imp.k > 0.0 && self.imp.k < 1.0) {
            return Err(Error::Config(format!("imp.k = {} outside (0, 1)", self.imp.k)));
        }
        if self.lmc.orderings < 2 || self.lmc.gamma_points < 3 {
            return Err(Error::Config("lmc needs at least 2 orderings and 3 gamma points".into()));
        }
        if self.data.noise_sigma <= 0.0 {
            return Err(Error::Config("data.noise_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Seeds of the configured runs.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}

/// Recursively overlays `top` on `base`; non-table values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let d = ExperimentConfig::default();
        let c = ExperimentConfig::from_toml("[distill]\nalpha = 0.5\n", &["supervised.epochs=18".into()]).unwrap();
        assert_eq!(c.distill.alpha, 0.5);
        assert_eq!(c.distill.epochs, d.distill.epochs);
        assert_eq!(c.supervised.epochs, 18);
        assert_eq!(c.supervised.schedule, d.supervised.schedule);
        let o = ExperimentConfig::from_toml("", &["distill.alpha=1.0".into()]).unwrap();
        assert_eq!(o.distill.epochs, d.distill.epochs);
        assert!(ExperimentConfig::from_toml("[distill]\nalpah = 0.5\n", &[]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[distill]\nalpah = 0.5", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["model.widht=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml(
            "[distill]\nalpha = 0.25",
            &["distill.epochs=3".into(), "sweep.alphas=[0.0, 1.0]".into(), "data.kind=blobs".into()],
        )
        .unwrap();
        assert_eq!(c.distill.alpha, 0.25);
        assert_eq!(c.distill.epochs, 3);
        assert_eq!(c.sweep.alphas, vec![0.0, 1.0]);
        assert_eq!(c.data.kind, DataKind::Blobs);
        assert!(ExperimentConfig::from_toml("", &["novalue".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("runs = 0", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[imp]\nk = 1.5", &[]).is_err());
    }
}
