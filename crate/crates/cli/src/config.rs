//! Run configuration: a TOML file of `key = value` lines grouped in sections.
//! Every field has a default, unknown keys are rejected, and the fully
//! materialized configuration is written next to each run's outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xdistill_core::data::{load_idx, SynthSpec};
use xdistill_core::distill::{Augmentation, DistillConfig, DistillMode};
use xdistill_core::experiment::{task_data, ArchSpec, TaskData};
use xdistill_core::network::{Activation, PruneKind, PruneScheme};
use xdistill_core::prox::Regularizer;
use xdistill_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub arch: ArchSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub prune: PruneSection,
    pub augment: AugmentSection,
    pub finetune: FinetuneSection,
    pub experiment: ExperimentSection,
    pub ablation: AblationSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub bumps: usize,
    pub seed: u64,
    pub heldout_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = xdistill_core::experiment::desk_synth();
        Self {
            source: DataSource::Synth,
            classes: s.num_classes,
            per_class: s.per_class,
            channels: s.channels,
            height: s.height,
            width: s.width,
            noise: s.noise,
            max_shift: s.max_shift,
            bumps: s.bumps,
            seed: s.template_seed,
            heldout_per_class: 100,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Relu,
    Clip01,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub activation: ActivationName,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchSpec::desk();
        Self {
            channels: a.channels,
            strides: a.strides,
            kernel: a.kernel,
            activation: ActivationName::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Existing teacher for the compression commands; defaults to
    /// `<output.dir>/teacher.xdnc`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = xdistill_core::experiment::desk_teacher_training();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Nc,
    Cross,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub mode: ModeName,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Convolutions using the cross objective; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_layers: Option<Vec<usize>>,
    pub iters: usize,
    pub ramp_iters: usize,
    pub lr: f64,
    pub survivor_shrink: bool,
    /// Samples per class in the few-shot set.
    pub k: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            mode: ModeName::Nc,
            mu: 0.6,
            alpha: 0.9,
            beta: 0.3,
            cross_layers: None,
            iters: d.iters,
            ramp_iters: d.ramp_iters,
            lr: d.lr,
            survivor_shrink: d.survivor_shrink,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Unstructured,
    Structured,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerName {
    None,
    L1,
    Group,
    QuantProject,
    QuantPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub scheme: SchemeName,
    /// Target fraction of zero weights (unstructured).
    pub sparsity: f64,
    /// Per-convolution fraction of channels kept (structured).
    pub keep: Vec<f64>,
    pub skip_layers: Vec<usize>,
    pub regularizer: RegularizerName,
    pub bits: u32,
    pub strength: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Unstructured,
            sparsity: 0.9,
            keep: Vec::new(),
            skip_layers: Vec::new(),
            regularizer: RegularizerName::L1,
            bits: 2,
            strength: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub mixup: bool,
    pub crop_pad: usize,
    pub feature_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 20,
            lr: 1e-4,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Candidate cross-connection positions; every convolution when empty.
    pub positions: Vec<usize>,
    /// Largest subset size (1 = singles, 2 = pairs, 3 = triples).
    pub max_size: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            positions: Vec::new(),
            max_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub step: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::new("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The configuration with every default written out.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every knob without doing any heavy work.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new("config", m));
        if self.data.source == DataSource::Idx
            && [
                &self.data.train_images,
                &self.data.train_labels,
                &self.data.test_images,
                &self.data.test_labels,
            ]
            .iter()
            .any(|p| p.is_none())
        {
            return bad(
                "idx data needs train_images, train_labels, test_images and test_labels".into(),
            );
        }
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds must not be empty".into());
        }
        if self.distill.k == 0 {
            return bad("distill.k must be positive".into());
        }
        if !(self.sweep.step > 0.0 && self.sweep.step <= 1.0) {
            return bad(format!("sweep.step = {} outside (0, 1]", self.sweep.step));
        }
        let n = (1.0 / self.sweep.step).round();
        if (n * self.sweep.step - 1.0).abs() > 1e-9 {
            return bad(format!(
                "sweep.step = {} does not divide 1",
                self.sweep.step
            ));
        }
        if self.ablation.max_size == 0 {
            return bad("ablation.max_size must be positive".into());
        }
        let n_conv = self.arch.channels.len();
        if let Some(&l) = self
            .ablation
            .positions
            .iter()
            .chain(self.distill.cross_layers.iter().flatten())
            .chain(&self.prune.skip_layers)
            .find(|&&l| l >= n_conv)
        {
            return bad(format!(
                "layer index {l} out of range for {n_conv} convolutions"
            ));
        }
        self.arch_spec(self.data_shape_hint())?.layers()?;
        self.train_config().validate()?;
        if self.finetune.enabled {
            self.finetune_config(0).validate()?;
            if self.regularizer().bits().is_some() {
                return bad(
                    "finetune.enabled cannot be combined with a quantization regularizer".into(),
                );
            }
        }
        self.distill_config(self.distill_mode())?.validate()?;
        self.prune_scheme()?;
        Ok(())
    }

    fn data_shape_hint(&self) -> ([usize; 3], usize) {
        let d = &self.data;
        ([d.channels, d.height, d.width], d.classes)
    }

    pub fn arch_spec(&self, (input, classes): ([usize; 3], usize)) -> Result<ArchSpec, CliError> {
        Ok(ArchSpec {
            input,
            channels: self.arch.channels.clone(),
            strides: self.arch.strides.clone(),
            kernel: self.arch.kernel,
            classes,
            activation: match self.arch.activation {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Clip01 => Activation::Clip01,
            },
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let d = &self.data;
        SynthSpec {
            noise: d.noise,
            max_shift: d.max_shift,
            bumps: d.bumps,
            ..SynthSpec::new(
                d.classes,
                d.per_class,
                d.channels,
                d.height,
                d.width,
                d.seed,
            )
        }
    }

    /// Training pool and held-out set.
    pub fn task(&self) -> Result<TaskData, CliError> {
        match self.data.source {
            DataSource::Synth => Ok(task_data(&self.synth_spec(), self.data.heldout_per_class)?),
            DataSource::Idx => {
                let d = &self.data;
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                let mut train = load_idx(path(&d.train_images), path(&d.train_labels))?;
                let mut heldout = load_idx(path(&d.test_images), path(&d.test_labels))?;
                let classes = train.num_classes.max(heldout.num_classes);
                train.num_classes = classes;
                heldout.num_classes = classes;
                Ok(TaskData { train, heldout })
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.teacher.lr,
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            seed: self.teacher.seed,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.finetune.lr,
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            seed,
        }
    }

    pub fn distill_mode(&self) -> DistillMode {
        let d = &self.distill;
        match d.mode {
            ModeName::Nc => DistillMode::Nc,
            ModeName::Cross => DistillMode::Cross { mu: d.mu },
            ModeName::Soft => DistillMode::Soft {
                alpha: d.alpha,
                beta: d.beta,
            },
        }
    }

    pub fn regularizer(&self) -> Regularizer {
        let p = &self.prune;
        match p.regularizer {
            RegularizerName::None => Regularizer::None,
            RegularizerName::L1 => Regularizer::L1 {
                sparsity: p.sparsity,
            },
            RegularizerName::Group => Regularizer::Group21 {
                sparsity: p.sparsity,
            },
            RegularizerName::QuantProject => Regularizer::QuantProject { bits: p.bits },
            RegularizerName::QuantPenalty => Regularizer::QuantPenalty {
                bits: p.bits,
                strength: p.strength,
            },
        }
    }

    pub fn distill_config(&self, mode: DistillMode) -> Result<DistillConfig, CliError> {
        let d = &self.distill;
        let cfg = DistillConfig {
            mode,
            cross_layers: d
                .cross_layers
                .as_ref()
                .map(|v| v.iter().copied().collect::<BTreeSet<_>>()),
            iters: d.iters,
            ramp_iters: d.ramp_iters,
            lr: d.lr,
            regularizer: self.regularizer(),
            survivor_shrink: d.survivor_shrink,
            augment: Augmentation {
                mixup: self.augment.mixup,
                crop_pad: self.augment.crop_pad,
                feature_noise: self.augment.feature_noise,
            },
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prune_scheme(&self) -> Result<PruneScheme, CliError> {
        let p = &self.prune;
        let kind = match p.scheme {
            SchemeName::Unstructured => PruneKind::Unstructured {
                sparsity: p.sparsity,
            },
            SchemeName::Structured => PruneKind::Structured {
                keep: p.keep.clone(),
            },
            SchemeName::None => PruneKind::Unstructured { sparsity: 0.0 },
        };
        Ok(PruneScheme::new(
            kind,
            p.skip_layers.iter().copied(),
            self.arch.channels.len(),
        )?)
    }

    /// Grid `0, step, ..., 1` with exact endpoints.
    pub fn sweep_grid(&self) -> Vec<f64> {
        let n = (1.0 / self.sweep.step).round() as usize;
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher
            .model
            .clone()
            .unwrap_or_else(|| self.output.dir.join("teacher.xdnc"))
    }
}
