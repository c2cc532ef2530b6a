//! The few-shot compression protocol shared by the command line and the
//! acceptance suite: synthetic task, teacher training, K-shot compression
//! runs and their evaluation.

use crate::data::{kshot_sample, Dataset, SynthSpec};
use crate::distill::{compress_network, CompressReport, DistillConfig};
use crate::error::{invalid, Result};
use crate::network::{convnet_s, count_params_flops, Activation, LayerSpec, Network, PruneScheme};
use crate::theory::inconsistency_metrics;
use crate::trainer::{accuracy, top_k_accuracy, TrainConfig};

/// A plain convolution stack followed by a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    /// Four ReLU convolutions on 1x16x16 inputs, 10 classes.
    pub fn desk() -> Self {
        Self {
            input: [1, 16, 16],
            channels: vec![8, 8, 16, 16],
            strides: vec![1, 2, 1, 2],
            kernel: 3,
            classes: 10,
            activation: Activation::Relu,
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        let mut layers = convnet_s(
            self.input,
            &self.channels,
            &self.strides,
            self.kernel,
            self.classes,
        )?;
        for spec in layers.iter_mut().filter(|s| s.is_conv()) {
            spec.activation = self.activation;
        }
        Ok(layers)
    }
}

/// The synthetic task used at desk scale.
pub fn desk_synth() -> SynthSpec {
    SynthSpec::new(10, 500, 1, 16, 16, 7)
}

/// Distillation settings of the desk experiment: 1000 iterations per layer,
/// a 300-iteration ramp, learning rate `3e-4`.
pub fn desk_distill() -> DistillConfig {
    DistillConfig {
        iters: 1000,
        ramp_iters: 300,
        lr: 3e-4,
        ..DistillConfig::default()
    }
}

pub fn desk_teacher_training() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 10,
        batch_size: 64,
        seed: 1,
    }
}

/// Training pool and a held-out draw of the same task with `heldout_per_class`
/// samples per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub heldout: Dataset,
}

pub fn task_data(spec: &SynthSpec, heldout_per_class: usize) -> Result<TaskData> {
    let train = spec.generate()?;
    let heldout_spec = SynthSpec {
        per_class: heldout_per_class,
        sample_seed: spec.sample_seed ^ 0x00ff_00ff_00ff_00ff,
        ..spec.clone()
    };
    Ok(TaskData {
        train,
        heldout: heldout_spec.generate()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    /// Reported when there are at least five classes.
    pub top5: Option<f64>,
    pub params: usize,
    pub flops: usize,
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    let (params, flops) = count_params_flops(net, net.input_shape())?;
    Ok(Evaluation {
        top1: accuracy(net, data)?,
        top5: if net.num_classes() >= 5 {
            Some(top_k_accuracy(net, data, 5)?)
        } else {
            None
        },
        params,
        flops,
    })
}

/// One seeded compression run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub student: Network,
    pub report: CompressReport,
    pub eval: Evaluation,
    /// Estimation error of the last convolution on the held-out set.
    pub final_estimation: f64,
}

/// Samples `k` instances per class from `pool` with `seed`, compresses the
/// teacher on them (distillation also seeded with `seed`) and evaluates the
/// student on `heldout`.
#[allow(clippy::too_many_arguments)]
pub fn compress_run(
    teacher: &Network,
    pool: &Dataset,
    heldout: &Dataset,
    k: usize,
    seed: u64,
    cfg: &DistillConfig,
    scheme: &PruneScheme,
    finetune: Option<&TrainConfig>,
) -> Result<RunResult> {
    let shots = kshot_sample(pool, k, seed)?;
    let cfg = DistillConfig {
        seed,
        ..cfg.clone()
    };
    let finetune = finetune.map(|f| TrainConfig { seed, ..f.clone() });
    let (student, report) = compress_network(teacher, &shots, &cfg, scheme, finetune.as_ref())?;
    let eval = evaluate(&student, heldout)?;
    let final_estimation = inconsistency_metrics(teacher, &student, &heldout.images)?
        .last()
        .map(|m| m.estimation)
        .unwrap_or(0.0);
    Ok(RunResult {
        seed,
        student,
        report,
        eval,
        final_estimation,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("no values to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
