//! Teacher to student construction and weight masks.

use std::collections::BTreeSet;

use super::{LayerKind, LayerSpec, Network, Role};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum PruneKind {
    /// Per-convolution fraction of output channels kept; missing entries keep all.
    Structured { keep: Vec<f64> },
    /// Target fraction of zero weights in every non-skipped convolution.
    Unstructured { sparsity: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneScheme {
    pub kind: PruneKind,
    skip_layers: BTreeSet<usize>,
}

impl PruneScheme {
    /// The classifier index is always added to the skip set.
    pub fn new(
        kind: PruneKind,
        skip_layers: impl IntoIterator<Item = usize>,
        classifier: usize,
    ) -> Result<Self> {
        match &kind {
            PruneKind::Structured { keep } => {
                if let Some(f) = keep.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                    return Err(invalid(format!("keep fraction {f} outside (0, 1]")));
                }
            }
            PruneKind::Unstructured { sparsity } => {
                if !(0.0..1.0).contains(sparsity) {
                    return Err(invalid(format!("sparsity {sparsity} outside [0, 1)")));
                }
            }
        }
        let mut skip: BTreeSet<usize> = skip_layers.into_iter().collect();
        skip.insert(classifier);
        Ok(Self {
            kind,
            skip_layers: skip,
        })
    }

    pub fn unstructured(sparsity: f64, net: &Network) -> Result<Self> {
        Self::new(
            PruneKind::Unstructured { sparsity },
            [],
            net.classifier_index(),
        )
    }

    pub fn structured(keep: Vec<f64>, net: &Network) -> Result<Self> {
        Self::new(PruneKind::Structured { keep }, [], net.classifier_index())
    }

    /// Keeps everything; useful for quantization-only runs.
    pub fn identity(net: &Network) -> Self {
        Self::unstructured(0.0, net).expect("zero sparsity is valid")
    }

    pub fn skip_layers(&self) -> &BTreeSet<usize> {
        &self.skip_layers
    }

    pub fn is_skipped(&self, layer: usize) -> bool {
        self.skip_layers.contains(&layer)
    }

    /// Sparsity target for a layer (zero for skipped layers and structured schemes).
    pub fn layer_sparsity(&self, layer: usize) -> f64 {
        match self.kind {
            PruneKind::Unstructured { sparsity } if !self.is_skipped(layer) => sparsity,
            _ => 0.0,
        }
    }
}

/// Per-layer binary masks congruent with the weights: 0 pruned, 1 kept.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    masks: Vec<Tensor>,
}

impl WeightMask {
    pub fn ones(net: &Network) -> Self {
        Self {
            masks: net
                .weights()
                .iter()
                .map(|w| Tensor::full(w.shape(), 1.0))
                .collect(),
        }
    }

    /// Mask of the current nonzero pattern.
    pub fn from_nonzero(net: &Network) -> Self {
        Self {
            masks: net
                .weights()
                .iter()
                .map(|w| w.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
                .collect(),
        }
    }

    pub fn new(masks: Vec<Tensor>) -> Result<Self> {
        if masks
            .iter()
            .any(|m| m.data().iter().any(|&v| v != 0.0 && v != 1.0))
        {
            return Err(invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { masks })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.masks[l]
    }

    pub fn set_layer(&mut self, l: usize, mask: Tensor) -> Result<()> {
        if mask.shape() != self.masks[l].shape() {
            return Err(shape_err(format!("mask for layer {l} changed shape")));
        }
        self.masks[l] = mask;
        Ok(())
    }

    pub fn check_congruent(&self, net: &Network) -> Result<()> {
        if self.masks.len() != net.num_layers()
            || self
                .masks
                .iter()
                .zip(net.weights())
                .any(|(m, w)| m.shape() != w.shape())
        {
            return Err(shape_err("mask is not congruent with the network weights"));
        }
        Ok(())
    }

    /// Zeroes masked weights in place.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        self.check_congruent(net)?;
        for (l, m) in self.masks.iter().enumerate() {
            if m.data().iter().all(|&v| v == 1.0) {
                continue;
            }
            let w = net.weights()[l].zip_map(m, |w, m| if m == 0.0 { 0.0 } else { w })?;
            net.set_weights(l, w)?;
        }
        Ok(())
    }

    /// Zeroes masked entries of a gradient (or any weight-congruent tensor).
    pub fn apply_to(&self, layer: usize, t: &mut Tensor) {
        let m = &self.masks[layer];
        for (v, &keep) in t.data_mut().iter_mut().zip(m.data()) {
            if keep == 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn kept(&self) -> usize {
        self.masks.iter().map(|m| m.count_nonzero()).sum()
    }
}

/// L1 norm of each output-channel slice of a kernel.
pub(crate) fn channel_l1(kernel: &Tensor) -> Vec<f64> {
    let per = kernel.sample_len();
    (0..kernel.n())
        .map(|o| {
            kernel.data()[o * per..(o + 1) * per]
                .iter()
                .map(|v| v.abs())
                .sum()
        })
        .collect()
}

/// Channels to keep: the `count` largest L1 norms, lower index first on ties,
/// returned in ascending index order.
pub(crate) fn select_channels(norms: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(count).collect();
    kept.sort_unstable();
    kept
}

/// Builds the student network and its initial mask.
///
/// Structured schemes remove the output channels with the smallest kernel L1
/// norms and drop the matching input channels of the next layer, yielding a
/// physically smaller network whose `channel_origin` records the surviving
/// teacher channels. The convolution feeding the classifier cannot lose
/// channels since the classifier is shared with the teacher. Unstructured
/// schemes copy the teacher; sparsity is imposed later during distillation.
pub fn build_student(teacher: &Network, scheme: &PruneScheme) -> Result<(Network, WeightMask)> {
    let keep = match &scheme.kind {
        PruneKind::Unstructured { .. } => {
            let student = teacher.clone().with_role(Role::Student);
            let mask = WeightMask::ones(&student);
            return Ok((student, mask));
        }
        PruneKind::Structured { keep } => keep,
    };
    let n_conv = teacher.num_conv();
    if keep.len() > n_conv {
        return Err(invalid(format!(
            "{} keep fractions for {n_conv} convolutions",
            keep.len()
        )));
    }

    let mut kept_out: Vec<Vec<usize>> = Vec::with_capacity(n_conv);
    for l in 0..n_conv {
        let w = &teacher.weights()[l];
        let c_out = w.n();
        let frac = if scheme.is_skipped(l) {
            1.0
        } else {
            keep.get(l).copied().unwrap_or(1.0)
        };
        if l == n_conv - 1 && frac < 1.0 {
            return Err(invalid(format!(
                "layer {l} feeds the shared classifier and cannot lose channels"
            )));
        }
        let count = ((frac * c_out as f64).floor() as usize).max(1);
        if count == c_out {
            kept_out.push((0..c_out).collect());
        } else {
            kept_out.push(select_channels(&channel_l1(w), count));
        }
    }

    let mut layers = Vec::with_capacity(teacher.num_layers());
    let mut weights = Vec::with_capacity(teacher.num_layers());
    let mut kept_in: Vec<usize> = (0..teacher.input_shape()[0]).collect();
    for l in 0..n_conv {
        let spec = teacher.layers()[l];
        let LayerKind::Conv { k, stride, pad, .. } = spec.kind else {
            unreachable!("validated");
        };
        let w = teacher.weights()[l]
            .select_samples(&kept_out[l])
            .select_channels(&kept_in);
        layers.push(LayerSpec {
            kind: LayerKind::Conv {
                c_in: kept_in.len(),
                c_out: kept_out[l].len(),
                k,
                stride,
                pad,
            },
            activation: spec.activation,
        });
        weights.push(w);
        kept_in = kept_out[l].clone();
    }
    let cls = teacher.classifier_index();
    layers.push(teacher.layers()[cls]);
    weights.push(teacher.weights()[cls].clone());

    let student = Network::new(
        teacher.input_shape(),
        layers,
        weights,
        teacher.bias().to_vec(),
        Role::Student,
    )?
    .with_channel_origin(Some(kept_out))?;
    let mask = WeightMask::ones(&student);
    Ok((student, mask))
}
