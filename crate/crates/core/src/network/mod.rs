//! Plain convolutional networks: a stack of convolutions followed by one
//! linear classifier.
//!
//! Convolutions carry no bias; the classifier carries a bias vector. The
//! classifier consumes the last feature map flattened in `(c, h, w)` order.

mod format;
mod prune;

pub use format::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use prune::{build_student, PruneKind, PruneScheme, WeightMask};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{conv2d_gemm, im2col, output_extent, ConvGeometry, Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// ReLU followed by clamping to 1, i.e. activations bounded in `[0, 1]`.
    Clip01,
    None,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Clip01 => v.clamp(0.0, 1.0),
            Activation::None => v,
        }
    }

    /// Derivative at a pre-activation value; kinks take the zero branch.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Clip01 => {
                if v > 0.0 && v < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }

    pub fn apply_tensor(self, t: &Tensor) -> Tensor {
        match self {
            Activation::None => t.clone(),
            act => t.map(|v| act.apply(v)),
        }
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Clip01 => "clip01",
            Activation::None => "none",
        }
    }

    pub(crate) fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "clip01" => Some(Activation::Clip01),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        d_in: usize,
        d_out: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
            },
            activation: Activation::Relu,
        }
    }

    pub fn linear(d_in: usize, d_out: usize) -> Self {
        Self {
            kind: LayerKind::Linear { d_in, d_out },
            activation: Activation::None,
        }
    }

    /// Shape of the weight tensor; linear weights are stored as `(d_out, d_in, 1, 1)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv { c_in, c_out, k, .. } => [c_out, c_in, k, k],
            LayerKind::Linear { d_in, d_out } => [d_out, d_in, 1, 1],
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match self.kind {
            LayerKind::Conv { k, stride, pad, .. } => Some(ConvGeometry::new(k, stride, pad)),
            LayerKind::Linear { .. } => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Layer specifications plus weights.
///
/// `channel_origin`, when present, lists for every convolution which teacher
/// output channels this network's output channels correspond to (set for
/// physically pruned students).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    weights: Vec<Tensor>,
    bias: Vec<f64>,
    role: Role,
    channel_origin: Option<Vec<Vec<usize>>>,
}

/// All hidden feature maps of a forward pass plus the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `h_1 .. h_L`, post-activation outputs of every convolution.
    pub maps: Vec<Tensor>,
    /// `(n, classes)` logits.
    pub logits: Matrix,
}

impl Network {
    pub fn new(
        input: [usize; 3],
        layers: Vec<LayerSpec>,
        weights: Vec<Tensor>,
        bias: Vec<f64>,
        role: Role,
    ) -> Result<Self> {
        let net = Self {
            input,
            layers,
            weights,
            bias,
            role,
            channel_origin: None,
        };
        net.validate()?;
        Ok(net)
    }

    /// Kaiming-normal initialization (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn init(input: [usize; 3], layers: Vec<LayerSpec>, role: Role, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layers
            .iter()
            .map(|spec| {
                let shape = spec.weight_shape();
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                    .map_err(|e| invalid(format!("initializer: {e}")))?;
                let n: usize = shape.iter().product();
                Ok(Tensor::from_parts(
                    shape,
                    (0..n).map(|_| normal.sample(&mut rng)).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = match layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Linear { d_out, .. },
                ..
            }) => *d_out,
            _ => 0,
        };
        Self::new(input, layers, weights, vec![0.0; classes], role)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(shape_err(
                "network needs at least one convolution and a classifier",
            ));
        }
        if self.weights.len() != self.layers.len() {
            return Err(shape_err(format!(
                "{} layer specs but {} weight tensors",
                self.layers.len(),
                self.weights.len()
            )));
        }
        let [mut c, mut h, mut w] = self.input;
        let last = self.layers.len() - 1;
        for (i, (spec, wt)) in self.layers.iter().zip(&self.weights).enumerate() {
            if wt.shape() != spec.weight_shape() {
                return Err(shape_err(format!(
                    "layer {i}: weights {:?} but spec needs {:?}",
                    wt.shape(),
                    spec.weight_shape()
                )));
            }
            match spec.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    if i == last {
                        return Err(shape_err("the final layer must be a linear classifier"));
                    }
                    if c_in != c {
                        return Err(shape_err(format!(
                            "layer {i}: expects {c_in} input channels, previous layer gives {c}"
                        )));
                    }
                    if spec.activation == Activation::None {
                        return Err(invalid(format!(
                            "layer {i}: convolutions need an activation"
                        )));
                    }
                    h = output_extent(h, k, stride, pad)?;
                    w = output_extent(w, k, stride, pad)?;
                    c = c_out;
                }
                LayerKind::Linear { d_in, d_out } => {
                    if i != last {
                        return Err(shape_err(format!(
                            "layer {i}: linear layers are only supported as the final classifier"
                        )));
                    }
                    if d_in != c * h * w {
                        return Err(shape_err(format!(
                            "classifier expects {d_in} inputs, flattened features have {}",
                            c * h * w
                        )));
                    }
                    if spec.activation != Activation::None {
                        return Err(invalid("the classifier must not have an activation"));
                    }
                    if self.bias.len() != d_out {
                        return Err(shape_err(format!(
                            "classifier bias has {} entries, expected {d_out}",
                            self.bias.len()
                        )));
                    }
                }
            }
        }
        if self
            .weights
            .iter()
            .any(|t| t.data().iter().any(|v| !v.is_finite()))
            || self.bias.iter().any(|v| !v.is_finite())
        {
            return Err(invalid("network contains non-finite weights"));
        }
        if let Some(origin) = &self.channel_origin {
            if origin.len() != self.num_conv() {
                return Err(shape_err("channel origin needs one entry per convolution"));
            }
            for (l, o) in origin.iter().enumerate() {
                if o.len() != self.weights[l].n() {
                    return Err(shape_err(format!(
                        "layer {l}: channel origin lists {} channels, layer has {}",
                        o.len(),
                        self.weights[l].n()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn channel_origin(&self) -> Option<&[Vec<usize>]> {
        self.channel_origin.as_deref()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_conv(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Replaces one layer's weights, keeping the shape.
    pub fn set_weights(&mut self, layer: usize, w: Tensor) -> Result<()> {
        let expected = self
            .layers
            .get(layer)
            .ok_or_else(|| invalid(format!("no layer {layer}")))?
            .weight_shape();
        if w.shape() != expected {
            return Err(shape_err(format!(
                "layer {layer}: replacement weights {:?}, expected {expected:?}",
                w.shape()
            )));
        }
        if w.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {layer} weights")));
        }
        self.weights[layer] = w;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Vec<f64>) -> Result<()> {
        if bias.len() != self.bias.len() {
            return Err(shape_err("bias length changed"));
        }
        self.bias = bias;
        Ok(())
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub(crate) fn with_channel_origin(mut self, origin: Option<Vec<Vec<usize>>>) -> Result<Self> {
        self.channel_origin = origin;
        self.validate()?;
        Ok(self)
    }

    /// Spatial `(c, h, w)` of the input to every layer, ending with the shape fed to the classifier.
    pub fn feature_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = vec![self.input];
        let [_, mut h, mut w] = self.input;
        for spec in &self.layers {
            if let LayerKind::Conv {
                c_out,
                k,
                stride,
                pad,
                ..
            } = spec.kind
            {
                h = output_extent(h, k, stride, pad).expect("validated");
                w = output_extent(w, k, stride, pad).expect("validated");
                shapes.push([c_out, h, w]);
            }
        }
        shapes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input {
            return Err(shape_err(format!(
                "input {:?} does not match network input {:?}",
                [c, h, w],
                self.input
            )));
        }
        Ok(())
    }

    /// Pre-activation output of convolution `layer` on `h_prev`.
    pub fn conv_pre(&self, layer: usize, h_prev: &Tensor) -> Result<Tensor> {
        let geom = self.layers[layer]
            .geometry()
            .ok_or_else(|| invalid(format!("layer {layer} is not a convolution")))?;
        let cols = im2col(h_prev, geom.k, geom.stride, geom.pad)?;
        conv2d_gemm(&cols, &self.weights[layer])
    }

    /// Post-activation output of convolution `layer` on `h_prev`.
    pub fn conv_forward(&self, layer: usize, h_prev: &Tensor) -> Result<Tensor> {
        let pre = self.conv_pre(layer, h_prev)?;
        Ok(self.layers[layer].activation.apply_tensor(&pre))
    }

    /// Classifier logits for a batch of final feature maps.
    pub fn classify(&self, h_last: &Tensor) -> Result<Matrix> {
        let idx = self.classifier_index();
        let LayerKind::Linear { d_in, d_out } = self.layers[idx].kind else {
            unreachable!("validated");
        };
        if h_last.sample_len() != d_in {
            return Err(shape_err(format!(
                "classifier expects {d_in} features, got {}",
                h_last.sample_len()
            )));
        }
        let wm = Matrix::new(d_out, d_in, self.weights[idx].data().to_vec())?;
        let feats = Matrix::new(h_last.n(), d_in, h_last.data().to_vec())?;
        let mut logits = feats.matmul_nt(&wm)?;
        for row in logits.data_mut().chunks_mut(d_out) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Runs the network and returns every hidden feature map and the logits.
    pub fn forward_collect(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut maps = Vec::with_capacity(self.num_conv());
        let mut h = x.clone();
        for l in 0..self.num_conv() {
            h = self.conv_forward(l, &h)?;
            maps.push(h.clone());
        }
        let logits = self.classify(&h)?;
        Ok(ForwardTrace { maps, logits })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Matrix> {
        Ok(self.forward_collect(x)?.logits)
    }

    /// Predicted class per sample (first maximum wins).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The plain conv-stack family used throughout: `channels.len()` ReLU
/// convolutions with `kernel`-sized filters, `pad = kernel / 2`, the listed
/// strides, then a linear classifier on the flattened features.
pub fn convnet_s(
    input: [usize; 3],
    channels: &[usize],
    strides: &[usize],
    kernel: usize,
    classes: usize,
) -> Result<Vec<LayerSpec>> {
    if channels.is_empty() {
        return Err(invalid("at least one convolution is required"));
    }
    if strides.len() != channels.len() {
        return Err(invalid(format!(
            "{} strides given for {} convolutions",
            strides.len(),
            channels.len()
        )));
    }
    let pad = kernel / 2;
    let [mut c, mut h, mut w] = input;
    let mut layers = Vec::with_capacity(channels.len() + 1);
    for (&c_out, &stride) in channels.iter().zip(strides) {
        layers.push(LayerSpec::conv(c, c_out, kernel, stride, pad));
        h = output_extent(h, kernel, stride, pad)?;
        w = output_extent(w, kernel, stride, pad)?;
        c = c_out;
    }
    layers.push(LayerSpec::linear(c * h * w, classes));
    Ok(layers)
}

/// Parameter and FLOP counts.
///
/// Parameters are the nonzero weight entries (classifier bias excluded), so
/// pruned weights count as removed. FLOPs are `2 x` multiply-accumulates per
/// sample: every nonzero weight contributes one MAC at each output position,
/// padded positions included.
pub fn count_params_flops(net: &Network, input_shape: [usize; 3]) -> Result<(usize, usize)> {
    if input_shape != net.input_shape() {
        return Err(shape_err(format!(
            "input {input_shape:?} does not match network input {:?}",
            net.input_shape()
        )));
    }
    let shapes = net.feature_shapes();
    let mut params = 0;
    let mut flops = 0;
    for (l, (spec, w)) in net.layers().iter().zip(net.weights()).enumerate() {
        let nnz = w.count_nonzero();
        let positions = match spec.kind {
            LayerKind::Conv { .. } => shapes[l + 1][1] * shapes[l + 1][2],
            LayerKind::Linear { .. } => 1,
        };
        params += nnz;
        flops += 2 * nnz * positions;
    }
    Ok((params, flops))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> Network {
        let layers = convnet_s([1, 6, 6], &[3, 4], &[1, 2], 3, 5).unwrap();
        Network::init([1, 6, 6], layers, Role::Teacher, seed).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_maps_and_logits() {
        let net = toy(1);
        let out = net.forward_collect(&Tensor::zeros([2, 1, 6, 6])).unwrap();
        assert!(out.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_weights_give_identical_maps() {
        let a = toy(3);
        let b = a.clone().with_role(Role::Student);
        let x = Tensor::from_fn([2, 1, 6, 6], |[n, _, y, x]| {
            ((n + y * 3 + x) % 5) as f64 / 4.0
        });
        assert_eq!(
            a.forward_collect(&x).unwrap(),
            b.forward_collect(&x).unwrap()
        );
    }

    #[test]
    fn input_shape_mismatch() {
        let net = toy(1);
        assert!(net.forward_collect(&Tensor::zeros([1, 2, 6, 6])).is_err());
    }

    #[test]
    fn validation_catches_bad_architectures() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::linear(10, 3)];
        assert!(Network::init([1, 4, 4], layers, Role::Teacher, 0).is_err());
        let layers = vec![LayerSpec::conv(2, 2, 3, 1, 1), LayerSpec::linear(32, 3)];
        assert!(Network::init([1, 4, 4], layers, Role::Teacher, 0).is_err());
        let layers = vec![LayerSpec::linear(16, 3)];
        assert!(Network::init([1, 4, 4], layers, Role::Teacher, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(toy(9), toy(9));
        assert_ne!(toy(9), toy(10));
    }

    #[test]
    fn param_flop_conventions() {
        // a lone linear layer cannot form a network, so pair it with a 1x1 identity conv
        let mut lin = Network::init(
            [10, 1, 1],
            vec![LayerSpec::conv(10, 10, 1, 1, 0), LayerSpec::linear(10, 10)],
            Role::Teacher,
            0,
        )
        .unwrap();
        lin.set_weights(0, Tensor::zeros([10, 10, 1, 1])).unwrap();
        assert_eq!(count_params_flops(&lin, [10, 1, 1]).unwrap(), (100, 200));

        let conv = Network::init(
            [1, 3, 3],
            vec![LayerSpec::conv(1, 1, 3, 1, 1), LayerSpec::linear(9, 1)],
            Role::Teacher,
            0,
        )
        .unwrap();
        let mut only_conv = conv.clone();
        only_conv
            .set_weights(1, Tensor::zeros([1, 9, 1, 1]))
            .unwrap();
        assert_eq!(count_params_flops(&only_conv, [1, 3, 3]).unwrap(), (9, 162));
    }
}
