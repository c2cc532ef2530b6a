//! Full-network back-propagation, the Adam optimizer, teacher training and
//! masked fine-tuning.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SoftBatch};
use crate::error::{invalid, shape_err, Error, Result};
use crate::network::{argmax, LayerSpec, Network, Role, WeightMask};
use crate::tensor::conv::{feature_map_to_matrix, matrix_to_feature_map};
use crate::tensor::{
    col2im, im2col, kernel_matrix, log_sum_exp, softmax, Im2ColMatrix, Matrix, Tensor,
};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every group. `params[g]` and `grads[g]` must
    /// match the size the state was created with.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "adam: {} groups in state, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (g, (p, gr)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[g].len() || gr.len() != self.m[g].len() {
                return Err(shape_err(format!("adam: group {g} changed size")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (g, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[g], &mut self.v[g]);
            for i in 0..p.len() {
                let gi = gr[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradients of the mean cross entropy with respect to every weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub bias: Vec<f64>,
    pub loss: f64,
    /// Fraction of samples whose arg-max logit matches the arg-max target.
    pub accuracy: f64,
}

struct ConvCache {
    cols: Im2ColMatrix,
    /// `(c_o, n * positions)` pre-activations.
    pre: Matrix,
}

/// Mean cross entropy of soft targets and its exact gradient.
///
/// Masked entries of the weight gradient are zeroed when `mask` is given.
pub fn backprop_grads(
    net: &Network,
    images: &Tensor,
    targets: &Matrix,
    mask: Option<&WeightMask>,
) -> Result<Gradients> {
    let n = images.n();
    let [c, h, w] = net.input_shape();
    if [images.c(), images.h(), images.w()] != [c, h, w] {
        return Err(shape_err(format!(
            "batch images {:?} do not match network input {:?}",
            images.shape(),
            net.input_shape()
        )));
    }
    if targets.rows() != n || targets.cols() != net.num_classes() {
        return Err(shape_err(format!(
            "targets {}x{} for {n} samples and {} classes",
            targets.rows(),
            targets.cols(),
            net.num_classes()
        )));
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    if let Some(m) = mask {
        m.check_congruent(net)?;
    }

    let mut caches = Vec::with_capacity(net.num_conv());
    let mut h_cur = images.clone();
    for l in 0..net.num_conv() {
        let spec = net.layers()[l];
        let g = spec.geometry().expect("conv layer");
        let cols = im2col(&h_cur, g.k, g.stride, g.pad)?;
        let pre = kernel_matrix(&net.weights()[l]).matmul(&cols.matrix)?;
        let act = spec.activation;
        let mut post = pre.clone();
        post.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        h_cur = matrix_to_feature_map(&post, n, cols.out_h, cols.out_w);
        caches.push(ConvCache { cols, pre });
    }

    let logits = net.classify(&h_cur)?;
    let classes = net.num_classes();
    let mut dlogits = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let o = logits.row(i);
        let y = targets.row(i);
        loss += log_sum_exp(o) - o.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        if argmax(o) == argmax(y) {
            correct += 1;
        }
        let p = softmax(o);
        let ysum: f64 = y.iter().sum();
        for j in 0..classes {
            dlogits.data_mut()[i * classes + j] = (ysum * p[j] - y[j]) / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }

    let cls = net.classifier_index();
    let d_in = h_cur.sample_len();
    let feats = Matrix::new(n, d_in, h_cur.data().to_vec())?;
    let w_fc = Matrix::new(classes, d_in, net.weights()[cls].data().to_vec())?;
    let dw_fc = dlogits.matmul_tn(&feats)?;
    let mut dbias = vec![0.0; classes];
    for i in 0..n {
        for (b, &d) in dbias.iter_mut().zip(dlogits.row(i)) {
            *b += d;
        }
    }
    let dfeats = dlogits.matmul(&w_fc)?;
    let mut dh = feature_map_to_matrix(&Tensor::from_parts(h_cur.shape(), dfeats.into_data()));

    let mut weight_grads = vec![Tensor::zeros([0, 0, 0, 0]); net.num_layers()];
    weight_grads[cls] = Tensor::from_parts(net.weights()[cls].shape(), dw_fc.into_data());
    for l in (0..net.num_conv()).rev() {
        let cache = &caches[l];
        let act = net.layers()[l].activation;
        let mut dpre = dh;
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= act.derivative(p);
        }
        let dw = dpre.matmul_nt(&cache.cols.matrix)?;
        weight_grads[l] = Tensor::from_parts(net.weights()[l].shape(), dw.into_data());
        if l > 0 {
            let dcols = kernel_matrix(&net.weights()[l]).matmul_tn(&dpre)?;
            let dprev = col2im(&dcols, cache.cols.input_shape, cache.cols.geometry)?;
            dh = feature_map_to_matrix(&dprev);
        } else {
            dh = Matrix::zeros(0, 0);
        }
    }
    drop(dh);
    if let Some(m) = mask {
        for (l, g) in weight_grads.iter_mut().enumerate() {
            m.apply_to(l, g);
        }
    }
    Ok(Gradients {
        weights: weight_grads,
        bias: dbias,
        loss,
        accuracy: correct as f64 / n as f64,
    })
}

/// Mean cross entropy of the network on a batch.
pub fn mean_cross_entropy(net: &Network, images: &Tensor, targets: &Matrix) -> Result<f64> {
    let logits = net.logits(images)?;
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let o = logits.row(i);
        total += log_sum_exp(o)
            - o.iter()
                .zip(targets.row(i))
                .map(|(a, b)| a * b)
                .sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Lower bound of the documented learning-rate range.
pub const LR_MIN: f64 = 1e-5;
/// Upper bound of the documented learning-rate range.
pub const LR_MAX: f64 = 1e-3;

pub(crate) fn check_lr(lr: f64, what: &str) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!(
            "{what} learning rate {lr} must be positive"
        )));
    }
    if !(LR_MIN..=LR_MAX).contains(&lr) {
        warn!("{what} learning rate {lr} is outside the usual range [{LR_MIN}, {LR_MAX}]");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size once the dataset exceeds [`FULL_BATCH_LIMIT`] samples.
    pub batch_size: usize,
    pub seed: u64,
}

/// Datasets up to this size are trained full-batch.
pub const FULL_BATCH_LIMIT: usize = 256;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lr(self.lr, "training")?;
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Writes training-log rows as CSV text.
pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("# xdistill train-log v1\niteration,loss,train_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.17e},{:.17e}\n",
            r.iteration, r.loss, r.train_acc
        ));
    }
    s
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if n <= FULL_BATCH_LIMIT {
        return vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Back-propagation training loop. Masked weights stay exactly zero.
///
/// When `transform` is given it maps each minibatch before the gradient step
/// (used for augmentation); it receives the global iteration index.
pub fn train(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mask: Option<&WeightMask>,
    transform: Option<&dyn Fn(SoftBatch, usize) -> Result<SoftBatch>>,
) -> Result<(Network, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if data.num_classes != net.num_classes() {
        return Err(shape_err(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes,
            net.num_classes()
        )));
    }
    let mut net = net.clone();
    if let Some(m) = mask {
        m.apply(&mut net)?;
    }
    let sizes: Vec<usize> = net
        .weights()
        .iter()
        .map(|w| w.len())
        .chain(std::iter::once(net.num_classes()))
        .collect();
    let mut adam = AdamState::new(&sizes, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let sub = data.subset(&idx);
            let mut batch = SoftBatch::from(&sub);
            if let Some(f) = transform {
                batch = f(batch, iteration)?;
            }
            let grads =
                backprop_grads(&net, &batch.images, &batch.targets, mask).map_err(|e| match e {
                    Error::NonFinite(_) => {
                        Error::Diverged(format!("loss is not finite at iteration {iteration}"))
                    }
                    other => other,
                })?;
            log.push(TrainLogRow {
                iteration,
                loss: grads.loss,
                train_acc: grads.accuracy,
            });
            let mut weights: Vec<Tensor> = net.weights().to_vec();
            let mut bias = net.bias().to_vec();
            {
                let mut params: Vec<&mut [f64]> =
                    weights.iter_mut().map(|w| w.data_mut()).collect();
                params.push(&mut bias);
                let mut g: Vec<&[f64]> = grads.weights.iter().map(|w| w.data()).collect();
                g.push(&grads.bias);
                adam.step(&mut params, &g)?;
            }
            if weights
                .iter()
                .any(|w| w.data().iter().any(|v| !v.is_finite()))
                || bias.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Diverged(format!(
                    "non-finite weights after iteration {iteration}"
                )));
            }
            for (l, w) in weights.into_iter().enumerate() {
                net.set_weights(l, w)?;
            }
            net.set_bias(bias)?;
            if let Some(m) = mask {
                m.apply(&mut net)?;
            }
            iteration += 1;
        }
    }
    Ok((net, log))
}

/// Initializes a teacher from `layers` with the config seed and trains it.
pub fn train_teacher(
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<TrainLogRow>)> {
    let init = Network::init(input, layers, Role::Teacher, cfg.seed)?;
    train(&init, data, cfg, None, None)
}

/// Back-propagation fine-tuning that keeps every masked weight at zero.
pub fn finetune(
    net: &Network,
    mask: &WeightMask,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<TrainLogRow>)> {
    train(net, data, cfg, Some(mask), None)
}

/// Top-1 accuracy.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    top_k_accuracy(net, data, 1)
}

/// Fraction of samples whose label is among the `k` largest logits
/// (ties resolved toward the lower class index).
pub fn top_k_accuracy(net: &Network, data: &Dataset, k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut hits = 0;
    for start in (0..data.len()).step_by(512) {
        let idx: Vec<usize> = (start..(start + 512).min(data.len())).collect();
        let logits = net.logits(&data.images.select_samples(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            let row = logits.row(r);
            let label = data.labels[i];
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[label] || (v == row[label] && j < label))
                .count();
            if better < k {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::convnet_s;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = AdamState::new(&[3], AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(&[1], AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_rejects_incongruent_groups() {
        let mut adam = AdamState::new(&[2], AdamConfig::default());
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }

    fn tiny_net() -> Network {
        let layers = convnet_s([1, 1, 1], &[1], &[1], 1, 3).unwrap();
        Network::init([1, 1, 1], layers, Role::Teacher, 0).unwrap()
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        // single sample: dW = (softmax(o) - y) x^T for the classifier
        let mut net = tiny_net();
        net.set_weights(0, Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        net.set_weights(1, Tensor::new([3, 1, 1, 1], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let x = Tensor::new([1, 1, 1, 1], vec![0.7]).unwrap();
        let y = Matrix::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let g = backprop_grads(&net, &x, &y, None).unwrap();
        let p = softmax(&[0.35, -0.7, 1.4]);
        for j in 0..3 {
            let want = (p[j] - y.get(0, j)) * 0.7;
            assert!((g.weights[1].data()[j] - want).abs() < 1e-15);
            assert!((g.bias[j] - (p[j] - y.get(0, j))).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_gradient_is_zero() {
        let layers = convnet_s([1, 4, 4], &[2], &[1], 3, 2).unwrap();
        let net = Network::init([1, 4, 4], layers, Role::Teacher, 3).unwrap();
        let mut mask = WeightMask::ones(&net);
        let mut m0 = mask.layer(0).clone();
        m0.data_mut()[4] = 0.0;
        mask.set_layer(0, m0).unwrap();
        let x = Tensor::from_fn([2, 1, 4, 4], |[n, _, y, x]| (n + y + x) as f64 / 8.0);
        let y = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = backprop_grads(&net, &x, &y, Some(&mask)).unwrap();
        assert_eq!(g.weights[0].data()[4], 0.0);
        let free = backprop_grads(&net, &x, &y, None).unwrap();
        assert_ne!(free.weights[0].data()[4], 0.0);
    }

    fn separable(n_per: usize) -> Dataset {
        // class 0 bright left half, class 1 bright right half
        let n = 2 * n_per;
        let images = Tensor::from_fn([n, 1, 4, 4], |[i, _, y, x]| {
            let class = i % 2;
            let base = if (x < 2) == (class == 0) { 0.8 } else { 0.1 };
            base + 0.05 * (((i * 7 + y * 3 + x) % 5) as f64 / 5.0)
        });
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn teacher_fits_separable_data() {
        let data = separable(20);
        let layers = convnet_s([1, 4, 4], &[4], &[1], 3, 2).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 500,
            batch_size: 64,
            seed: 1,
        };
        let (net, log) = train_teacher([1, 4, 4], layers.clone(), &data, &cfg).unwrap();
        assert!(accuracy(&net, &data).unwrap() >= 0.99);
        assert_eq!(log.len(), 500);
        let (again, _) = train_teacher([1, 4, 4], layers, &data, &cfg).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = separable(3);
        let layers = convnet_s([1, 4, 4], &[2], &[1], 3, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (net, log) = train_teacher([1, 4, 4], layers.clone(), &data, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(
            net,
            Network::init([1, 4, 4], layers, Role::Teacher, 0).unwrap()
        );
    }

    #[test]
    fn finetune_preserves_zero_layer() {
        let data = separable(4);
        let layers = convnet_s([1, 4, 4], &[3, 3], &[1, 1], 3, 2).unwrap();
        let net = Network::init([1, 4, 4], layers, Role::Student, 2).unwrap();
        let mut mask = WeightMask::ones(&net);
        mask.set_layer(1, Tensor::zeros(net.weights()[1].shape()))
            .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let (tuned, _) = finetune(&net, &mask, &data, &cfg).unwrap();
        assert!(tuned.weights()[1].data().iter().all(|&v| v == 0.0));
        // the zeroed layer also blocks every gradient below it
        assert_eq!(tuned.weights()[0], net.weights()[0]);
    }

    #[test]
    fn all_ones_mask_matches_plain_training() {
        let data = separable(4);
        let layers = convnet_s([1, 4, 4], &[2], &[1], 3, 2).unwrap();
        let net = Network::init([1, 4, 4], layers, Role::Student, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (a, la) = finetune(&net, &WeightMask::ones(&net), &data, &cfg).unwrap();
        let (b, lb) = train(&net, &data, &cfg, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn top_k_counts() {
        let data = separable(2);
        let net = Network::init(
            [1, 4, 4],
            convnet_s([1, 4, 4], &[2], &[1], 3, 2).unwrap(),
            Role::Teacher,
            0,
        )
        .unwrap();
        assert_eq!(top_k_accuracy(&net, &data, 2).unwrap(), 1.0);
    }
}
