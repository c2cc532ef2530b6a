//! Layer-wise distillation: the per-layer regression objectives, their
//! gradients with respect to the student kernel, and the front-to-back
//! compression loop.
//!
//! Every objective is expressed as a short list of terms
//! `coeff * ||sigma(W_s * x) - target||^2 / N` where the target is a constant
//! teacher-side feature map. Estimation, correction, imitation, their convex
//! combination and the soft feature mix only differ in which inputs feed the
//! two branches, so they share one evaluation path.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gaussian_feature_noise, mixup, mixup_lambda, random_crop, Dataset, SoftBatch};
use crate::error::{invalid, shape_err, Error, Result};
use crate::network::{build_student, Activation, Network, PruneKind, PruneScheme, WeightMask};
use crate::prox::{
    prox_at_level, quant_penalty_step, quantize_weights, Regularizer, Schedule, SparsityKind,
};
use crate::tensor::{im2col, kernel_matrix, ConvGeometry, Matrix, Tensor};
use crate::trainer::{check_lr, finetune, AdamConfig, AdamState, TrainConfig, TrainLogRow};

/// How the two branches of a layer objective are wired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistillMode {
    /// Plain feature regression on each network's own inputs.
    Nc,
    /// `mu * correction + (1 - mu) * imitation`.
    Cross { mu: f64 },
    /// Both branches consume a convex mix of the two input maps.
    Soft { alpha: f64, beta: f64 },
}

impl DistillMode {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        match *self {
            DistillMode::Nc => Ok(()),
            DistillMode::Cross { mu } => unit("mu", mu),
            DistillMode::Soft { alpha, beta } => {
                unit("alpha", alpha)?;
                unit("beta", beta)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistillMode::Nc => "nc",
            DistillMode::Cross { .. } => "cross",
            DistillMode::Soft { .. } => "soft",
        }
    }
}

/// One layer objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Estimation,
    Correction,
    Imitation,
    Combined { mu: f64 },
    Soft { alpha: f64, beta: f64 },
}

/// Per-iteration perturbations of the distillation inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Augmentation {
    /// Mix image pairs with a fresh `Beta(0.2, 0.2)` coefficient each iteration.
    pub mixup: bool,
    /// Zero-pad and randomly crop the images by this many pixels (0 = off).
    pub crop_pad: usize,
    /// Gaussian noise on the student input of the layer being distilled,
    /// with standard deviation `feature_noise * max(h)` (0 = off).
    pub feature_noise: f64,
}

impl Augmentation {
    pub fn is_active(&self) -> bool {
        self.mixup || self.crop_pad > 0 || self.feature_noise > 0.0
    }

    fn needs_images(&self) -> bool {
        self.mixup || self.crop_pad > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Convolutions that use the cross objective; `None` means all of them.
    /// The rest fall back to plain estimation.
    pub cross_layers: Option<BTreeSet<usize>>,
    pub iters: usize,
    pub ramp_iters: usize,
    pub lr: f64,
    pub regularizer: Regularizer,
    /// Shrink surviving weights by the level threshold (soft threshold). Off
    /// by default: the level prox then only zeroes the selected units, since
    /// an Adam step moves zeroed weights by about `lr` every iteration and the
    /// resulting per-iteration threshold keeps shrinking every survivor.
    pub survivor_shrink: bool,
    pub augment: Augmentation,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Nc,
            cross_layers: None,
            iters: 3000,
            ramp_iters: 1000,
            lr: 3e-4,
            regularizer: Regularizer::None,
            survivor_shrink: false,
            augment: Augmentation::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.regularizer.validate()?;
        check_lr(self.lr, "distillation")?;
        if self.ramp_iters > self.iters {
            return Err(invalid(format!(
                "ramp of {} iterations exceeds the {} iterations per layer",
                self.ramp_iters, self.iters
            )));
        }
        if !(self.augment.feature_noise >= 0.0 && self.augment.feature_noise.is_finite()) {
            return Err(invalid("feature noise scale must be non-negative"));
        }
        Ok(())
    }

    /// Objective used for convolution `layer`.
    pub fn objective_for(&self, layer: usize) -> Objective {
        let crossed = self
            .cross_layers
            .as_ref()
            .is_none_or(|s| s.contains(&layer));
        match self.mode {
            DistillMode::Cross { mu } if crossed => Objective::Combined { mu },
            DistillMode::Soft { alpha, beta } if crossed => Objective::Soft { alpha, beta },
            _ => Objective::Estimation,
        }
    }
}

/// Everything a single layer objective depends on.
///
/// For physically pruned students `kept_in` / `kept_out` list which teacher
/// channels the student's input and output channels correspond to; teacher
/// maps are restricted and student maps zero-embedded along those indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContext {
    pub h_prev_t: Tensor,
    pub h_prev_s: Tensor,
    pub w_t: Tensor,
    pub w_s: Tensor,
    pub geometry: ConvGeometry,
    pub activation: Activation,
    pub kept_in: Option<Vec<usize>>,
    pub kept_out: Option<Vec<usize>>,
}

/// A constant target and the student-side patches that should reproduce it.
#[derive(Debug, Clone)]
struct Term {
    target: Matrix,
    cols: Matrix,
    coeff: f64,
}

impl LayerContext {
    /// Context for congruent teacher and student layers.
    pub fn new(
        h_prev_t: Tensor,
        h_prev_s: Tensor,
        w_t: Tensor,
        w_s: Tensor,
        geometry: ConvGeometry,
        activation: Activation,
    ) -> Result<Self> {
        let ctx = Self {
            h_prev_t,
            h_prev_s,
            w_t,
            w_s,
            geometry,
            activation,
            kept_in: None,
            kept_out: None,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn with_channels(
        mut self,
        kept_in: Option<Vec<usize>>,
        kept_out: Option<Vec<usize>>,
    ) -> Result<Self> {
        self.kept_in = kept_in;
        self.kept_out = kept_out;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let [ht_n, ht_c, ht_h, ht_w] = self.h_prev_t.shape();
        let [hs_n, hs_c, hs_h, hs_w] = self.h_prev_s.shape();
        if ht_n != hs_n || ht_h != hs_h || ht_w != hs_w {
            return Err(shape_err(format!(
                "teacher input {:?} and student input {:?} disagree",
                self.h_prev_t.shape(),
                self.h_prev_s.shape()
            )));
        }
        let [wt_o, wt_i, wt_k, wt_k2] = self.w_t.shape();
        let [ws_o, ws_i, ws_k, ws_k2] = self.w_s.shape();
        let k = self.geometry.k;
        if [wt_k, wt_k2, ws_k, ws_k2] != [k; 4] {
            return Err(shape_err(format!("kernels are not {k}x{k}")));
        }
        if wt_i != ht_c || ws_i != hs_c {
            return Err(shape_err(format!(
                "kernel inputs ({wt_i}, {ws_i}) do not match map channels ({ht_c}, {hs_c})"
            )));
        }
        check_index_list(self.kept_in.as_deref(), ws_i, wt_i, "input")?;
        check_index_list(self.kept_out.as_deref(), ws_o, wt_o, "output")?;
        self.geometry.output_hw(ht_h, ht_w)?;
        Ok(())
    }

    fn n(&self) -> usize {
        self.h_prev_t.n()
    }

    /// Teacher-space map restricted to the student's input channels.
    fn to_student_space(&self, h_t: &Tensor) -> Tensor {
        match &self.kept_in {
            Some(k) => h_t.select_channels(k),
            None => h_t.clone(),
        }
    }

    /// Student-space map embedded into the teacher's input channels.
    fn to_teacher_space(&self, h_s: &Tensor) -> Result<Tensor> {
        match &self.kept_in {
            Some(k) => h_s.scatter_channels(k, self.w_t.c()),
            None => Ok(h_s.clone()),
        }
    }

    fn cols(&self, x: &Tensor) -> Result<Matrix> {
        let g = self.geometry;
        Ok(im2col(x, g.k, g.stride, g.pad)?.matrix)
    }

    /// Teacher post-activations on a teacher-space input, restricted to the
    /// student's output channels, in `(c_out, n * positions)` layout.
    fn teacher_out(&self, x_t: &Tensor) -> Result<Matrix> {
        let kernel = match &self.kept_out {
            Some(k) => self.w_t.select_samples(k),
            None => self.w_t.clone(),
        };
        let mut out = kernel_matrix(&kernel).matmul(&self.cols(x_t)?)?;
        let act = self.activation;
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(out)
    }

    fn terms(&self, objective: Objective) -> Result<Vec<Term>> {
        let term = |x_t: &Tensor, x_s: &Tensor, coeff: f64| -> Result<Term> {
            Ok(Term {
                target: self.teacher_out(x_t)?,
                cols: self.cols(x_s)?,
                coeff,
            })
        };
        let h_t = &self.h_prev_t;
        let h_s = &self.h_prev_s;
        let correction = || term(h_t, &self.to_student_space(h_t), 1.0);
        let imitation = || term(&self.to_teacher_space(h_s)?, h_s, 1.0);
        let terms = match objective {
            Objective::Estimation => vec![term(h_t, h_s, 1.0)?],
            Objective::Correction => vec![correction()?],
            Objective::Imitation => vec![imitation()?],
            Objective::Combined { mu } => {
                let mut v = Vec::with_capacity(2);
                if mu != 0.0 {
                    v.push(Term {
                        coeff: mu,
                        ..correction()?
                    });
                }
                if mu != 1.0 {
                    v.push(Term {
                        coeff: 1.0 - mu,
                        ..imitation()?
                    });
                }
                v
            }
            Objective::Soft { alpha, beta } => {
                let x_t = convex(h_t, alpha, &self.to_teacher_space(h_s)?)?;
                let x_s = convex(&self.to_student_space(h_t), 1.0 - beta, h_s)?;
                vec![term(&x_t, &x_s, 1.0)?]
            }
        };
        Ok(terms)
    }

    /// Objective value at the context's student weights.
    pub fn loss(&self, objective: Objective) -> Result<f64> {
        let terms = self.terms(objective)?;
        Ok(evaluate(&terms, &self.w_s, self.activation, self.n(), false)?.0)
    }

    /// Objective value and its gradient with respect to the student kernel.
    pub fn loss_grad(&self, objective: Objective) -> Result<(f64, Tensor)> {
        let terms = self.terms(objective)?;
        let (loss, grad) = evaluate(&terms, &self.w_s, self.activation, self.n(), true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    /// Same context with different student weights.
    pub fn with_student_weights(&self, w_s: Tensor) -> Result<Self> {
        if w_s.shape() != self.w_s.shape() {
            return Err(shape_err(format!(
                "student kernel {:?} replaced by {:?}",
                self.w_s.shape(),
                w_s.shape()
            )));
        }
        Ok(Self {
            w_s,
            ..self.clone()
        })
    }
}

fn check_index_list(list: Option<&[usize]>, len: usize, bound: usize, what: &str) -> Result<()> {
    match list {
        None if len == bound => Ok(()),
        None => Err(shape_err(format!(
            "student has {len} {what} channels, teacher {bound}; channel indices required"
        ))),
        Some(l) if l.len() != len => Err(shape_err(format!(
            "{} {what} channel indices for {len} student channels",
            l.len()
        ))),
        Some(l) => match l.iter().find(|&&i| i >= bound) {
            Some(i) => Err(shape_err(format!(
                "{what} channel {i} out of range for {bound}"
            ))),
            None if l.windows(2).any(|p| p[0] >= p[1]) => Err(shape_err(format!(
                "{what} channel indices must be increasing"
            ))),
            None => Ok(()),
        },
    }
}

/// `w * a + (1 - w) * b`, evaluated as `b + w (a - b)` so that equal inputs
/// mix to themselves exactly; the endpoints return exact copies.
fn convex(a: &Tensor, w: f64, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "feature mix")?;
    if w == 1.0 {
        Ok(a.clone())
    } else if w == 0.0 {
        Ok(b.clone())
    } else {
        a.zip_map(b, |x, y| y + w * (x - y))
    }
}

/// Soft cross connection of two congruent feature maps:
/// `(alpha h_t + (1 - alpha) h_s, (1 - beta) h_t + beta h_s)`.
pub fn cross_mix(h_t: &Tensor, h_s: &Tensor, alpha: f64, beta: f64) -> Result<(Tensor, Tensor)> {
    Ok((convex(h_t, alpha, h_s)?, convex(h_t, 1.0 - beta, h_s)?))
}

fn evaluate(
    terms: &[Term],
    w_s: &Tensor,
    act: Activation,
    n: usize,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let km = kernel_matrix(w_s);
    let mut loss = 0.0;
    let mut grad: Option<Matrix> = None;
    for term in terms {
        let pre = km.matmul(&term.cols)?;
        if pre.rows() != term.target.rows() || pre.cols() != term.target.cols() {
            return Err(shape_err(format!(
                "student output {}x{} against target {}x{}",
                pre.rows(),
                pre.cols(),
                term.target.rows(),
                term.target.cols()
            )));
        }
        let mut sq = 0.0;
        let mut dpre = if want_grad {
            Matrix::zeros(pre.rows(), pre.cols())
        } else {
            Matrix::zeros(0, 0)
        };
        let scale = 2.0 * term.coeff / n as f64;
        for (i, (&p, &t)) in pre.data().iter().zip(term.target.data()).enumerate() {
            let r = act.apply(p) - t;
            sq += r * r;
            if want_grad {
                dpre.data_mut()[i] = scale * r * act.derivative(p);
            }
        }
        loss += term.coeff * (sq / n as f64);
        if want_grad {
            let g = dpre.matmul_nt(&term.cols)?;
            grad = Some(match grad {
                None => g,
                Some(mut acc) => {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                    acc
                }
            });
        }
    }
    let grad = if want_grad {
        let data = grad
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; w_s.len()]);
        Some(Tensor::from_parts(w_s.shape(), data))
    } else {
        None
    };
    Ok((loss, grad))
}

/// `||sigma(W_t * h_t) - sigma(W_s * h_s)||^2 / N`.
pub fn estimation_loss(ctx: &LayerContext) -> Result<f64> {
    ctx.loss(Objective::Estimation)
}

/// Both branches consume the teacher's input map.
pub fn correction_loss(ctx: &LayerContext) -> Result<f64> {
    ctx.loss(Objective::Correction)
}

/// Both branches consume the student's input map.
pub fn imitation_loss(ctx: &LayerContext) -> Result<f64> {
    ctx.loss(Objective::Imitation)
}

pub fn combined_loss(ctx: &LayerContext, mu: f64) -> Result<f64> {
    ctx.loss(Objective::Combined { mu })
}

pub fn soft_cross_loss(ctx: &LayerContext, alpha: f64, beta: f64) -> Result<f64> {
    ctx.loss(Objective::Soft { alpha, beta })
}

/// Gradient of `objective` with respect to the student kernel only.
pub fn layer_loss_grad(ctx: &LayerContext, objective: Objective) -> Result<Tensor> {
    Ok(ctx.loss_grad(objective)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLogRow {
    pub layer: usize,
    pub iter: usize,
    pub loss: f64,
    pub sparsity: f64,
    pub lr: f64,
}

/// Writes per-iteration distillation rows as CSV text.
pub fn layer_log_csv(rows: &[LayerLogRow]) -> String {
    let mut s = String::from("# xdistill layer-log v1\nlayer,iter,loss,sparsity,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:e}\n",
            r.layer, r.iter, r.loss, r.sparsity, r.lr
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    pub weights: Tensor,
    /// 1 where the final kernel is nonzero.
    pub mask: Tensor,
    pub log: Vec<LayerLogRow>,
}

fn zero_fraction(w: &Tensor) -> f64 {
    if w.is_empty() {
        0.0
    } else {
        (w.len() - w.count_nonzero()) as f64 / w.len() as f64
    }
}

/// Supplies fresh `(h_prev_t, h_prev_s)` for an iteration when inputs are augmented.
type InputSource<'a> = &'a dyn Fn(usize) -> Result<(Tensor, Tensor)>;

fn regularize(w: &Tensor, reg: Regularizer, level: f64, shrink: bool) -> Result<Tensor> {
    let kind = match reg {
        Regularizer::L1 { .. } => SparsityKind::Element,
        Regularizer::Group21 { .. } => SparsityKind::Group,
        Regularizer::QuantPenalty { bits, strength } => {
            return quant_penalty_step(w, bits, strength)
        }
        Regularizer::None | Regularizer::QuantProject { .. } => return Ok(w.clone()),
    };
    if shrink {
        Ok(prox_at_level(w, level, kind))
    } else {
        Ok(hard_at_level(w, level, kind))
    }
}

/// Zeroes the same units as the level prox without shrinking the survivors.
fn hard_at_level(w: &Tensor, level: f64, kind: SparsityKind) -> Tensor {
    let shrunk = prox_at_level(w, level, kind);
    let per = match kind {
        SparsityKind::Element => 1,
        SparsityKind::Group => w.sample_len(),
    };
    let mut out = w.clone();
    for (unit, chunk) in shrunk.data().chunks(per.max(1)).enumerate() {
        let orig = &w.data()[unit * per..(unit + 1) * per];
        let zeroed = chunk.iter().all(|&v| v == 0.0) && orig.iter().any(|&v| v != 0.0);
        if zeroed {
            out.data_mut()[unit * per..(unit + 1) * per]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
    out
}

fn run_layer(
    ctx: &LayerContext,
    cfg: &DistillConfig,
    layer: usize,
    reg: Regularizer,
    objective: Objective,
    source: Option<InputSource>,
) -> Result<LayerOutcome> {
    let schedule = Schedule::new(reg.target_sparsity(), cfg.ramp_iters)?;
    let mut latent = ctx.w_s.clone();
    let mut adam = AdamState::new(&[latent.len()], AdamConfig::with_lr(cfg.lr));
    let mut static_terms = None;
    if source.is_none() {
        static_terms = Some(ctx.terms(objective)?);
    }
    let mut log = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        let fresh;
        let terms = match (&static_terms, source) {
            (Some(terms), _) => terms,
            (None, Some(src)) => {
                let (h_t, h_s) = src(t)?;
                let step_ctx = LayerContext {
                    h_prev_t: h_t,
                    h_prev_s: h_s,
                    ..ctx.clone()
                };
                fresh = step_ctx.terms(objective)?;
                &fresh
            }
            (None, None) => unreachable!("terms are cached without an input source"),
        };
        let eval_w = match reg {
            Regularizer::QuantProject { bits } => quantize_weights(&latent, bits)?,
            _ => latent.clone(),
        };
        let (loss, grad) = evaluate(terms, &eval_w, ctx.activation, ctx.n(), true)?;
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "distillation loss is not finite at layer {layer}, iteration {t}"
            )));
        }
        adam.step(&mut [latent.data_mut()], &[grad.data()])?;
        latent = regularize(&latent, reg, schedule.value(t + 1), cfg.survivor_shrink)?;
        if latent.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite weights at layer {layer}, iteration {t}"
            )));
        }
        log.push(LayerLogRow {
            layer,
            iter: t,
            loss,
            sparsity: zero_fraction(&latent),
            lr: cfg.lr,
        });
    }
    let weights = match reg {
        Regularizer::QuantProject { bits } | Regularizer::QuantPenalty { bits, .. }
            if cfg.iters > 0 =>
        {
            quantize_weights(&latent, bits)?
        }
        _ => latent,
    };
    let mask = weights.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    Ok(LayerOutcome { weights, mask, log })
}

fn noise_seed(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64 + 1);
    rng
}

/// Fits the context's student kernel with `cfg.iters` iterations of
/// gradient step, Adam update and proximal map at the scheduled level.
///
/// Feature-noise augmentation is honoured; image-level augmentations need the
/// full networks and are only available through [`compress_network`].
pub fn distill_layer(
    ctx: &LayerContext,
    cfg: &DistillConfig,
    layer: usize,
) -> Result<LayerOutcome> {
    cfg.validate()?;
    ctx.validate()?;
    let objective = cfg.objective_for(layer);
    if cfg.augment.feature_noise > 0.0 {
        let seeds: Vec<u64> = {
            let mut rng = noise_seed(cfg.seed, layer);
            (0..cfg.iters).map(|_| rng.random()).collect()
        };
        let scale = cfg.augment.feature_noise;
        let src = |t: usize| -> Result<(Tensor, Tensor)> {
            Ok((
                ctx.h_prev_t.clone(),
                gaussian_feature_noise(&ctx.h_prev_s, scale, seeds[t])?,
            ))
        };
        run_layer(ctx, cfg, layer, cfg.regularizer, objective, Some(&src))
    } else {
        run_layer(ctx, cfg, layer, cfg.regularizer, objective, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub objective: Objective,
    /// Objective at the final weights on the distillation batch.
    pub final_loss: f64,
    /// Estimation error at the final weights with the student's own inputs.
    pub estimation_error: f64,
    pub nonzero: usize,
    pub total: usize,
}

impl LayerReport {
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.nonzero as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressReport {
    pub layers: Vec<LayerReport>,
    pub log: Vec<LayerLogRow>,
    pub finetune_log: Vec<TrainLogRow>,
    /// Nonzero pattern of the final student.
    pub mask: WeightMask,
}

/// Writes the per-layer summary as CSV text.
pub fn layer_report_csv(layers: &[LayerReport]) -> String {
    let mut s = String::from(
        "# xdistill layer-report v1\nlayer,final_loss,estimation_error,nonzero,total,sparsity\n",
    );
    for r in layers {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{},{},{:.17e}\n",
            r.layer,
            r.final_loss,
            r.estimation_error,
            r.nonzero,
            r.total,
            r.sparsity()
        ));
    }
    s
}

/// Regularizer for one convolution: skipped layers are left unregularized and
/// sparsity targets come from the pruning scheme.
pub fn layer_regularizer(reg: Regularizer, scheme: &PruneScheme, layer: usize) -> Regularizer {
    if scheme.is_skipped(layer) {
        return Regularizer::None;
    }
    match (reg, &scheme.kind) {
        (Regularizer::L1 { .. } | Regularizer::Group21 { .. }, _) => {
            reg.with_sparsity(scheme.layer_sparsity(layer))
        }
        (Regularizer::None, PruneKind::Unstructured { sparsity }) if *sparsity > 0.0 => {
            Regularizer::L1 {
                sparsity: *sparsity,
            }
        }
        _ => reg,
    }
}

/// Student-side input and output channel indices for convolution `l`.
fn channel_lists(student: &Network, l: usize) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    match student.channel_origin() {
        None => (None, None),
        Some(origin) => {
            let kept_in = if l == 0 {
                None
            } else {
                Some(origin[l - 1].clone())
            };
            (kept_in, Some(origin[l].clone()))
        }
    }
}

/// Layer-by-layer compression of `teacher` on a few-shot set.
///
/// Each convolution is fitted with the teacher's maps as targets, frozen, and
/// the student's own outputs (with the final, post-prox weights) become the
/// next layer's student input. The classifier is shared with the teacher.
/// `finetune_cfg` appends masked back-propagation on the same samples.
pub fn compress_network(
    teacher: &Network,
    data: &Dataset,
    cfg: &DistillConfig,
    scheme: &PruneScheme,
    finetune_cfg: Option<&TrainConfig>,
) -> Result<(Network, CompressReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("distillation set is empty"));
    }
    if finetune_cfg.is_some() && cfg.regularizer.bits().is_some() {
        return Err(invalid(
            "fine-tuning would undo weight quantization; disable one of them",
        ));
    }
    let (mut student, _) = build_student(teacher, scheme)?;
    let images = data.images.clone();
    let teacher_maps = {
        let mut maps = vec![images.clone()];
        maps.extend(teacher.forward_collect(&images)?.maps);
        maps
    };
    let aug = cfg.augment;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut h_s = images.clone();
    let mut layers = Vec::with_capacity(teacher.num_conv());
    let mut log = Vec::new();
    for l in 0..teacher.num_conv() {
        let spec = teacher.layers()[l];
        let (kept_in, kept_out) = channel_lists(&student, l);
        let ctx = LayerContext {
            h_prev_t: teacher_maps[l].clone(),
            h_prev_s: h_s.clone(),
            w_t: teacher.weights()[l].clone(),
            w_s: student.weights()[l].clone(),
            geometry: spec.geometry().expect("conv layer"),
            activation: spec.activation,
            kept_in,
            kept_out,
        };
        ctx.validate()?;
        let reg = layer_regularizer(cfg.regularizer, scheme, l);
        let objective = cfg.objective_for(l);
        debug!("layer {l}: objective {objective:?}, regularizer {reg:?}");

        let outcome = if aug.is_active() {
            let seeds: Vec<[u64; 3]> = (0..cfg.iters)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let base = SoftBatch::from(data);
            let student_prefix = student.clone();
            let src = |t: usize| -> Result<(Tensor, Tensor)> {
                let [s_mix, s_crop, s_noise] = seeds[t];
                let (h_t, mut h_s_iter) = if aug.needs_images() {
                    let mut x = base.clone();
                    if aug.mixup {
                        x = mixup(&x, mixup_lambda(s_mix), s_mix)?;
                    }
                    let imgs = random_crop(&x.images, aug.crop_pad, s_crop);
                    let (mut a, mut b) = (imgs.clone(), imgs);
                    for k in 0..l {
                        a = teacher.conv_forward(k, &a)?;
                        b = student_prefix.conv_forward(k, &b)?;
                    }
                    (a, b)
                } else {
                    (ctx.h_prev_t.clone(), ctx.h_prev_s.clone())
                };
                if aug.feature_noise > 0.0 {
                    h_s_iter = gaussian_feature_noise(&h_s_iter, aug.feature_noise, s_noise)?;
                }
                Ok((h_t, h_s_iter))
            };
            run_layer(&ctx, cfg, l, reg, objective, Some(&src))?
        } else {
            run_layer(&ctx, cfg, l, reg, objective, None)?
        };
        student.set_weights(l, outcome.weights.clone())?;
        let final_ctx = ctx.with_student_weights(outcome.weights)?;
        let report = LayerReport {
            layer: l,
            objective,
            final_loss: final_ctx.loss(objective)?,
            estimation_error: estimation_loss(&final_ctx)?,
            nonzero: final_ctx.w_s.count_nonzero(),
            total: final_ctx.w_s.len(),
        };
        info!(
            "layer {l}: loss {:.6e}, estimation {:.6e}, sparsity {:.4}",
            report.final_loss,
            report.estimation_error,
            report.sparsity()
        );
        layers.push(report);
        log.extend(outcome.log);
        h_s = student.conv_forward(l, &h_s)?;
    }
    let mut finetune_log = Vec::new();
    if let Some(ft) = finetune_cfg {
        let mask = WeightMask::from_nonzero(&student);
        let (tuned, ft_log) = finetune(&student, &mask, data, ft)?;
        student = tuned;
        finetune_log = ft_log;
    }
    let mask = WeightMask::from_nonzero(&student);
    Ok((
        student,
        CompressReport {
            layers,
            log,
            finetune_log,
            mask,
        },
    ))
}
