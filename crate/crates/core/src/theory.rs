//! Numerical checks of the error-propagation bound.
//!
//! For a sample `x`, let `e_l = ||h_t_l - h_s_l||`. With a 1-Lipschitz
//! activation,
//!
//! ```text
//! e_l <= mu Lc_l + (1 - mu) Li_l + C_l(mu) e_{l-1},
//! C_l(mu) = rho_l (mu ||Ws_l|| + (1 - mu) ||Wt_l||),
//! ```
//!
//! where `Lc`, `Li` are the un-squared correction and imitation residuals,
//! `||W||` is the spectral norm of the kernel matrix acting on patch columns
//! and `rho_l` is the square root of the largest number of patches any input
//! pixel appears in (the patch unrolling duplicates pixels, so
//! `||unroll(a)|| <= rho ||a||`). Unrolling the recursion from `e_0 = 0` and
//! using the cross-entropy Lipschitz constant `2 ||W_fc||` gives
//!
//! ```text
//! |CE(o_t) - CE(o_s)| <= C (L~_L + sum_{l<L} prod_{k=l+1..L} C_k L~_l).
//! ```
//!
//! The variant whose products also include `C_l` itself and carry an extra
//! factor `C` per layer is reported alongside as `rhs_printed`; it is not a
//! bound in general and is never used for the satisfied flag.

use crate::error::{invalid, shape_err, Result};
use crate::network::Network;
use crate::tensor::{kernel_matrix, log_sum_exp, operator_norm, Matrix, Tensor};

/// Tolerance of the per-sample inequality check.
pub const BOUND_SLACK: f64 = 1e-9;

/// Kernel reshaped to `(c_out, c_in * k * k)`, the operator on patch columns.
/// Linear weights give `(d_out, d_in)`.
pub fn weight_matrix(w: &Tensor) -> Matrix {
    kernel_matrix(w)
}

pub fn spectral_norm(w: &Tensor) -> f64 {
    operator_norm(&weight_matrix(w))
}

/// Lipschitz constant of `a -> CE(W a + b; y)` in the Euclidean norm: `2 ||W||`.
pub fn lipschitz_c(final_weights: &Tensor) -> f64 {
    2.0 * spectral_norm(final_weights)
}

/// `mu ||Ws|| + (1 - mu) ||Wt||`.
pub fn c_k_mu(w_s: &Tensor, w_t: &Tensor, mu: f64) -> f64 {
    mu * spectral_norm(w_s) + (1.0 - mu) * spectral_norm(w_t)
}

/// Right-hand sides from the per-layer constants and objectives.
///
/// Returns `(rigorous, printed)`; see the module docs.
pub fn bound_rhs(c: f64, c_layers: &[f64], objectives: &[f64]) -> Result<(f64, f64)> {
    if c_layers.len() != objectives.len() || objectives.is_empty() {
        return Err(invalid(format!(
            "{} layer constants for {} objectives",
            c_layers.len(),
            objectives.len()
        )));
    }
    let depth = objectives.len();
    let mut rigorous = objectives[depth - 1];
    let mut printed = c * objectives[depth - 1];
    for l in 0..depth - 1 {
        let tail: f64 = c_layers[l + 1..].iter().product();
        rigorous += tail * objectives[l];
        let with_own: f64 = c_layers[l..].iter().map(|ck| c * ck).product();
        printed += with_own * objectives[l];
    }
    Ok((c * rigorous, printed))
}

/// Student weights zero-embedded into the teacher's shapes, so that pruned
/// channels read and write zeros.
pub fn embed_in_teacher_shape(student: &Network, teacher: &Network) -> Result<Network> {
    if student.num_layers() != teacher.num_layers() || student.num_conv() != teacher.num_conv() {
        return Err(shape_err(format!(
            "student depth {} differs from teacher depth {}",
            student.num_layers(),
            teacher.num_layers()
        )));
    }
    let cls = teacher.classifier_index();
    if student.weights()[cls].shape() != teacher.weights()[cls].shape() {
        return Err(shape_err("student and teacher classifiers differ in shape"));
    }
    let Some(origin) = student.channel_origin() else {
        for l in 0..teacher.num_layers() {
            if student.weights()[l].shape() != teacher.weights()[l].shape() {
                return Err(shape_err(format!(
                    "layer {l} shapes differ and no channel map is recorded"
                )));
            }
        }
        return Ok(student.clone());
    };
    let mut embedded = teacher.clone().with_role(student.role());
    let mut kept_in: Vec<usize> = (0..teacher.input_shape()[0]).collect();
    for l in 0..teacher.num_conv() {
        let w_t = &teacher.weights()[l];
        let w_s = &student.weights()[l];
        let [c_out, c_in, k, _] = w_t.shape();
        let mut w = Tensor::zeros(w_t.shape());
        for (so, &to) in origin[l].iter().enumerate() {
            for (si, &ti) in kept_in.iter().enumerate() {
                for ky in 0..k {
                    for kx in 0..k {
                        let v = w_s.get([so, si, ky, kx]);
                        let idx = w.index([to, ti, ky, kx]);
                        w.data_mut()[idx] = v;
                    }
                }
            }
        }
        debug_assert!(origin[l].iter().all(|&c| c < c_out) && kept_in.iter().all(|&c| c < c_in));
        embedded.set_weights(l, w)?;
        kept_in = origin[l].clone();
    }
    embedded.set_weights(cls, student.weights()[cls].clone())?;
    embedded.set_bias(student.bias().to_vec())?;
    Ok(embedded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBound {
    pub layer: usize,
    pub norm_t: f64,
    pub norm_s: f64,
    /// Square root of the largest patch multiplicity of the layer input.
    pub rho: f64,
    pub c_mu: f64,
    /// Mean over samples of the un-squared `mu Lc + (1 - mu) Li`.
    pub objective: f64,
    /// Mean squared estimation error per sample.
    pub estimation: f64,
    pub eps_t: f64,
    pub eps_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBound {
    pub lhs: f64,
    pub rhs: f64,
    pub rhs_printed: f64,
}

impl SampleBound {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub mu: f64,
    pub layers: Vec<LayerBound>,
    /// Cross-entropy Lipschitz constant of the shared classifier.
    pub c: f64,
    pub samples: Vec<SampleBound>,
    pub lhs_mean: f64,
    pub rhs_mean: f64,
    pub rhs_printed_mean: f64,
    pub min_slack: f64,
    pub mean_slack: f64,
    pub bound_satisfied: bool,
}

impl BoundReport {
    /// Number of samples violating `lhs <= rhs + BOUND_SLACK`.
    pub fn violations(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| !(s.lhs <= s.rhs + BOUND_SLACK))
            .count()
    }

    /// One row per layer followed by one global row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "# xdistill bound-report v1\nscope,layer,mu,norm_t,norm_s,rho,c_mu,objective,estimation,eps_t,eps_s,c,lhs_mean,rhs_mean,rhs_printed_mean,min_slack,mean_slack,satisfied\n",
        );
        for l in &self.layers {
            s.push_str(&format!(
                "layer,{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},,,,,,,\n",
                l.layer, self.mu, l.norm_t, l.norm_s, l.rho, l.c_mu, l.objective, l.estimation, l.eps_t, l.eps_s
            ));
        }
        s.push_str(&format!(
            "global,,{},,,,,,,,,{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            self.mu,
            self.c,
            self.lhs_mean,
            self.rhs_mean,
            self.rhs_printed_mean,
            self.min_slack,
            self.mean_slack,
            self.bound_satisfied
        ));
        s
    }
}

fn sample_dist(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    a.sample(i)
        .iter()
        .zip(b.sample(i))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// The four layer outputs behind every per-layer quantity:
/// `teacher(h_t)`, `student(h_t)`, `teacher(h_s)`, `student(h_s)`.
struct LayerMaps {
    tt: Tensor,
    st: Tensor,
    ts: Tensor,
    ss: Tensor,
}

fn layer_maps(
    teacher: &Network,
    student: &Network,
    l: usize,
    h_t: &Tensor,
    h_s: &Tensor,
) -> Result<LayerMaps> {
    Ok(LayerMaps {
        tt: teacher.conv_forward(l, h_t)?,
        st: student.conv_forward(l, h_t)?,
        ts: teacher.conv_forward(l, h_s)?,
        ss: student.conv_forward(l, h_s)?,
    })
}

fn check_eval(teacher: &Network, images: &Tensor, labels: &[usize]) -> Result<()> {
    if images.n() != labels.len() {
        return Err(shape_err(format!(
            "{} images and {} labels",
            images.n(),
            labels.len()
        )));
    }
    if images.n() == 0 {
        return Err(invalid("evaluation batch is empty"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= teacher.num_classes()) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Evaluates the propagation bound per sample on `(images, labels)`.
pub fn theorem_bound(
    teacher: &Network,
    student: &Network,
    mu: f64,
    images: &Tensor,
    labels: &[usize],
) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid(format!("mu = {mu} outside [0, 1]")));
    }
    check_eval(teacher, images, labels)?;
    let student = embed_in_teacher_shape(student, teacher)?;
    let n = images.n();
    let depth = teacher.num_conv();
    let shapes = teacher.feature_shapes();

    let mut h_t = images.clone();
    let mut h_s = images.clone();
    let mut layers = Vec::with_capacity(depth);
    let mut c_layers = Vec::with_capacity(depth);
    // objectives[l][i]
    let mut objectives = Vec::with_capacity(depth);
    for l in 0..depth {
        let w_t = &teacher.weights()[l];
        let w_s = &student.weights()[l];
        let g = teacher.layers()[l].geometry().expect("conv layer");
        let [_, h, w] = shapes[l];
        let rho = (g.max_patch_multiplicity(h, w)? as f64).sqrt();
        let (norm_t, norm_s) = (spectral_norm(w_t), spectral_norm(w_s));
        let c_mu = rho * (mu * norm_s + (1.0 - mu) * norm_t);
        let maps = layer_maps(teacher, &student, l, &h_t, &h_s)?;
        let per_sample: Vec<f64> = (0..n)
            .map(|i| {
                let lc = sample_dist(&maps.tt, &maps.st, i).sqrt();
                let li = sample_dist(&maps.ts, &maps.ss, i).sqrt();
                mu * lc + (1.0 - mu) * li
            })
            .collect();
        let mean_sq = |a: &Tensor, b: &Tensor| a.sq_dist(b).map(|d| d / n as f64);
        layers.push(LayerBound {
            layer: l,
            norm_t,
            norm_s,
            rho,
            c_mu,
            objective: per_sample.iter().sum::<f64>() / n as f64,
            estimation: mean_sq(&maps.tt, &maps.ss)?,
            eps_t: mean_sq(&maps.ts, &maps.tt)?,
            eps_s: mean_sq(&maps.st, &maps.ss)?,
        });
        c_layers.push(c_mu);
        objectives.push(per_sample);
        h_t = maps.tt;
        h_s = maps.ss;
    }

    let c = lipschitz_c(&teacher.weights()[teacher.classifier_index()]);
    let o_t = teacher.classify(&h_t)?;
    let o_s = student.classify(&h_s)?;
    let mut samples = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        let lhs = (cross_entropy(o_t.row(i), y) - cross_entropy(o_s.row(i), y)).abs();
        let obj: Vec<f64> = objectives.iter().map(|o| o[i]).collect();
        let (rhs, rhs_printed) = bound_rhs(c, &c_layers, &obj)?;
        samples.push(SampleBound {
            lhs,
            rhs,
            rhs_printed,
        });
    }
    let mean = |f: &dyn Fn(&SampleBound) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
    let lhs_mean = mean(&|s| s.lhs);
    let rhs_mean = mean(&|s| s.rhs);
    let rhs_printed_mean = mean(&|s| s.rhs_printed);
    let mean_slack = mean(&|s| s.slack());
    let min_slack = samples
        .iter()
        .map(|s| s.slack())
        .fold(f64::INFINITY, f64::min);
    let bound_satisfied = samples.iter().all(|s| s.lhs <= s.rhs + BOUND_SLACK);
    Ok(BoundReport {
        mu,
        layers,
        c,
        samples,
        lhs_mean,
        rhs_mean,
        rhs_printed_mean,
        min_slack,
        mean_slack,
        bound_satisfied,
    })
}

/// Per-layer train/inference mismatch diagnostics, each a mean squared
/// distance per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inconsistency {
    /// `||teacher(h_s) - teacher(h_t)||^2 / N`.
    pub eps_t: f64,
    /// `||student(h_t) - student(h_s)||^2 / N`.
    pub eps_s: f64,
    /// `||teacher(h_t) - student(h_s)||^2 / N`.
    pub estimation: f64,
}

impl Inconsistency {
    /// Ratios against a reference run (e.g. plain distillation); a zero
    /// reference gives `NaN` for that entry.
    pub fn relative_to(&self, reference: &Inconsistency) -> Inconsistency {
        let div = |a: f64, b: f64| if b == 0.0 { f64::NAN } else { a / b };
        Inconsistency {
            eps_t: div(self.eps_t, reference.eps_t),
            eps_s: div(self.eps_s, reference.eps_s),
            estimation: div(self.estimation, reference.estimation),
        }
    }
}

pub fn inconsistency_metrics(
    teacher: &Network,
    student: &Network,
    images: &Tensor,
) -> Result<Vec<Inconsistency>> {
    if images.n() == 0 {
        return Err(invalid("evaluation batch is empty"));
    }
    let student = embed_in_teacher_shape(student, teacher)?;
    let n = images.n() as f64;
    let mut h_t = images.clone();
    let mut h_s = images.clone();
    let mut out = Vec::with_capacity(teacher.num_conv());
    for l in 0..teacher.num_conv() {
        let maps = layer_maps(teacher, &student, l, &h_t, &h_s)?;
        out.push(Inconsistency {
            eps_t: maps.ts.sq_dist(&maps.tt)? / n,
            eps_s: maps.st.sq_dist(&maps.ss)? / n,
            estimation: maps.tt.sq_dist(&maps.ss)? / n,
        });
        h_t = maps.tt;
        h_s = maps.ss;
    }
    Ok(out)
}

/// Writes inconsistency rows as CSV text.
pub fn inconsistency_csv(rows: &[Inconsistency]) -> String {
    let mut s = String::from("# xdistill inconsistency v1\nlayer,eps_t,eps_s,estimation\n");
    for (l, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{l},{:.17e},{:.17e},{:.17e}\n",
            r.eps_t, r.eps_s, r.estimation
        ));
    }
    s
}
