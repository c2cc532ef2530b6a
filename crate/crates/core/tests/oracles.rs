//! Library results against independent reference implementations.

mod common;

use common::*;
use rand::Rng;
use xdistill_core::data::{Dataset, SynthSpec};
use xdistill_core::distill::{
    compress_network, DistillConfig, DistillMode, LayerContext, Objective,
};
use xdistill_core::network::{convnet_s, Activation, LayerKind, Network, PruneScheme, Role};
use xdistill_core::prox::{prox_group, prox_l1, Regularizer};
use xdistill_core::tensor::{
    conv2d_direct, conv2d_gemm, im2col, kernel_matrix, operator_norm, ConvGeometry, Tensor,
};
use xdistill_core::theory::{lipschitz_c, spectral_norm, theorem_bound, BOUND_SLACK};
use xdistill_core::trainer::{backprop_grads, mean_cross_entropy, AdamConfig, AdamState};

fn act(a: Activation, t: &Tensor) -> Tensor {
    t.map(|v| match a {
        Activation::Relu => v.max(0.0),
        Activation::Clip01 => v.clamp(0.0, 1.0),
        Activation::None => v,
    })
}

fn sq_dist_per_sample(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.n() as f64
}

fn mix(a: &Tensor, wa: f64, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| wa * x + (1.0 - wa) * y).unwrap()
}

/// Layer objective written out from its definition with the naive convolution.
fn reference_loss(ctx: &LayerContext, obj: Objective) -> f64 {
    let (s, p) = (ctx.geometry.stride, ctx.geometry.pad);
    let a = ctx.activation;
    let t_out = |x: &Tensor| act(a, &naive_conv(x, &ctx.w_t, s, p));
    let s_out = |x: &Tensor| act(a, &naive_conv(x, &ctx.w_s, s, p));
    let (ht, hs) = (&ctx.h_prev_t, &ctx.h_prev_s);
    match obj {
        Objective::Estimation => sq_dist_per_sample(&t_out(ht), &s_out(hs)),
        Objective::Correction => sq_dist_per_sample(&t_out(ht), &s_out(ht)),
        Objective::Imitation => sq_dist_per_sample(&t_out(hs), &s_out(hs)),
        Objective::Combined { mu } => {
            mu * sq_dist_per_sample(&t_out(ht), &s_out(ht))
                + (1.0 - mu) * sq_dist_per_sample(&t_out(hs), &s_out(hs))
        }
        Objective::Soft { alpha, beta } => sq_dist_per_sample(
            &t_out(&mix(ht, alpha, hs)),
            &s_out(&mix(ht, 1.0 - beta, hs)),
        ),
    }
}

fn random_ctx(seed: u64, activation: Activation) -> LayerContext {
    let mut r = rng(seed);
    let n = r.random_range(1..=3);
    let ci = r.random_range(1..=3);
    let co = r.random_range(1..=4);
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let side = r.random_range(k.max(3)..=6);
    LayerContext::new(
        nonneg([n, ci, side, side], &mut r),
        nonneg([n, ci, side, side], &mut r),
        uniform([co, ci, k, k], &mut r),
        uniform([co, ci, k, k], &mut r),
        ConvGeometry::new(k, stride, k / 2),
        activation,
    )
    .unwrap()
}

const OBJECTIVES: [Objective; 5] = [
    Objective::Estimation,
    Objective::Correction,
    Objective::Imitation,
    Objective::Combined { mu: 0.35 },
    Objective::Soft {
        alpha: 0.7,
        beta: 0.4,
    },
];

#[test]
fn convolutions_match_loop_nest() {
    let mut r = rng(1);
    for _ in 0..100 {
        let n = r.random_range(1..=3);
        let ci = r.random_range(1..=4);
        let co = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..=3);
        let pad = r.random_range(0..=k / 2);
        let h = r.random_range(k..=9);
        let w = r.random_range(k..=9);
        let x = uniform([n, ci, h, w], &mut r);
        let kern = uniform([co, ci, k, k], &mut r);
        let want = naive_conv(&x, &kern, stride, pad);
        let direct = conv2d_direct(&x, &kern, stride, pad).unwrap();
        let gemm = conv2d_gemm(&im2col(&x, k, stride, pad).unwrap(), &kern).unwrap();
        assert_eq!(direct.shape(), want.shape());
        assert!(rel_err(direct.data(), want.data(), 1.0) < 1e-12);
        assert!(rel_err(gemm.data(), want.data(), 1.0) < 1e-12);
    }
}

#[test]
fn layer_losses_match_definitions() {
    for seed in 0..30 {
        for a in [Activation::Relu, Activation::Clip01] {
            let ctx = random_ctx(seed, a);
            for obj in OBJECTIVES {
                let got = ctx.loss(obj).unwrap();
                let want = reference_loss(&ctx, obj);
                assert!(
                    (got - want).abs() <= 1e-10 * want.max(1.0),
                    "{obj:?}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..20 {
        let ctx = random_ctx(100 + seed, Activation::Relu);
        for obj in OBJECTIVES {
            let (_, grad) = ctx.loss_grad(obj).unwrap();
            let fd = finite_diff(&ctx.w_s, 1e-6, |w| {
                ctx.with_student_weights(w.clone())
                    .unwrap()
                    .loss(obj)
                    .unwrap()
            });
            let err = rel_err(grad.data(), &fd, 1e-3);
            assert!(err <= 1e-5, "seed {seed} {obj:?}: relative error {err:e}");
        }
    }
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..5 {
        let net = random_net(2, 300 + seed);
        let mut r = rng(seed);
        let [c, h, w] = net.input_shape();
        let images = nonneg([4, c, h, w], &mut r);
        let classes = net.num_classes();
        let labels: Vec<usize> = (0..4).map(|i| i % classes).collect();
        let data = Dataset::new(images.clone(), labels, classes).unwrap();
        let targets = data.one_hot();
        let grads = backprop_grads(&net, &images, &targets, None).unwrap();
        for l in 0..net.num_layers() {
            let fd = finite_diff(&net.weights()[l], 1e-6, |wl| {
                let mut m = net.clone();
                m.set_weights(l, wl.clone()).unwrap();
                mean_cross_entropy(&m, &images, &targets).unwrap()
            });
            let err = rel_err(grads.weights[l].data(), &fd, 1e-3);
            assert!(err <= 1e-5, "layer {l}: {err:e}");
        }
        let bias = Tensor::new([1, 1, 1, classes], net.bias().to_vec()).unwrap();
        let fd = finite_diff(&bias, 1e-6, |b| {
            let mut m = net.clone();
            m.set_bias(b.data().to_vec()).unwrap();
            mean_cross_entropy(&m, &images, &targets).unwrap()
        });
        assert!(rel_err(&grads.bias, &fd, 1e-3) <= 1e-5);
    }
}

#[test]
fn spectral_norm_matches_svd() {
    let mut r = rng(5);
    for _ in 0..50 {
        let co = r.random_range(1..=6);
        let ci = r.random_range(1..=4);
        let k = [1, 3][r.random_range(0..2)];
        let w = uniform([co, ci, k, k], &mut r);
        let want = svd_norm(co, ci * k * k, w.data());
        assert!((spectral_norm(&w) - want).abs() <= 1e-8 * want);
        assert!((operator_norm(&kernel_matrix(&w)) - want).abs() <= 1e-8 * want);
    }
}

#[test]
fn prox_maps_match_grid_search() {
    let mut r = rng(6);
    for _ in 0..40 {
        let w = uniform([2, 2, 1, 2], &mut r);
        let lambda = r.random_range(0.0..0.8);
        let got = prox_l1(&w, lambda);
        for (g, &u) in got.data().iter().zip(w.data()) {
            assert!((g - oracle_prox_l1(u, lambda)).abs() <= 1e-6);
        }
        let got = prox_group(&w, lambda * 2.0);
        for (row, (g, u)) in got.data().chunks(4).zip(w.data().chunks(4)).enumerate() {
            let want = oracle_prox_group(u, lambda * 2.0);
            assert!(rel_err(g, &want, 1.0) <= 1e-6, "group {row}");
        }
    }
}

/// Textbook bias-corrected Adam on a flat parameter vector.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_reference_over_100_steps() {
    let mut r = rng(7);
    let mut a: Vec<f64> = (0..13).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut b: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut ref_p: Vec<f64> = a.iter().chain(&b).copied().collect();
    let mut lib = AdamState::new(&[13, 5], AdamConfig::with_lr(3e-3));
    let mut reference = RefAdam {
        m: vec![0.0; 18],
        v: vec![0.0; 18],
        t: 0,
    };
    for _ in 0..100 {
        let g: Vec<f64> = (0..18).map(|_| r.random_range(-2.0..2.0)).collect();
        lib.step(&mut [&mut a, &mut b], &[&g[..13], &g[13..]])
            .unwrap();
        reference.step(&mut ref_p, &g, 3e-3);
    }
    let lib_p: Vec<f64> = a.iter().chain(&b).copied().collect();
    for (x, y) in lib_p.iter().zip(&ref_p) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_eq!(lib.step_count(), 100);
}

/// Plain-estimation distillation of every convolution, written from scratch:
/// naive convolution, explicit gradient, reference Adam, and magnitude
/// zeroing of the `ceil(s n)` smallest entries (ties zero together) at the
/// linearly ramped level.
fn reference_nc(
    teacher: &Network,
    images: &Tensor,
    lr: f64,
    iters: usize,
    ramp: usize,
    target: f64,
) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut h_t = images.clone();
    let mut h_s = images.clone();
    for l in 0..teacher.num_conv() {
        let LayerKind::Conv { stride, pad, .. } = teacher.layers()[l].kind else {
            unreachable!()
        };
        let w_t = &teacher.weights()[l];
        let target_map = naive_conv(&h_t, w_t, stride, pad).map(|v| v.max(0.0));
        let mut w = w_t.clone();
        let mut adam = RefAdam {
            m: vec![0.0; w.len()],
            v: vec![0.0; w.len()],
            t: 0,
        };
        let n = images.n() as f64;
        let [_, ci, kh, kw] = w.shape();
        for t in 0..iters {
            let pre = naive_conv(&h_s, &w, stride, pad);
            let mut g = vec![0.0; w.len()];
            let [nb, co, oh, ow] = pre.shape();
            for b in 0..nb {
                for o in 0..co {
                    for y in 0..oh {
                        for x in 0..ow {
                            let p = pre.get([b, o, y, x]);
                            if p <= 0.0 {
                                continue;
                            }
                            let d = 2.0 * (p - target_map.get([b, o, y, x])) / n;
                            for c in 0..ci {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let iy = (y * stride + dy) as i64 - pad as i64;
                                        let ix = (x * stride + dx) as i64 - pad as i64;
                                        if iy >= 0
                                            && ix >= 0
                                            && (iy as usize) < h_s.h()
                                            && (ix as usize) < h_s.w()
                                        {
                                            g[((o * ci + c) * kh + dy) * kw + dx] +=
                                                d * h_s.get([b, c, iy as usize, ix as usize]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            adam.step(w.data_mut(), &g, lr);
            let level = target * ((t + 1) as f64 / ramp as f64).min(1.0);
            let m = (level * w.len() as f64).ceil() as usize;
            if m > 0 {
                let mut mags: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
                mags.sort_by(f64::total_cmp);
                let thresh = mags[m - 1];
                w.data_mut()
                    .iter_mut()
                    .filter(|v| v.abs() <= thresh)
                    .for_each(|v| *v = 0.0);
            }
        }
        h_t = target_map;
        h_s = naive_conv(&h_s, &w, stride, pad).map(|v| v.max(0.0));
        out.push(w);
    }
    out
}

#[test]
fn nc_distillation_matches_reference() {
    let layers = convnet_s([1, 6, 6], &[3, 4], &[1, 2], 3, 3).unwrap();
    let teacher = Network::init([1, 6, 6], layers, Role::Teacher, 21).unwrap();
    let data = SynthSpec::new(3, 4, 1, 6, 6, 2).generate().unwrap();
    let cfg = DistillConfig {
        mode: DistillMode::Nc,
        iters: 50,
        ramp_iters: 20,
        lr: 1e-2,
        regularizer: Regularizer::L1 { sparsity: 0.5 },
        ..DistillConfig::default()
    };
    let scheme = PruneScheme::unstructured(0.5, &teacher).unwrap();
    let (student, _) = compress_network(&teacher, &data, &cfg, &scheme, None).unwrap();
    let want = reference_nc(&teacher, &data.images, 1e-2, 50, 20, 0.5);
    for (l, w) in want.iter().enumerate() {
        let got = &student.weights()[l];
        assert_eq!(got.count_nonzero(), w.count_nonzero(), "layer {l}");
        let err = got
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "layer {l}: {err:e}");
    }
    assert_eq!(student.weights()[2], teacher.weights()[2]);
}

#[test]
fn synthetic_task_is_learnable_by_template_matching() {
    let spec = SynthSpec {
        per_class: 50,
        ..SynthSpec::new(10, 50, 1, 16, 16, 7)
    };
    let data = spec.generate().unwrap();
    let templates = spec.templates();
    let s = spec.max_shift as i64;
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut correct = 0;
    for i in 0..data.len() {
        let x = data.images.sample(i);
        let dist = |class: usize| -> f64 {
            let mut best = f64::INFINITY;
            for dy in -s..=s {
                for dx in -s..=s {
                    let mut d = 0.0;
                    for y in 0..h {
                        for xx in 0..w {
                            let t = templates.get([
                                class,
                                0,
                                (y - dy).clamp(0, h - 1) as usize,
                                (xx - dx).clamp(0, w - 1) as usize,
                            ]);
                            d += (x[(y * w + xx) as usize] - t).powi(2);
                        }
                    }
                    best = best.min(d);
                }
            }
            best
        };
        let pred = (0..10)
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .unwrap();
        correct += usize::from(pred == data.labels[i]);
    }
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.95, "template matching accuracy {acc}");
}

#[test]
fn cross_entropy_is_lipschitz_in_features() {
    let mut r = rng(8);
    for _ in 0..2000 {
        let d_in = r.random_range(1..=8);
        let d_out = r.random_range(2..=6);
        let w = uniform([d_out, d_in, 1, 1], &mut r).map(|v| 3.0 * v);
        let a: Vec<f64> = (0..d_in).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d_in).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = r.random_range(0..d_out);
        let logits = |x: &[f64]| -> Vec<f64> {
            (0..d_out)
                .map(|o| (0..d_in).map(|i| w.get([o, i, 0, 0]) * x[i]).sum())
                .collect()
        };
        let gap = (ce(&logits(&a), y) - ce(&logits(&b), y)).abs();
        let dist = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt();
        let c = 2.0 * svd_norm(d_out, d_in, w.data());
        assert!(gap <= c * dist + 1e-9);
        assert!((lipschitz_c(&w) - c).abs() <= 1e-8 * c.max(1.0));
    }
}

#[test]
fn propagation_bound_holds_for_random_pairs() {
    for seed in 0..25 {
        let depth = 1 + (seed as usize % 4);
        let teacher = random_net(depth, 500 + seed);
        let student = perturbed(&teacher, 0.3, 900 + seed);
        let [c, h, w] = teacher.input_shape();
        let images = nonneg([6, c, h, w], &mut rng(seed));
        let labels: Vec<usize> = (0..6).map(|i| i % teacher.num_classes()).collect();
        for mu in [0.0, 0.6, 1.0] {
            let report = theorem_bound(&teacher, &student, mu, &images, &labels).unwrap();
            assert!(report.bound_satisfied);
            assert!(report.samples.iter().all(|s| s.lhs <= s.rhs + BOUND_SLACK));
        }
    }
}
