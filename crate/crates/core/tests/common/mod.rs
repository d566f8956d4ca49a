//! Shared test machinery: finite-difference case builders for every layer
//! and loss, and a naive loop convolution oracle independent of the GEMM
//! and XNOR production paths.

use binlt_core::gradcheck::{self, CheckReport};
use binlt_core::graph::{Graph, NodeId, Params, Role};
use binlt_core::model::Balancer;
use binlt_core::scalar::{s, Scalar};
use binlt_core::tensor::{idx4, Tensor};
use binlt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2d,
    Linear,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Prelu,
    SteSurrogate,
    AvgPool,
    GlobalAvgPool,
    NearestUp,
    NearestDown,
    ChannelConcat,
    ChannelScale,
    ComputeAlpha,
    CrossEntropy,
    LtAwareCe,
    KlDiv,
    FeatureSim,
    BalancerMlp,
}

impl Case {
    pub const ALL: [Case; 19] = [
        Case::Conv2d,
        Case::Linear,
        Case::BatchNormTrain,
        Case::BatchNormEval,
        Case::Relu,
        Case::Prelu,
        Case::SteSurrogate,
        Case::AvgPool,
        Case::GlobalAvgPool,
        Case::NearestUp,
        Case::NearestDown,
        Case::ChannelConcat,
        Case::ChannelScale,
        Case::ComputeAlpha,
        Case::CrossEntropy,
        Case::LtAwareCe,
        Case::KlDiv,
        Case::FeatureSim,
        Case::BalancerMlp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Case::Conv2d => "conv2d",
            Case::Linear => "linear",
            Case::BatchNormTrain => "batchnorm2d(train)",
            Case::BatchNormEval => "batchnorm2d(eval)",
            Case::Relu => "relu",
            Case::Prelu => "prelu",
            Case::SteSurrogate => "ste_sign surrogate",
            Case::AvgPool => "avgpool",
            Case::GlobalAvgPool => "global_avgpool",
            Case::NearestUp => "nearest_resize(up)",
            Case::NearestDown => "nearest_resize(down)",
            Case::ChannelConcat => "channel_concat",
            Case::ChannelScale => "channel_scale",
            Case::ComputeAlpha => "compute_alpha",
            Case::CrossEntropy => "cross_entropy",
            Case::LtAwareCe => "lt_aware_ce",
            Case::KlDiv => "kl_div",
            Case::FeatureSim => "feature_similarity",
            Case::BalancerMlp => "balancer mlp",
        }
    }
}

/// Reduce any node to a scalar with a fixed random weighting, so every
/// element of the checked tensor receives a distinct upstream gradient.
fn scalarize<T: Scalar>(g: &mut Graph<T>, x: NodeId, weights: &Tensor<T>) -> Result<NodeId> {
    let n = g.value(x).numel();
    let flat = g.reshape(x, vec![1, n])?;
    let w = g.input(weights.clone().reshaped(vec![1, n]));
    let y = g.linear(flat, w, None)?;
    g.reshape(y, vec![1])
}

/// Values bounded away from zero (for kinked activations): |v| in
/// [lo, lo + span).
fn away_from_zero<T: Scalar>(shape: Vec<usize>, lo: f64, span: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = lo + span * rng.gen::<f64>();
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            s::<T>(sign * mag)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Run one finite-difference case; returns the worst normalized error.
pub fn run_case<T: Scalar>(case: Case, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = Params::<T>::new();
    match case {
        Case::Conv2d => {
            let x = ps.add("x", Tensor::randn(vec![2, 3, 6, 5], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let w = ps.add("w", Tensor::randn(vec![4, 3, 3, 3], 0.0, 0.5, &mut rng), Role::Encoder, true);
            let b = ps.add("b", Tensor::randn(vec![4], 0.0, 0.5, &mut rng), Role::Encoder, true);
            let stride = 1 + (seed % 2) as usize;
            let padding = (seed % 2) as usize;
            let weights = Tensor::randn(vec![2 * 4 * out(6, stride, padding) * out(5, stride, padding)], 0.0, 1.0, &mut rng);
            check(ps, &[x, w, b], move |p, g| {
                let xn = g.param(p, x);
                let wn = g.param(p, w);
                let bn = g.param(p, b);
                let y = g.conv2d(xn, wn, Some(bn), stride, padding)?;
                scalarize(g, y, &weights)
            })
        }
        Case::Linear => {
            let x = ps.add("x", Tensor::randn(vec![3, 7], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let w = ps.add("w", Tensor::randn(vec![4, 7], 0.0, 0.7, &mut rng), Role::Encoder, true);
            let b = ps.add("b", Tensor::randn(vec![4], 0.0, 0.5, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![12], 0.0, 1.0, &mut rng);
            check(ps, &[x, w, b], move |p, g| {
                let xn = g.param(p, x);
                let wn = g.param(p, w);
                let bn = g.param(p, b);
                let y = g.linear(xn, wn, Some(bn))?;
                scalarize(g, y, &weights)
            })
        }
        Case::BatchNormTrain => {
            let x = ps.add("x", Tensor::randn(vec![3, 2, 3, 4], 0.0, 1.5, &mut rng), Role::Encoder, true);
            let gamma = ps.add("gamma", Tensor::randn(vec![2], 1.0, 0.2, &mut rng), Role::Encoder, true);
            let beta = ps.add("beta", Tensor::randn(vec![2], 0.0, 0.2, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![3 * 2 * 3 * 4], 0.0, 1.0, &mut rng);
            check(ps, &[x, gamma, beta], move |p, g| {
                let xn = g.param(p, x);
                let gn = g.param(p, gamma);
                let bn = g.param(p, beta);
                let (y, _, _) = g.batchnorm_train(xn, gn, bn, s(1e-5))?;
                scalarize(g, y, &weights)
            })
        }
        Case::BatchNormEval => {
            let x = ps.add("x", Tensor::randn(vec![2, 3, 4, 4], 0.0, 1.5, &mut rng), Role::Encoder, true);
            let gamma = ps.add("gamma", Tensor::randn(vec![3], 1.0, 0.2, &mut rng), Role::Encoder, true);
            let beta = ps.add("beta", Tensor::randn(vec![3], 0.0, 0.2, &mut rng), Role::Encoder, true);
            let mean = Tensor::randn(vec![3], 0.0, 0.5, &mut rng);
            let var = Tensor::<T>::randn(vec![3], 1.0, 0.1, &mut rng).map(|v| v.abs() + s::<T>(0.5));
            let weights = Tensor::randn(vec![2 * 3 * 4 * 4], 0.0, 1.0, &mut rng);
            check(ps, &[x, gamma, beta], move |p, g| {
                let xn = g.param(p, x);
                let gn = g.param(p, gamma);
                let bn = g.param(p, beta);
                let y = g.batchnorm_eval(xn, gn, bn, mean.clone(), var.clone(), s(1e-5))?;
                scalarize(g, y, &weights)
            })
        }
        Case::Relu => {
            let x = ps.add("x", away_from_zero(vec![2, 3, 4, 4], 0.15, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 3 * 4 * 4], 0.0, 1.0, &mut rng);
            check(ps, &[x], move |p, g| {
                let xn = g.param(p, x);
                let y = g.relu(xn);
                scalarize(g, y, &weights)
            })
        }
        Case::Prelu => {
            let x = ps.add("x", away_from_zero(vec![2, 3, 4, 4], 0.15, 1.0, &mut rng), Role::Encoder, true);
            let a = ps.add("a", Tensor::rand_uniform(vec![3], 0.1, 0.5, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 3 * 4 * 4], 0.0, 1.0, &mut rng);
            check(ps, &[x, a], move |p, g| {
                let xn = g.param(p, x);
                let an = g.param(p, a);
                let y = g.prelu(xn, an)?;
                scalarize(g, y, &weights)
            })
        }
        Case::SteSurrogate => {
            // x bounded away from the clip edges and zero; the surrogate's
            // finite differences come from the clamp route below
            let n = 24;
            let data: Vec<T> = (0..n)
                .map(|_| {
                    let inside = rng.gen::<f64>() < 0.7;
                    let mag = if inside { 0.1 + 0.75 * rng.gen::<f64>() } else { 1.15 + 0.8 * rng.gen::<f64>() };
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    s::<T>(sign * mag)
                })
                .collect();
            let x = ps.add("x", Tensor::from_vec(vec![n], data), Role::Encoder, true);
            let weights = Tensor::randn(vec![n], 0.0, 1.0, &mut rng);
            let w2 = weights.clone();

            // route A: the straight-through estimator itself
            ps.zero_grads();
            let mut ga = Graph::new();
            let xa = ga.param(&ps, x);
            let ya = ga.ste_sign(xa, T::one());
            let la = scalarize(&mut ga, ya, &weights).unwrap();
            let grads_a = ga.backward(la).unwrap();
            ps.accumulate(&ga, &grads_a);
            let ste_grad = ps.get(x).grad.clone();

            // route B: explicit clamp surrogate relu(x+1) - relu(x-1) - 1,
            // same derivative as the STE window; finite-difference checked
            let report = check(ps.clone(), &[x], move |p, g| {
                let xn = g.param(p, x);
                let neg = g.scale_const(-T::one(), xn);
                let xp1 = g.const_minus(T::one(), neg); // x + 1
                let r1 = g.relu(xp1);
                let xm1 = g.const_minus(-T::one(), neg); // x - 1
                let r2 = g.relu(xm1);
                let nr2 = g.scale_const(-T::one(), r2);
                let clamp_shift = g.add(r1, nr2)?; // clamp(x,-1,1) + 1
                scalarize(g, clamp_shift, &w2)
            });

            // the two routes must agree exactly on the STE gradient
            ps.zero_grads();
            let mut gb = Graph::new();
            let xb = gb.param(&ps, x);
            let neg = gb.scale_const(-T::one(), xb);
            let xp1 = gb.const_minus(T::one(), neg);
            let r1 = gb.relu(xp1);
            let xm1 = gb.const_minus(-T::one(), neg);
            let r2 = gb.relu(xm1);
            let nr2 = gb.scale_const(-T::one(), r2);
            let clamp_shift = gb.add(r1, nr2).unwrap();
            let lb = scalarize(&mut gb, clamp_shift, &weights).unwrap();
            let grads_b = gb.backward(lb).unwrap();
            ps.accumulate(&gb, &grads_b);
            let clamp_grad = ps.get(x).grad.clone();
            assert_eq!(ste_grad, clamp_grad, "STE backward must equal the clamp surrogate gradient");
            return report;
        }
        Case::AvgPool => {
            let x = ps.add("x", Tensor::randn(vec![2, 3, 6, 6], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 3 * 3 * 3], 0.0, 1.0, &mut rng);
            check(ps, &[x], move |p, g| {
                let xn = g.param(p, x);
                let y = g.avgpool(xn, 2, 2)?;
                scalarize(g, y, &weights)
            })
        }
        Case::GlobalAvgPool => {
            let x = ps.add("x", Tensor::randn(vec![2, 4, 5, 5], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![8], 0.0, 1.0, &mut rng);
            check(ps, &[x], move |p, g| {
                let xn = g.param(p, x);
                let y = g.global_avgpool(xn)?;
                scalarize(g, y, &weights)
            })
        }
        Case::NearestUp => {
            let x = ps.add("x", Tensor::randn(vec![1, 2, 3, 3], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 36], 0.0, 1.0, &mut rng);
            check(ps, &[x], move |p, g| {
                let xn = g.param(p, x);
                let y = g.nearest_up(xn, 2)?;
                scalarize(g, y, &weights)
            })
        }
        Case::NearestDown => {
            let x = ps.add("x", Tensor::randn(vec![1, 2, 6, 6], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 9], 0.0, 1.0, &mut rng);
            check(ps, &[x], move |p, g| {
                let xn = g.param(p, x);
                let y = g.nearest_down(xn, 2)?;
                scalarize(g, y, &weights)
            })
        }
        Case::ChannelConcat => {
            let a = ps.add("a", Tensor::randn(vec![2, 2, 3, 3], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let b = ps.add("b", Tensor::randn(vec![2, 3, 3, 3], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 5 * 9], 0.0, 1.0, &mut rng);
            check(ps, &[a, b], move |p, g| {
                let an = g.param(p, a);
                let bn = g.param(p, b);
                let y = g.channel_concat(&[an, bn])?;
                scalarize(g, y, &weights)
            })
        }
        Case::ChannelScale => {
            let x = ps.add("x", Tensor::randn(vec![2, 3, 4, 4], 0.0, 1.0, &mut rng), Role::Encoder, true);
            let sc = ps.add("s", Tensor::rand_uniform(vec![3], 0.2, 1.5, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![2 * 3 * 16], 0.0, 1.0, &mut rng);
            check(ps, &[x, sc], move |p, g| {
                let xn = g.param(p, x);
                let sn = g.param(p, sc);
                let y = g.channel_scale(xn, sn)?;
                scalarize(g, y, &weights)
            })
        }
        Case::ComputeAlpha => {
            let w = ps.add("w", away_from_zero(vec![3, 2, 3, 3], 0.15, 1.0, &mut rng), Role::Encoder, true);
            let weights = Tensor::randn(vec![3], 0.0, 1.0, &mut rng);
            check(ps, &[w], move |p, g| {
                let wn = g.param(p, w);
                let a = g.compute_alpha(wn)?;
                scalarize(g, a, &weights)
            })
        }
        Case::CrossEntropy => {
            let n = 5;
            let k = 4;
            let logits = ps.add("logits", Tensor::randn(vec![n, k], 0.0, 2.0, &mut rng), Role::Classifier, true);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            check(ps, &[logits], move |p, g| {
                let ln = g.param(p, logits);
                Ok(g.cross_entropy(ln, &labels)?.node)
            })
        }
        Case::LtAwareCe => {
            let n = 5;
            let k = 4;
            let logits = ps.add("logits", Tensor::randn(vec![n, k], 0.0, 2.0, &mut rng), Role::Classifier, true);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let counts: Vec<usize> = (0..k).map(|_| 10 + rng.gen_range(0..90)).collect();
            check(ps, &[logits], move |p, g| {
                let ln = g.param(p, logits);
                Ok(g.lt_aware_ce(ln, &labels, &counts, s(0.05), s(0.3))?.node)
            })
        }
        Case::KlDiv => {
            let n = 4;
            let k = 5;
            let student = ps.add("student", Tensor::randn(vec![n, k], 0.0, 1.5, &mut rng), Role::Classifier, true);
            let teacher = Tensor::randn(vec![n, k], 0.0, 1.5, &mut rng);
            let temp = [0.5, 1.0, 2.0][(seed % 3) as usize];
            check(ps, &[student], move |p, g| {
                let t = g.input(teacher.clone());
                let st = g.param(p, student);
                Ok(g.kl_div(t, st, s(temp))?.node)
            })
        }
        Case::FeatureSim => {
            let n = 4;
            let d = 6;
            let student = ps.add("student", Tensor::randn(vec![n, d], 0.5, 1.0, &mut rng), Role::Encoder, true);
            let teacher = Tensor::randn(vec![n, d], 0.5, 1.0, &mut rng);
            check(ps, &[student], move |p, g| {
                let t = g.input(teacher.clone());
                let st = g.param(p, student);
                Ok(g.feature_similarity(t, st)?.node)
            })
        }
        Case::BalancerMlp => {
            // ReLU kinks break central differences; resample until every
            // hidden pre-activation sits well outside the perturbation
            // radius (h <= 1e-3 * max|param|, sensitivities are O(1))
            const MARGIN: f64 = 0.02;
            let mut attempt = 0u64;
            let (ps, bal, k, f) = loop {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1315) + 77 + attempt);
                let mut ps = Params::<T>::new();
                let bal = Balancer::new(&mut ps, &mut rng);
                let k = 0.1 + 2.0 * rng.gen::<f64>();
                let f = 0.1 + 1.5 * rng.gen::<f64>();
                if balancer_preacts_clear_of_kinks(&bal, &ps, k, f, MARGIN) {
                    break (ps, bal, k, f);
                }
                attempt += 1;
                assert!(attempt < 10_000, "no kink-free balancer instance found");
            };
            check(ps, &(0..Balancer::<T>::WIDTHS.len() * 2 - 2).collect::<Vec<_>>(), move |p, g| {
                bal.forward(g, p, s(k), s(f))
            })
        }
    }
}

fn out(i: usize, stride: usize, padding: usize) -> usize {
    (i + 2 * padding - 3) / stride + 1
}

/// Forward the balancer MLP by hand and verify every pre-ReLU activation
/// is at least `margin` from zero.
fn balancer_preacts_clear_of_kinks<T: Scalar>(
    bal: &Balancer<T>,
    ps: &Params<T>,
    k: f64,
    f: f64,
    margin: f64,
) -> bool {
    // params were registered as l1.weight, l1.bias, l2.weight, ... in order
    let mut h: Vec<f64> = vec![k, f];
    for layer in 0..Balancer::<T>::WIDTHS.len() - 2 {
        let w = &ps.get(2 * layer).value;
        let b = &ps.get(2 * layer + 1).value;
        let (rows, cols) = w.dims2().unwrap();
        assert_eq!(cols, h.len());
        let mut next = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = b.data()[r].to_f64().unwrap();
            for c in 0..cols {
                acc += w.data()[r * cols + c].to_f64().unwrap() * h[c];
            }
            if acc.abs() < margin {
                return false;
            }
            next.push(acc.max(0.0));
        }
        h = next;
    }
    let _ = bal;
    true
}

fn check<T: Scalar>(
    mut ps: Params<T>,
    ids: &[usize],
    build: impl Fn(&Params<T>, &mut Graph<T>) -> Result<NodeId>,
) -> CheckReport {
    gradcheck::check(&mut ps, ids, gradcheck::DEFAULT_H_SCALE, build).expect("gradcheck build")
}

// ---- naive convolution oracle (independent of the GEMM/XNOR paths) ----

/// Straightforward loop convolution with an explicit padding value.
pub fn naive_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    let mut outt = Tensor::zeros(vec![n, co, ho, wo]);
    for im in 0..n {
        for f in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                let xv = if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    x.data()[idx4(x.shape(), im, ci, ih as usize, iw as usize)]
                                } else {
                                    pad_value
                                };
                                acc += xv * w.data()[idx4(w.shape(), f, ci, kh, kw)];
                            }
                        }
                    }
                    let o = idx4(outt.shape(), im, f, oh, ow);
                    outt.data_mut()[o] = acc;
                }
            }
        }
    }
    outt
}

/// Loop gradients of the naive convolution w.r.t. input and weight.
pub fn naive_conv_grads<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let (_, _, ho, wo) = upstream.dims4().unwrap();
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    for im in 0..n {
        for f in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = upstream.data()[idx4(upstream.shape(), im, f, oh, ow)];
                    for ci in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                let wj = idx4(w.shape(), f, ci, kh, kw);
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    let xj = idx4(x.shape(), im, ci, ih as usize, iw as usize);
                                    gx.data_mut()[xj] += g * w.data()[wj];
                                    gw.data_mut()[wj] += g * x.data()[xj];
                                } else {
                                    gw.data_mut()[wj] += g * pad_value;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
