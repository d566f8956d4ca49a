//! Dense numeric kernels behind both the autodiff graph and the
//! graph-free inference paths: im2col convolution on GEMM, pooling,
//! nearest resize, batch norm and row softmax.

use crate::scalar::Scalar;
use crate::tensor::{idx4, Tensor};

/// Output extent of a convolution/pooling axis.
#[inline]
pub fn conv_out(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Unfold every (k, k) patch into one row of a (N*Ho*Wo, C*k*k) matrix.
/// Out-of-bounds taps read `pad_value` (0 for float convs, +1 for the
/// binarized path where padding zeros pass through sign).
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("im2col input must be (N,C,H,W)");
    let ho = conv_out(h, k, stride, padding);
    let wo = conv_out(w, k, stride, padding);
    let ckk = c * k * k;
    let mut col = vec![T::zero(); n * ho * wo * ckk];
    let xd = x.data();
    let mut r = 0;
    for im in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &mut col[r * ckk..(r + 1) * ckk];
                let mut j = 0;
                for ci in 0..c {
                    let plane = (im * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih as usize >= h {
                            for _ in 0..k {
                                row[j] = pad_value;
                                j += 1;
                            }
                            continue;
                        }
                        let base = plane + ih as usize * w;
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            row[j] = if iw < 0 || iw as usize >= w {
                                pad_value
                            } else {
                                xd[base + iw as usize]
                            };
                            j += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Tensor::from_vec(vec![n * ho * wo, ckk], col)
}

/// Fold a (N*Ho*Wo, C*k*k) gradient matrix back onto the input, dropping
/// contributions that fell on padding.
pub fn col2im_add<T: Scalar>(
    col: &Tensor<T>,
    x_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (n, c, h, w) = x_shape;
    let ho = conv_out(h, k, stride, padding);
    let wo = conv_out(w, k, stride, padding);
    let ckk = c * k * k;
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    let od = out.data_mut();
    let cd = col.data();
    let mut r = 0;
    for im in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &cd[r * ckk..(r + 1) * ckk];
                let mut j = 0;
                for ci in 0..c {
                    let plane = (im * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih as usize >= h {
                            j += k;
                            continue;
                        }
                        let base = plane + ih as usize * w;
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw >= 0 && (iw as usize) < w {
                                od[base + iw as usize] += row[j];
                            }
                            j += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    out
}

/// Gather (N,Co,Ho,Wo) into position-major (N*Ho*Wo, Co).
fn grad_as_rows<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, co, ho, wo) = g.dims4().expect("conv grad must be (N,Co,Ho,Wo)");
    let mut m = vec![T::zero(); n * ho * wo * co];
    let gd = g.data();
    for im in 0..n {
        for f in 0..co {
            let src = (im * co + f) * ho * wo;
            let dst0 = im * ho * wo;
            for p in 0..ho * wo {
                m[(dst0 + p) * co + f] = gd[src + p];
            }
        }
    }
    Tensor::from_vec(vec![n * ho * wo, co], m)
}

pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4().expect("conv input");
    let (co, cw, k, _) = w.dims4().expect("conv kernel");
    assert_eq!(c, cw, "channel mismatch");
    let ho = conv_out(h, k, stride, padding);
    let wo = conv_out(wd, k, stride, padding);
    let p = n * ho * wo;
    let ckk = c * k * k;
    let col = im2col(x, k, stride, padding, pad_value);
    let mut out_mat = vec![T::zero(); p * co];
    T::gemm_nt(p, ckk, co, T::one(), col.data(), w.data(), T::zero(), &mut out_mat);

    let mut out = vec![T::zero(); n * co * ho * wo];
    for im in 0..n {
        for f in 0..co {
            let b = bias.map_or(T::zero(), |b| b.data()[f]);
            let dst = (im * co + f) * ho * wo;
            let src0 = im * ho * wo;
            for q in 0..ho * wo {
                out[dst + q] = out_mat[(src0 + q) * co + f] + b;
            }
        }
    }
    Tensor::from_vec(vec![n, co, ho, wo], out)
}

pub fn conv2d_bwd_input<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (co, c, k, _) = w.dims4().expect("conv kernel");
    let g_mat = grad_as_rows(g);
    let p = g_mat.shape()[0];
    let mut grad_col = vec![T::zero(); p * c * k * k];
    T::gemm(p, co, c * k * k, T::one(), g_mat.data(), w.data(), T::zero(), &mut grad_col);
    col2im_add(&Tensor::from_vec(vec![p, c * k * k], grad_col), x_shape, k, stride, padding)
}

pub fn conv2d_bwd_weight<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    pad_value: T,
) -> Tensor<T> {
    let (co, c, k, _) = w_shape;
    let col = im2col(x, k, stride, padding, pad_value);
    let g_mat = grad_as_rows(g);
    let p = g_mat.shape()[0];
    let mut gw = vec![T::zero(); co * c * k * k];
    T::gemm_tn(co, p, c * k * k, T::one(), g_mat.data(), col.data(), T::zero(), &mut gw);
    Tensor::from_vec(vec![co, c, k, k], gw)
}

pub fn conv2d_bwd_bias<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, co, ho, wo) = g.dims4().expect("conv grad");
    let mut gb = vec![T::zero(); co];
    let gd = g.data();
    for im in 0..n {
        for f in 0..co {
            let src = (im * co + f) * ho * wo;
            for q in 0..ho * wo {
                gb[f] += gd[src + q];
            }
        }
    }
    Tensor::from_vec(vec![co], gb)
}

/// `x (N,D) . w(K,D)^T + b` -> (N,K)
pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, d) = x.dims2().expect("linear input");
    let (k, dw) = w.dims2().expect("linear weight");
    assert_eq!(d, dw, "feature width mismatch");
    let mut out = vec![T::zero(); n * k];
    T::gemm_nt(n, d, k, T::one(), x.data(), w.data(), T::zero(), &mut out);
    if let Some(b) = bias {
        for row in 0..n {
            for j in 0..k {
                out[row * k + j] += b.data()[j];
            }
        }
    }
    Tensor::from_vec(vec![n, k], out)
}

pub fn linear_bwd_input<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, k) = g.dims2().expect("linear grad");
    let (kw, d) = w.dims2().expect("linear weight");
    assert_eq!(k, kw);
    let mut gx = vec![T::zero(); n * d];
    T::gemm(n, k, d, T::one(), g.data(), w.data(), T::zero(), &mut gx);
    Tensor::from_vec(vec![n, d], gx)
}

pub fn linear_bwd_weight<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let (n, k) = g.dims2().expect("linear grad");
    let (nx, d) = x.dims2().expect("linear input");
    assert_eq!(n, nx);
    let mut gw = vec![T::zero(); k * d];
    T::gemm_tn(k, n, d, T::one(), g.data(), x.data(), T::zero(), &mut gw);
    Tensor::from_vec(vec![k, d], gw)
}

pub fn colsum<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, k) = g.dims2().expect("colsum input");
    let mut out = vec![T::zero(); k];
    for row in 0..n {
        for j in 0..k {
            out[j] += g.data()[row * k + j];
        }
    }
    Tensor::from_vec(vec![k], out)
}

pub fn avgpool_fwd<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("pool input");
    let ho = conv_out(h, k, stride, 0);
    let wo = conv_out(w, k, stride, 0);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for kh in 0..k {
                        for kw in 0..k {
                            acc += x.data()[idx4(x.shape(), im, ci, oh * stride + kh, ow * stride + kw)];
                        }
                    }
                    let o = idx4(out.shape(), im, ci, oh, ow);
                    out.data_mut()[o] = acc * inv;
                }
            }
        }
    }
    out
}

pub fn avgpool_bwd<T: Scalar>(
    g: &Tensor<T>,
    x_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let (n, c, h, w) = x_shape;
    let (_, _, ho, wo) = g.dims4().expect("pool grad");
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut gx = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g.data()[idx4(g.shape(), im, ci, oh, ow)] * inv;
                    for kh in 0..k {
                        for kw in 0..k {
                            let o = idx4(gx.shape(), im, ci, oh * stride + kh, ow * stride + kw);
                            gx.data_mut()[o] += gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn global_avgpool_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("gap input");
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut out = vec![T::zero(); n * c];
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            let mut acc = T::zero();
            for q in 0..h * w {
                acc += x.data()[base + q];
            }
            out[im * c + ci] = acc * inv;
        }
    }
    Tensor::from_vec(vec![n, c], out)
}

pub fn global_avgpool_bwd<T: Scalar>(g: &Tensor<T>, x_shape: (usize, usize, usize, usize)) -> Tensor<T> {
    let (n, c, h, w) = x_shape;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut gx = vec![T::zero(); n * c * h * w];
    for im in 0..n {
        for ci in 0..c {
            let gv = g.data()[im * c + ci] * inv;
            let base = (im * c + ci) * h * w;
            for q in 0..h * w {
                gx[base + q] = gv;
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], gx)
}

/// Nearest upsample by an integer factor: each pixel becomes an f x f block.
pub fn nearest_up_fwd<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("resize input");
    let mut out = Tensor::zeros(vec![n, c, h * f, w * f]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..h * f {
                for ow in 0..w * f {
                    let v = x.data()[idx4(x.shape(), im, ci, oh / f, ow / f)];
                    let o = idx4(out.shape(), im, ci, oh, ow);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    out
}

/// Gradient of nearest upsample: sum over each replicated block.
pub fn nearest_up_bwd<T: Scalar>(g: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, hf, wf) = g.dims4().expect("resize grad");
    let (h, w) = (hf / f, wf / f);
    let mut gx = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..hf {
                for ow in 0..wf {
                    let o = idx4(gx.shape(), im, ci, oh / f, ow / f);
                    gx.data_mut()[o] += g.data()[idx4(g.shape(), im, ci, oh, ow)];
                }
            }
        }
    }
    gx
}

/// Nearest downsample by an integer factor: keep every f-th pixel.
pub fn nearest_down_fwd<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("resize input");
    let (ho, wo) = (h / f, w / f);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let v = x.data()[idx4(x.shape(), im, ci, oh * f, ow * f)];
                    let o = idx4(out.shape(), im, ci, oh, ow);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    out
}

pub fn nearest_down_bwd<T: Scalar>(
    g: &Tensor<T>,
    x_shape: (usize, usize, usize, usize),
    f: usize,
) -> Tensor<T> {
    let (n, c, h, w) = x_shape;
    let (_, _, ho, wo) = g.dims4().expect("resize grad");
    let mut gx = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let o = idx4(gx.shape(), im, ci, oh * f, ow * f);
                    gx.data_mut()[o] += g.data()[idx4(g.shape(), im, ci, oh, ow)];
                }
            }
        }
    }
    gx
}

pub fn concat_channels_fwd<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = xs[0].dims4().expect("concat input");
    let c_total: usize = xs.iter().map(|x| x.shape()[1]).sum();
    let mut out = Tensor::zeros(vec![n, c_total, h, w]);
    for im in 0..n {
        let mut c_off = 0;
        for x in xs {
            let c = x.shape()[1];
            let src = &x.data()[im * c * h * w..(im + 1) * c * h * w];
            let dst0 = (im * c_total + c_off) * h * w;
            out.data_mut()[dst0..dst0 + c * h * w].copy_from_slice(src);
            c_off += c;
        }
    }
    out
}

/// Saved context for the batch-norm backward pass.
pub struct BnCtx<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance, for running-stat updates.
    pub var: Vec<T>,
}

pub fn batchnorm_train_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, BnCtx<T>) {
    let (n, c, h, w) = x.dims4().expect("bn input");
    let m = T::from_usize(n * h * w).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            for q in 0..h * w {
                mean[ci] += x.data()[base + q];
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            for q in 0..h * w {
                let d = x.data()[base + q] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(vec![n, c, h, w]);
    let mut y = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for q in 0..h * w {
                let xh = (x.data()[base + q] - mean[ci]) * invstd[ci];
                xhat.data_mut()[base + q] = xh;
                y.data_mut()[base + q] = g * xh + b;
            }
        }
    }
    (y, BnCtx { xhat, invstd, mean, var })
}

pub fn batchnorm_train_bwd<T: Scalar>(
    g: &Tensor<T>,
    ctx: &BnCtx<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = g.dims4().expect("bn grad");
    let m = T::from_usize(n * h * w).unwrap();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            for q in 0..h * w {
                sum_g[ci] += g.data()[base + q];
                sum_gx[ci] += g.data()[base + q] * ctx.xhat.data()[base + q];
            }
        }
    }
    let mut gx = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            let k = gamma.data()[ci] * ctx.invstd[ci];
            let mg = sum_g[ci] / m;
            let mgx = sum_gx[ci] / m;
            for q in 0..h * w {
                let gv = g.data()[base + q];
                let xh = ctx.xhat.data()[base + q];
                gx.data_mut()[base + q] = k * (gv - mg - xh * mgx);
            }
        }
    }
    (gx, Tensor::from_vec(vec![c], sum_gx), Tensor::from_vec(vec![c], sum_g))
}

pub fn batchnorm_eval_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("bn input");
    let mut y = Tensor::zeros(vec![n, c, h, w]);
    for im in 0..n {
        for ci in 0..c {
            let base = (im * c + ci) * h * w;
            let inv = T::one() / (running_var.data()[ci] + eps).sqrt();
            let (g, b, mu) = (gamma.data()[ci], beta.data()[ci], running_mean.data()[ci]);
            for q in 0..h * w {
                y.data_mut()[base + q] = g * (x.data()[base + q] - mu) * inv + b;
            }
        }
    }
    y
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k) = logits.dims2().expect("softmax input");
    let mut out = Tensor::zeros(vec![n, k]);
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let m = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for j in 0..k {
            let e = (src[j] - m).exp();
            out.data_mut()[row * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out.data_mut()[row * k + j] /= z;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k) = logits.dims2().expect("softmax input");
    let mut out = Tensor::zeros(vec![n, k]);
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let m = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let z = src.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
        let lse = m + z.ln();
        for j in 0..k {
            out.data_mut()[row * k + j] = src[j] - lse;
        }
    }
    out
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, k) = logits.dims2().expect("argmax input");
    (0..n)
        .map(|row| {
            let src = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if src[j] > src[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
