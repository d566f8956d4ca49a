//! Layer wrappers over the parameter store and the three networks: the
//! float teacher with its multi-resolution matching head, the binary
//! student, and the small balancer MLP that mixes the distillation losses.
//!
//! Every layer offers a graph forward (training) and a graph-free `infer`
//! path. The teacher encoder only ever runs through `infer`: after
//! pretraining it is frozen and stays out of every backward graph.

use crate::bits;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, Params, Role};
use crate::ops;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        ps: &mut Params<T>,
        name: &str,
        role: Role,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), Tensor::randn(vec![co, ci, k, k], 0.0, std, rng), role, true);
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(vec![co]), role, true));
        Self { w, b, stride, padding }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &Params<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::conv2d_fwd(
            x,
            &ps.get(self.w).value,
            self.b.map(|b| &ps.get(b).value),
            self.stride,
            self.padding,
            T::zero(),
        )
    }
}

/// Binarized convolution: latent float weights, sign both operands on the
/// forward pass, scale by per-channel alpha (mean |w| or a learned vector).
#[derive(Clone, Debug)]
pub struct BinConv2dLayer {
    pub w: ParamId,
    pub alpha: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl BinConv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        ps: &mut Params<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        learned_alpha: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        let w0 = Tensor::randn(vec![co, ci, k, k], 0.0, std, rng);
        let alpha = learned_alpha.then(|| {
            let a0 = bits::compute_alpha(&w0).expect("kernel shape");
            ps.add(
                format!("{name}.alpha"),
                Tensor::from_vec(vec![co], a0.values().to_vec()),
                Role::Encoder,
                true,
            )
        });
        let w = ps.add(format!("{name}.weight"), w0, Role::Encoder, true);
        Self { w, alpha, stride, padding }
    }

    /// `x` is the pre-binarization activation; both operands go through
    /// the straight-through sign before the XNOR convolution.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &Params<T>, x: NodeId, clip: T) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let xs = g.ste_sign(x, clip);
        let ws = g.ste_sign(w, clip);
        let y = g.xnor_conv2d(xs, ws, self.stride, self.padding)?;
        let alpha = match self.alpha {
            Some(a) => g.param(ps, a),
            None => g.compute_alpha(w)?,
        };
        g.channel_scale(y, alpha)
    }

    pub fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let w = &ps.get(self.w).value;
        let alpha = match self.alpha {
            Some(a) => bits::ScaleVector::new(ps.get(a).value.data().iter().map(|v| v.abs()).collect())
                .expect("alpha entries"),
            None => bits::compute_alpha(w).expect("kernel shape"),
        };
        bits::binary_conv2d(x, w, &alpha, self.stride, self.padding).expect("binary conv shapes")
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2dLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2dLayer {
    pub fn init<T: Scalar>(ps: &mut Params<T>, name: &str, role: Role, c: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(vec![c], T::one()), role, true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![c]), role, true),
            running_mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(vec![c]), role, false),
            running_var: ps.add(format!("{name}.running_var"), Tensor::full(vec![c], T::one()), role, false),
        }
    }

    /// Batch statistics forward; folds them into the running buffers with
    /// momentum 0.1 (running variance uses the unbiased estimate).
    pub fn forward_train<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut Params<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let (n, _, h, w) = g.value(x).dims4()?;
        let (y, mean, var) = g.batchnorm_train(x, gamma, beta, s(BN_EPS))?;
        let m = (n * h * w) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let mom = s::<T>(BN_MOMENTUM);
        let keep = T::one() - mom;
        {
            let rm = &mut ps.get_mut(self.running_mean).value;
            for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + mom * b;
            }
        }
        {
            let rv = &mut ps.get_mut(self.running_var).value;
            for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                *r = keep * *r + mom * b * s::<T>(unbias);
            }
        }
        Ok(y)
    }

    pub fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::batchnorm_eval_fwd(
            x,
            &ps.get(self.gamma).value,
            &ps.get(self.beta).value,
            &ps.get(self.running_mean).value,
            &ps.get(self.running_var).value,
            s(BN_EPS),
        )
    }
}

#[derive(Clone, Debug)]
pub enum Activation {
    Relu,
    Prelu(ParamId),
}

impl Activation {
    pub fn init<T: Scalar>(ps: &mut Params<T>, name: &str, role: Role, c: usize, prelu: bool) -> Self {
        if prelu {
            Activation::Prelu(ps.add(format!("{name}.slope"), Tensor::full(vec![c], s(0.25)), role, true))
        } else {
            Activation::Relu
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &Params<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => Ok(g.relu(x)),
            Activation::Prelu(a) => {
                let an = g.param(ps, *a);
                g.prelu(x, an)
            }
        }
    }

    pub fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::Prelu(a) => {
                let slope = &ps.get(*a).value;
                let (n, c, h, w) = x.dims4().expect("prelu input");
                let mut out = x.clone();
                for im in 0..n {
                    for ci in 0..c {
                        let sl = slope.data()[ci];
                        let base = (im * c + ci) * h * w;
                        for q in 0..h * w {
                            let v = out.data()[base + q];
                            if v < T::zero() {
                                out.data_mut()[base + q] = sl * v;
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn init<T: Scalar>(
        ps: &mut Params<T>,
        name: &str,
        role: Role,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.weight"), Tensor::rand_uniform(vec![out_dim, in_dim], -bound, bound, rng), role, true),
            b: ps.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), role, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &Params<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, Some(b))
    }

    pub fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::linear_fwd(x, &ps.get(self.w).value, Some(&ps.get(self.b).value))
    }
}

/// Float conv-BN-activation block.
#[derive(Clone, Debug)]
struct FloatBlock {
    conv: Conv2dLayer,
    bn: BatchNorm2dLayer,
    act: Activation,
}

impl FloatBlock {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar>(
        ps: &mut Params<T>,
        name: &str,
        role: Role,
        ci: usize,
        co: usize,
        stride: usize,
        prelu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2dLayer::init(ps, &format!("{name}.conv"), role, ci, co, 3, stride, 1, false, rng),
            bn: BatchNorm2dLayer::init(ps, &format!("{name}.bn"), role, co),
            act: Activation::init(ps, &format!("{name}.act"), role, co, prelu),
        }
    }

    fn forward_train<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut Params<T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(g, &*ps, x)?;
        let y = self.bn.forward_train(g, ps, y)?;
        self.act.forward(g, &*ps, y)
    }

    fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.conv.infer(ps, x);
        let y = self.bn.infer(ps, &y);
        self.act.infer(ps, &y)
    }
}

/// Binary conv-BN-activation block.
#[derive(Clone, Debug)]
struct BinBlock {
    conv: BinConv2dLayer,
    bn: BatchNorm2dLayer,
    act: Activation,
}

impl BinBlock {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar>(
        ps: &mut Params<T>,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
        prelu: bool,
        learned_alpha: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: BinConv2dLayer::init(ps, &format!("{name}.conv"), ci, co, 3, stride, 1, learned_alpha, rng),
            bn: BatchNorm2dLayer::init(ps, &format!("{name}.bn"), Role::Encoder, co),
            act: Activation::init(ps, &format!("{name}.act"), Role::Encoder, co, prelu),
        }
    }

    fn forward_train<T: Scalar>(&self, g: &mut Graph<T>, ps: &mut Params<T>, x: NodeId, clip: T) -> Result<NodeId> {
        let y = self.conv.forward(g, &*ps, x, clip)?;
        let y = self.bn.forward_train(g, ps, y)?;
        self.act.forward(g, &*ps, y)
    }

    fn infer<T: Scalar>(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.conv.infer(ps, x);
        let y = self.bn.infer(ps, &y);
        self.act.infer(ps, &y)
    }
}

/// 1-bit student: float stem and classifier, binary conv blocks between.
/// Parameters split exactly into Encoder and Classifier roles.
#[derive(Clone, Debug)]
pub struct BinaryModel<T> {
    stem: FloatBlock,
    blocks: Vec<BinBlock>,
    head: LinearLayer,
    pub width: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub ste_clip: T,
}

impl<T: Scalar> BinaryModel<T> {
    pub fn new(
        ps: &mut Params<T>,
        width: usize,
        num_classes: usize,
        prelu: bool,
        learned_alpha: bool,
        ste_clip: T,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = FloatBlock::init(ps, "encoder.stem", Role::Encoder, 3, width, 1, prelu, rng);
        let dims = [(width, 2 * width, 2), (2 * width, 2 * width, 1), (2 * width, 4 * width, 2), (4 * width, 4 * width, 1)];
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, stride))| {
                BinBlock::init(ps, &format!("encoder.block{}", i + 1), ci, co, stride, prelu, learned_alpha, rng)
            })
            .collect();
        let feature_dim = 4 * width;
        let head = LinearLayer::init(ps, "classifier", Role::Classifier, feature_dim, num_classes, rng);
        Self { stem, blocks, head, width, feature_dim, num_classes, ste_clip }
    }

    /// Training forward: returns (pooled features, logits) graph nodes.
    pub fn forward_train(&self, g: &mut Graph<T>, ps: &mut Params<T>, x: &Tensor<T>) -> Result<(NodeId, NodeId)> {
        let mut h = {
            let xin = g.input(x.clone());
            self.stem.forward_train(g, ps, xin)?
        };
        for b in &self.blocks {
            h = b.forward_train(g, ps, h, self.ste_clip)?;
        }
        let feat = g.global_avgpool(h)?;
        let logits = self.head.forward(g, &*ps, feat)?;
        Ok((feat, logits))
    }

    /// Inference on the bit-packed kernels with frozen batch-norm stats.
    pub fn infer(&self, ps: &Params<T>, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut h = self.stem.infer(ps, x);
        for b in &self.blocks {
            h = b.infer(ps, &h);
        }
        let feat = ops::global_avgpool_fwd(&h);
        let logits = self.head.infer(ps, &feat);
        (feat, logits)
    }

    pub fn classifier_weight_name() -> &'static str {
        "classifier.weight"
    }

    pub fn arch_json(&self) -> serde_json::Value {
        json!({
            "kind": "binary",
            "width": self.width,
            "num_classes": self.num_classes,
            "prelu": matches!(self.stem.act, Activation::Prelu(_)),
            "learned_alpha": self.blocks[0].conv.alpha.is_some(),
            "ste_clip": self.ste_clip.to_f64(),
        })
    }
}

/// Frozen-encoder teacher with per-resolution 1x1 matching convolutions
/// and a classifier over the channel-concatenated multi-resolution
/// features (single-resolution mode collapses to the base path).
#[derive(Clone, Debug)]
pub struct TeacherModel<T> {
    blocks: Vec<FloatBlock>,
    encoder_param_ids: Vec<ParamId>,
    pub pretrain_head: LinearLayer,
    pub match_s: Conv2dLayer,
    pub match_b: Conv2dLayer,
    pub match_l: Conv2dLayer,
    pub classifier: LinearLayer,
    pub width: usize,
    pub encoder_dim: usize,
    pub d_b: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub resolutions: (usize, usize, usize),
    pub multi_res: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> TeacherModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut Params<T>,
        width: usize,
        d_b: usize,
        num_classes: usize,
        resolutions: (usize, usize, usize),
        multi_res: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let before = ps.len();
        let dims = [(3, width, 1), (width, 2 * width, 2), (2 * width, 4 * width, 2), (4 * width, 4 * width, 1)];
        let blocks: Vec<FloatBlock> = dims
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, stride))| {
                FloatBlock::init(ps, &format!("encoder.block{}", i + 1), Role::Encoder, ci, co, stride, false, rng)
            })
            .collect();
        let encoder_dim = 4 * width;
        let encoder_param_ids = (before..ps.len()).collect();

        let pretrain_head = LinearLayer::init(ps, "pretrain_head", Role::Classifier, encoder_dim, num_classes, rng);
        let match_s = Conv2dLayer::init(ps, "match_s", Role::Classifier, encoder_dim, d_b, 1, 1, 0, true, rng);
        let match_b = Conv2dLayer::init(ps, "match_b", Role::Classifier, encoder_dim, d_b, 1, 1, 0, true, rng);
        let match_l = Conv2dLayer::init(ps, "match_l", Role::Classifier, encoder_dim, d_b, 1, 1, 0, true, rng);
        let feature_dim = if multi_res { 3 * d_b } else { d_b };
        let classifier = LinearLayer::init(ps, "classifier", Role::Classifier, feature_dim, num_classes, rng);
        Self {
            blocks,
            encoder_param_ids,
            pretrain_head,
            match_s,
            match_b,
            match_l,
            classifier,
            width,
            encoder_dim,
            d_b,
            feature_dim,
            num_classes,
            resolutions,
            multi_res,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn encoder_param_ids(&self) -> &[ParamId] {
        &self.encoder_param_ids
    }

    /// Training-mode encoder forward (pretraining only).
    pub fn encoder_forward_train(&self, g: &mut Graph<T>, ps: &mut Params<T>, x: &Tensor<T>) -> Result<NodeId> {
        let mut h = {
            let xin = g.input(x.clone());
            self.blocks[0].forward_train(g, ps, xin)?
        };
        for b in &self.blocks[1..] {
            h = b.forward_train(g, ps, h)?;
        }
        Ok(h)
    }

    /// Graph-free encoder forward; the only encoder path used once frozen.
    pub fn encoder_infer(&self, ps: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.blocks[0].infer(ps, x);
        for b in &self.blocks[1..] {
            h = b.infer(ps, &h);
        }
        h
    }

    /// Freeze every encoder parameter (weights and BN buffers).
    pub fn freeze_encoder(&self, ps: &mut Params<T>) {
        for &id in &self.encoder_param_ids {
            ps.freeze(id, Role::TeacherFrozen);
        }
    }

    pub fn encoder_frozen(&self, ps: &Params<T>) -> bool {
        self.encoder_param_ids.iter().all(|&id| {
            let p = ps.get(id);
            p.role == Role::TeacherFrozen && !p.trainable
        })
    }

    fn resize_image(&self, x: &Tensor<T>, to: usize) -> Result<Tensor<T>> {
        let (_, _, h, _) = x.dims4()?;
        if to == h {
            Ok(x.clone())
        } else if to > h {
            if to % h != 0 {
                return Err(Error::InvalidShape(format!("resize {h} -> {to}")));
            }
            Ok(ops::nearest_up_fwd(x, to / h))
        } else {
            if h % to != 0 {
                return Err(Error::InvalidShape(format!("resize {h} -> {to}")));
            }
            Ok(ops::nearest_down_fwd(x, h / to))
        }
    }

    /// Frozen-encoder feature maps entering the calibration graph as
    /// constants: only the matching convs and classifier are trainable.
    ///
    /// Returns logits. Expects `x` at the base resolution; errors if the
    /// encoder is still trainable.
    pub fn calibrate_forward(&self, g: &mut Graph<T>, ps: &Params<T>, x: &Tensor<T>) -> Result<NodeId> {
        if !self.encoder_frozen(ps) {
            return Err(Error::ContractViolation(
                "calibration requires a frozen teacher encoder".into(),
            ));
        }
        let (_, _, h, w) = x.dims4()?;
        let (rs, rb, rl) = self.resolutions;
        if h != rb || w != rb {
            return Err(Error::ShapeMismatch(format!(
                "calibration input is {h}x{w}, base resolution is {rb}"
            )));
        }
        let fb = self.encoder_infer(ps, x);
        let concat = if self.multi_res {
            let fs = self.encoder_infer(ps, &self.resize_image(x, rs)?);
            let fl = self.encoder_infer(ps, &self.resize_image(x, rl)?);
            let fs_n = g.input(fs);
            let fb_n = g.input(fb);
            let fl_n = g.input(fl);
            let ms = self.match_s.forward(g, ps, fs_n)?;
            let mb = self.match_b.forward(g, ps, fb_n)?;
            let ml = self.match_l.forward(g, ps, fl_n)?;
            let target = g.value(mb).shape()[2];
            let ms_r = {
                let cur = g.value(ms).shape()[2];
                if target == cur { ms } else { g.nearest_up(ms, target / cur)? }
            };
            let ml_r = {
                let cur = g.value(ml).shape()[2];
                if target == cur { ml } else { g.nearest_down(ml, cur / target)? }
            };
            g.channel_concat(&[ms_r, mb, ml_r])?
        } else {
            let fb_n = g.input(fb);
            self.match_b.forward(g, ps, fb_n)?
        };
        let pooled = g.global_avgpool(concat)?;
        self.classifier.forward(g, ps, pooled)
    }

    /// Fully graph-free teacher forward for distillation. Returns the
    /// pooled base-resolution matched feature (the slice aligned with the
    /// student's resolution) and the classifier logits.
    pub fn forward_infer(&self, ps: &Params<T>, x: &Tensor<T>) -> Result<TeacherOutput<T>> {
        let (_, _, h, w) = x.dims4()?;
        let (rs, rb, rl) = self.resolutions;
        if h != rb || w != rb {
            return Err(Error::ShapeMismatch(format!(
                "teacher input is {h}x{w}, base resolution is {rb}"
            )));
        }
        let fb = self.encoder_infer(ps, x);
        let mb = self.match_b.infer(ps, &fb);
        let features = ops::global_avgpool_fwd(&mb);
        let concat = if self.multi_res {
            let fs = self.encoder_infer(ps, &self.resize_image(x, rs)?);
            let fl = self.encoder_infer(ps, &self.resize_image(x, rl)?);
            let ms = self.match_s.infer(ps, &fs);
            let ml = self.match_l.infer(ps, &fl);
            let target = mb.shape()[2];
            let ms_r = if ms.shape()[2] == target { ms } else { ops::nearest_up_fwd(&ms, target / ms.shape()[2]) };
            let ml_r = if ml.shape()[2] == target { ml } else { ops::nearest_down_fwd(&ml, ml.shape()[2] / target) };
            ops::concat_channels_fwd(&[&ms_r, &mb, &ml_r])
        } else {
            mb
        };
        let pooled = ops::global_avgpool_fwd(&concat);
        let logits = self.classifier.infer(ps, &pooled);
        Ok(TeacherOutput { features, logits })
    }

    pub fn arch_json(&self) -> serde_json::Value {
        json!({
            "kind": "teacher",
            "width": self.width,
            "d_b": self.d_b,
            "num_classes": self.num_classes,
            "resolutions": [self.resolutions.0, self.resolutions.1, self.resolutions.2],
            "multi_res": self.multi_res,
        })
    }
}

/// Teacher outputs consumed by one distillation step.
#[derive(Clone, Debug)]
pub struct TeacherOutput<T> {
    /// Pooled base-resolution matched feature, (N, D_B).
    pub features: Tensor<T>,
    /// Classifier logits, (N, K).
    pub logits: Tensor<T>,
}

/// Adversarial balancing MLP: two scalar losses in, one sigmoid scalar out.
/// Hidden widths grow by 16 from 2 input channels: 18, 34, 50.
#[derive(Clone, Debug)]
pub struct Balancer<T> {
    layers: Vec<LinearLayer>,
    pub last_lambda: f64,
    pub last_k: f64,
    pub last_f: f64,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Balancer<T> {
    pub const WIDTHS: [usize; 5] = [2, 18, 34, 50, 1];

    pub fn new(ps: &mut Params<T>, rng: &mut ChaCha8Rng) -> Self {
        let layers = Self::WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, wh)| LinearLayer::init(ps, &format!("balancer.l{}", i + 1), Role::Balancer, wh[0], wh[1], rng))
            .collect();
        Self { layers, last_lambda: 0.5, last_k: 0.0, last_f: 0.0, _marker: std::marker::PhantomData }
    }

    /// `lambda = sigmoid(MLP([k, f]))` as a graph node; `k`, `f` enter as
    /// detached scalars so gradients reach only the balancer parameters.
    pub fn forward(&self, g: &mut Graph<T>, ps: &Params<T>, k: T, f: T) -> Result<NodeId> {
        if !k.is_finite() || !f.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "balancer inputs K={k}, F={f}"
            )));
        }
        let mut h = g.input(Tensor::from_vec(vec![1, 2], vec![k, f]));
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        let out = g.sigmoid(h);
        g.reshape(out, vec![1])
    }

    /// Zero the final layer so the initial output is exactly 0.5.
    pub fn zero_init_output(&self, ps: &mut Params<T>) {
        let last = self.layers.last().unwrap();
        ps.get_mut(last.w).value.fill(T::zero());
        ps.get_mut(last.b).value.fill(T::zero());
    }
}
