//! Reverse-mode autodiff on an eager tape.
//!
//! Forward values are computed when a node is pushed; `backward` walks the
//! tape in reverse insertion order (which is a valid reverse topological
//! order by construction) and accumulates gradients left-to-right per node,
//! so runs are deterministic. Gradient buffers are only allocated for nodes
//! that require gradients: a frozen parameter never gets one.

use crate::bits;
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

/// Which part of the system a parameter belongs to; optimizers step
/// role-filtered subsets and frozen teacher weights never move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Classifier,
    Balancer,
    TeacherFrozen,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Classifier => "classifier",
            Role::Balancer => "balancer",
            Role::TeacherFrozen => "teacher_frozen",
        }
    }
}

/// Named trainable (or buffer) tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: Role,
    pub trainable: bool,
}

/// Flat parameter store; `ParamId`s are stable indices into it.
#[derive(Clone, Debug, Default)]
pub struct Params<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: Role, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate param {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Param { name, value, grad, role, trainable });
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Multiply gradients of matching trainable params by `factor`
    /// (used for the gradient-ascent step on the balancer).
    pub fn scale_grads(&mut self, role: Role, factor: T) {
        for p in &mut self.entries {
            if p.role == role && p.trainable {
                p.grad.scale(factor);
            }
        }
    }

    /// Mark a parameter frozen: not trainable, gradient pinned to zero.
    pub fn freeze(&mut self, id: ParamId, role: Role) {
        let p = &mut self.entries[id];
        p.role = role;
        p.trainable = false;
        p.grad.fill(T::zero());
    }

    /// Fold gradients harvested from a backward pass into the store.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &GradStore<T>) {
        for &(node, pid) in &graph.param_leaves {
            if !self.entries[pid].trainable {
                continue;
            }
            if let Some(g) = &grads.grads[node] {
                self.entries[pid].grad.axpy(T::one(), g);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Mul,
    /// `c - x`
    ConstMinus(T),
    /// `c * x`
    ScaleConst(T),
    Reshape,
    Relu,
    Sigmoid,
    /// inputs `[x, slope(C)]`, x is (N,C,H,W)
    PRelu,
    /// forward = sign(x) in ±1 (0 maps to +1); backward passes the
    /// upstream gradient through where `|x| <= clip`
    SteSign { clip: T },
    /// inputs `[x, w]` or `[x, w, b]`; zero padding
    Conv2d { stride: usize, padding: usize },
    /// inputs `[x_signed, w_signed]`; ±1 operands, padding binarizes to +1;
    /// forward runs on packed bits, backward on the dense signed values
    XnorConv2d { stride: usize, padding: usize },
    /// inputs `[x, s(Co)]`
    ChannelScale,
    /// per-output-channel mean |w|
    ComputeAlpha,
    /// inputs `[x, w]` or `[x, w, b]`
    Linear,
    /// inputs `[x, gamma, beta]`
    BatchNormTrain { ctx: ops::BnCtx<T> },
    /// inputs `[x, gamma, beta]`; running stats are captured constants
    BatchNormEval { mean: Tensor<T>, var: Tensor<T>, eps: T },
    AvgPool { k: usize, stride: usize },
    GlobalAvgPool,
    NearestUp { factor: usize },
    NearestDown { factor: usize },
    ChannelConcat,
    /// input `[logits]`; mean of -log softmax at the label
    CrossEntropy { probs: Tensor<T>, labels: Vec<usize> },
    /// input `[logits]`; cross-entropy against smoothed target rows
    LtAwareCe { probs: Tensor<T>, targets: Tensor<T> },
    /// inputs `[teacher_logits, student_logits]`; gradient flows into the
    /// student side only
    KlDiv { temp: T, p_teacher: Tensor<T>, q_student: Tensor<T> },
    /// inputs `[teacher_feat, student_feat]`; mean (1 - cosine), gradient
    /// into the student side only
    FeatureSim { eps: T },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Per-backward-pass gradient buffers, indexed by node.
pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_leaves: Vec::new() }
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as plain
    /// constants: no gradient buffer is ever allocated for them.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> NodeId {
        let p = params.get(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: p.value.clone(),
            requires_grad: p.trainable,
        });
        let node = self.nodes.len() - 1;
        self.param_leaves.push((node, id));
        NodeId(node)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_leaves(&self) -> &[(usize, ParamId)] {
        &self.param_leaves
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(Op::Add, vec![a.0, b.0], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(Op::Mul, vec![a.0, b.0], v))
    }

    pub fn const_minus(&mut self, c: T, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| c - e);
        self.push(Op::ConstMinus(c), vec![x.0], v)
    }

    pub fn scale_const(&mut self, c: T, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| c * e);
        self.push(Op::ScaleConst(c), vec![x.0], v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {:?}",
                v.shape(),
                shape
            )));
        }
        let v = v.reshaped(shape);
        Ok(self.push(Op::Reshape, vec![x.0], v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| e.max(T::zero()));
        self.push(Op::Relu, vec![x.0], v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| T::one() / (T::one() + (-e).exp()));
        self.push(Op::Sigmoid, vec![x.0], v)
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let (_, c, _, _) = self.nodes[x.0].value.dims4()?;
        if self.nodes[slope.0].value.numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "prelu slope has {} entries for {} channels",
                self.nodes[slope.0].value.numel(),
                c
            )));
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[slope.0].value;
        let (n, _, h, w) = xv.dims4()?;
        let mut out = Tensor::zeros(xv.shape().to_vec());
        for im in 0..n {
            for ci in 0..c {
                let a = sv.data()[ci];
                let base = (im * c + ci) * h * w;
                for q in 0..h * w {
                    let e = xv.data()[base + q];
                    out.data_mut()[base + q] = if e > T::zero() { e } else { a * e };
                }
            }
        }
        Ok(self.push(Op::PRelu, vec![x.0, slope.0], out))
    }

    pub fn ste_sign(&mut self, x: NodeId, clip: T) -> NodeId {
        let v = self.nodes[x.0].value.map(|e| if e >= T::zero() { T::one() } else { -T::one() });
        self.push(Op::SteSign { clip }, vec![x.0], v)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (_, c, _, _) = self.nodes[x.0].value.dims4()?;
        let (co, cw, _, _) = self.nodes[w.0].value.dims4()?;
        if c != cw {
            return Err(Error::ShapeMismatch(format!("conv2d channels {c} vs kernel {cw}")));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.numel() != co {
                return Err(Error::ShapeMismatch("conv2d bias length".into()));
            }
        }
        let v = ops::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            stride,
            padding,
            T::zero(),
        );
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, v))
    }

    /// Convolution over ±1 operands, forward on packed bits.
    pub fn xnor_conv2d(&mut self, x_signed: NodeId, w_signed: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = bits::xnor_conv_unscaled(
            &self.nodes[x_signed.0].value,
            &self.nodes[w_signed.0].value,
            stride,
            padding,
        )?;
        Ok(self.push(Op::XnorConv2d { stride, padding }, vec![x_signed.0, w_signed.0], v))
    }

    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        if self.nodes[scale.0].value.numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "channel_scale {} entries for {} channels",
                self.nodes[scale.0].value.numel(),
                c
            )));
        }
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value;
        let mut out = Tensor::zeros(xv.shape().to_vec());
        for im in 0..n {
            for ci in 0..c {
                let s = sv.data()[ci];
                let base = (im * c + ci) * h * w;
                for q in 0..h * w {
                    out.data_mut()[base + q] = s * xv.data()[base + q];
                }
            }
        }
        Ok(self.push(Op::ChannelScale, vec![x.0, scale.0], out))
    }

    pub fn compute_alpha(&mut self, w: NodeId) -> Result<NodeId> {
        let alpha = bits::compute_alpha(&self.nodes[w.0].value)?;
        let v = Tensor::from_vec(vec![alpha.len()], alpha.values().to_vec());
        Ok(self.push(Op::ComputeAlpha, vec![w.0], v))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (_, d) = self.nodes[x.0].value.dims2()?;
        let (k, dw) = self.nodes[w.0].value.dims2()?;
        if d != dw {
            return Err(Error::ShapeMismatch(format!("linear features {d} vs weight {dw}")));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.numel() != k {
                return Err(Error::ShapeMismatch("linear bias length".into()));
            }
        }
        let v = ops::linear_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
        );
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push(Op::Linear, inputs, v))
    }

    /// Training-mode batch norm; returns the node plus the biased batch
    /// mean/var so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let (_, c, _, _) = self.nodes[x.0].value.dims4()?;
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(Error::ShapeMismatch("batchnorm affine length".into()));
        }
        let (y, ctx) = ops::batchnorm_train_fwd(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        );
        let (mean, var) = (ctx.mean.clone(), ctx.var.clone());
        let id = self.push(Op::BatchNormTrain { ctx }, vec![x.0, gamma.0, beta.0], y);
        Ok((id, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    ) -> Result<NodeId> {
        let (_, c, _, _) = self.nodes[x.0].value.dims4()?;
        if mean.numel() != c || var.numel() != c {
            return Err(Error::ShapeMismatch("batchnorm running stats length".into()));
        }
        let y = ops::batchnorm_eval_fwd(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            &mean,
            &var,
            eps,
        );
        Ok(self.push(Op::BatchNormEval { mean, var, eps }, vec![x.0, gamma.0, beta.0], y))
    }

    pub fn avgpool(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.nodes[x.0].value.dims4()?;
        let v = ops::avgpool_fwd(&self.nodes[x.0].value, k, stride);
        Ok(self.push(Op::AvgPool { k, stride }, vec![x.0], v))
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.nodes[x.0].value.dims4()?;
        let v = ops::global_avgpool_fwd(&self.nodes[x.0].value);
        Ok(self.push(Op::GlobalAvgPool, vec![x.0], v))
    }

    pub fn nearest_up(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.nodes[x.0].value.dims4()?;
        let v = ops::nearest_up_fwd(&self.nodes[x.0].value, factor);
        Ok(self.push(Op::NearestUp { factor }, vec![x.0], v))
    }

    pub fn nearest_down(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (_, _, h, w) = self.nodes[x.0].value.dims4()?;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidShape(format!(
                "nearest_down factor {factor} does not divide {h}x{w}"
            )));
        }
        let v = ops::nearest_down_fwd(&self.nodes[x.0].value, factor);
        Ok(self.push(Op::NearestDown { factor }, vec![x.0], v))
    }

    pub fn channel_concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidShape("channel_concat of nothing".into()));
        }
        let (n0, _, h0, w0) = self.nodes[xs[0].0].value.dims4()?;
        for x in xs {
            let (n, _, h, w) = self.nodes[x.0].value.dims4()?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(Error::ShapeMismatch("channel_concat N/H/W".into()));
            }
        }
        let views: Vec<&Tensor<T>> = xs.iter().map(|x| &self.nodes[x.0].value).collect();
        let v = ops::concat_channels_fwd(&views);
        Ok(self.push(Op::ChannelConcat, xs.iter().map(|x| x.0).collect(), v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. Returns per-node gradient buffers;
    /// call [`Params::accumulate`] to fold leaf gradients into the store.
    /// Multiple backward passes over one tape are independent.
    pub fn backward(&self, root: NodeId) -> Result<GradStore<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(vec![1], T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(GradStore { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: usize, t: Tensor<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.axpy(T::one(), &t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let inp = &node.inputs;
        let val = |j: usize| &self.nodes[inp[j]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.acc(grads, inp[0], g.clone());
                self.acc(grads, inp[1], g.clone());
            }
            Op::Mul => {
                self.acc(grads, inp[0], g.zip_map(val(1), |gv, b| gv * b));
                self.acc(grads, inp[1], g.zip_map(val(0), |gv, a| gv * a));
            }
            Op::ConstMinus(_) => {
                self.acc(grads, inp[0], g.map(|gv| -gv));
            }
            Op::ScaleConst(c) => {
                let c = *c;
                self.acc(grads, inp[0], g.map(|gv| c * gv));
            }
            Op::Reshape => {
                let t = g.clone().reshaped(val(0).shape().to_vec());
                self.acc(grads, inp[0], t);
            }
            Op::Relu => {
                self.acc(grads, inp[0], g.zip_map(val(0), |gv, x| if x > T::zero() { gv } else { T::zero() }));
            }
            Op::Sigmoid => {
                let y = &node.value;
                self.acc(grads, inp[0], g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::PRelu => {
                let x = val(0);
                let slope = val(1);
                let (n, c, h, w) = x.dims4().unwrap();
                let mut gx = Tensor::zeros(x.shape().to_vec());
                let mut gs = Tensor::zeros(vec![c]);
                for im in 0..n {
                    for ci in 0..c {
                        let a = slope.data()[ci];
                        let base = (im * c + ci) * h * w;
                        for q in 0..h * w {
                            let xv = x.data()[base + q];
                            let gv = g.data()[base + q];
                            if xv > T::zero() {
                                gx.data_mut()[base + q] = gv;
                            } else {
                                gx.data_mut()[base + q] = a * gv;
                                gs.data_mut()[ci] += gv * xv;
                            }
                        }
                    }
                }
                self.acc(grads, inp[0], gx);
                self.acc(grads, inp[1], gs);
            }
            Op::SteSign { clip } => {
                let clip = *clip;
                self.acc(
                    grads,
                    inp[0],
                    g.zip_map(val(0), |gv, x| if x.abs() <= clip { gv } else { T::zero() }),
                );
            }
            Op::Conv2d { stride, padding } => {
                let x = val(0);
                let w = val(1);
                if self.nodes[inp[0]].requires_grad {
                    let gx = ops::conv2d_bwd_input(g, w, x.dims4().unwrap(), *stride, *padding);
                    self.acc(grads, inp[0], gx);
                }
                if self.nodes[inp[1]].requires_grad {
                    let gw = ops::conv2d_bwd_weight(g, x, w.dims4().unwrap(), *stride, *padding, T::zero());
                    self.acc(grads, inp[1], gw);
                }
                if inp.len() > 2 && self.nodes[inp[2]].requires_grad {
                    self.acc(grads, inp[2], ops::conv2d_bwd_bias(g));
                }
            }
            Op::XnorConv2d { stride, padding } => {
                // backward over the dense ±1 values; padding taps are +1
                // constants, so the weight gradient must see them
                let x = val(0);
                let w = val(1);
                if self.nodes[inp[0]].requires_grad {
                    let gx = ops::conv2d_bwd_input(g, w, x.dims4().unwrap(), *stride, *padding);
                    self.acc(grads, inp[0], gx);
                }
                if self.nodes[inp[1]].requires_grad {
                    let gw = ops::conv2d_bwd_weight(g, x, w.dims4().unwrap(), *stride, *padding, T::one());
                    self.acc(grads, inp[1], gw);
                }
            }
            Op::ChannelScale => {
                let x = val(0);
                let s = val(1);
                let (n, c, h, w) = x.dims4().unwrap();
                if self.nodes[inp[0]].requires_grad {
                    let mut gx = Tensor::zeros(x.shape().to_vec());
                    for im in 0..n {
                        for ci in 0..c {
                            let sv = s.data()[ci];
                            let base = (im * c + ci) * h * w;
                            for q in 0..h * w {
                                gx.data_mut()[base + q] = sv * g.data()[base + q];
                            }
                        }
                    }
                    self.acc(grads, inp[0], gx);
                }
                if self.nodes[inp[1]].requires_grad {
                    let mut gs = Tensor::zeros(vec![c]);
                    for im in 0..n {
                        for ci in 0..c {
                            let base = (im * c + ci) * h * w;
                            let mut acc = T::zero();
                            for q in 0..h * w {
                                acc += g.data()[base + q] * x.data()[base + q];
                            }
                            gs.data_mut()[ci] += acc;
                        }
                    }
                    self.acc(grads, inp[1], gs);
                }
            }
            Op::ComputeAlpha => {
                let w = val(0);
                let (co, c, kh, kw) = w.dims4().unwrap();
                let fan_in = c * kh * kw;
                let inv = T::one() / T::from_usize(fan_in).unwrap();
                let mut gw = Tensor::zeros(w.shape().to_vec());
                for o in 0..co {
                    let go = g.data()[o] * inv;
                    for j in 0..fan_in {
                        let wv = w.data()[o * fan_in + j];
                        let sgn = if wv >= T::zero() { T::one() } else { -T::one() };
                        gw.data_mut()[o * fan_in + j] = go * sgn;
                    }
                }
                self.acc(grads, inp[0], gw);
            }
            Op::Linear => {
                let x = val(0);
                let w = val(1);
                if self.nodes[inp[0]].requires_grad {
                    self.acc(grads, inp[0], ops::linear_bwd_input(g, w));
                }
                if self.nodes[inp[1]].requires_grad {
                    self.acc(grads, inp[1], ops::linear_bwd_weight(g, x));
                }
                if inp.len() > 2 && self.nodes[inp[2]].requires_grad {
                    self.acc(grads, inp[2], ops::colsum(g));
                }
            }
            Op::BatchNormTrain { ctx } => {
                let gamma = val(1);
                let (gx, ggamma, gbeta) = ops::batchnorm_train_bwd(g, ctx, gamma);
                self.acc(grads, inp[0], gx);
                self.acc(grads, inp[1], ggamma);
                self.acc(grads, inp[2], gbeta);
            }
            Op::BatchNormEval { mean, var, eps } => {
                let x = val(0);
                let gamma = val(1);
                let (n, c, h, w) = x.dims4().unwrap();
                let mut gx = Tensor::zeros(x.shape().to_vec());
                let mut ggamma = Tensor::zeros(vec![c]);
                let mut gbeta = Tensor::zeros(vec![c]);
                for im in 0..n {
                    for ci in 0..c {
                        let invstd = T::one() / (var.data()[ci] + *eps).sqrt();
                        let k = gamma.data()[ci] * invstd;
                        let base = (im * c + ci) * h * w;
                        for q in 0..h * w {
                            let gv = g.data()[base + q];
                            gx.data_mut()[base + q] = k * gv;
                            let xh = (x.data()[base + q] - mean.data()[ci]) * invstd;
                            ggamma.data_mut()[ci] += gv * xh;
                            gbeta.data_mut()[ci] += gv;
                        }
                    }
                }
                self.acc(grads, inp[0], gx);
                self.acc(grads, inp[1], ggamma);
                self.acc(grads, inp[2], gbeta);
            }
            Op::AvgPool { k, stride } => {
                let gx = ops::avgpool_bwd(g, val(0).dims4().unwrap(), *k, *stride);
                self.acc(grads, inp[0], gx);
            }
            Op::GlobalAvgPool => {
                let gx = ops::global_avgpool_bwd(g, val(0).dims4().unwrap());
                self.acc(grads, inp[0], gx);
            }
            Op::NearestUp { factor } => {
                self.acc(grads, inp[0], ops::nearest_up_bwd(g, *factor));
            }
            Op::NearestDown { factor } => {
                let gx = ops::nearest_down_bwd(g, val(0).dims4().unwrap(), *factor);
                self.acc(grads, inp[0], gx);
            }
            Op::ChannelConcat => {
                let (n, c_total, h, w) = node.value.dims4().unwrap();
                let mut c_off = 0;
                for j in 0..inp.len() {
                    let c = val(j).shape()[1];
                    if self.nodes[inp[j]].requires_grad {
                        let mut gj = Tensor::zeros(val(j).shape().to_vec());
                        for im in 0..n {
                            let src0 = (im * c_total + c_off) * h * w;
                            let dst0 = im * c * h * w;
                            for q in 0..c * h * w {
                                gj.data_mut()[dst0 + q] = g.data()[src0 + q];
                            }
                        }
                        self.acc(grads, inp[j], gj);
                    }
                    c_off += c;
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let (n, k) = probs.dims2().unwrap();
                let scale = g.item() / T::from_usize(n).unwrap();
                let mut gx = probs.clone();
                for (row, &y) in labels.iter().enumerate() {
                    gx.data_mut()[row * k + y] -= T::one();
                }
                gx.scale(scale);
                self.acc(grads, inp[0], gx);
            }
            Op::LtAwareCe { probs, targets } => {
                let (n, _) = probs.dims2().unwrap();
                let scale = g.item() / T::from_usize(n).unwrap();
                let mut gx = probs.zip_map(targets, |p, t| p - t);
                gx.scale(scale);
                self.acc(grads, inp[0], gx);
            }
            Op::KlDiv { temp, p_teacher, q_student } => {
                // gradient only into the student logits
                if self.nodes[inp[1]].requires_grad {
                    let (n, _) = p_teacher.dims2().unwrap();
                    let scale = g.item() * *temp / T::from_usize(n).unwrap();
                    let mut gx = q_student.zip_map(p_teacher, |q, p| q - p);
                    gx.scale(scale);
                    self.acc(grads, inp[1], gx);
                }
            }
            Op::FeatureSim { eps } => {
                // gradient only into the student features
                if self.nodes[inp[1]].requires_grad {
                    let t = val(0);
                    let b = val(1);
                    let (n, d) = t.dims2().unwrap();
                    let scale = g.item() / T::from_usize(n).unwrap();
                    let mut gb = Tensor::zeros(b.shape().to_vec());
                    for row in 0..n {
                        let tr = &t.data()[row * d..(row + 1) * d];
                        let br = &b.data()[row * d..(row + 1) * d];
                        let nt = tr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(*eps);
                        let nb = br.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(*eps);
                        let dot = tr.iter().zip(br).fold(T::zero(), |a, (&u, &v)| a + u * v);
                        let cos = dot / (nt * nb);
                        for j in 0..d {
                            let dcos = tr[j] / (nt * nb) - cos * br[j] / (nb * nb);
                            gb.data_mut()[row * d + j] = -scale * dcos;
                        }
                    }
                    self.acc(grads, inp[1], gb);
                }
            }
        }
    }
}
