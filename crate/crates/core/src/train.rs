//! Training stages: teacher pretraining, classifier-only calibration on
//! long-tailed data, adversarially balanced distillation into the binary
//! student, and the from-scratch baseline.
//!
//! One distillation step runs, in order: teacher forward (out of graph),
//! binary forward, KL and feature losses, classifier descent on KL alone,
//! balancer output `lambda`, mixed encoder loss `L = (1-lambda)K + lambda F`,
//! balancer ascent on `L`, encoder descent on `L` with the pre-ascent
//! `lambda`. All randomness derives from (seed, epoch), so a run resumed
//! from an epoch checkpoint reproduces the uninterrupted run bitwise.

use crate::config::{OptimizerKind, TrainConfig};
use crate::data::{class_balanced_indices, ClassPartition, Dataset, LtDataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Params, Role};
use crate::model::{Balancer, BinaryModel, TeacherModel, TeacherOutput};
use crate::optim::{cosine_lr, Adam, Optimizer, Sgd};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_acc: f64,
    pub head_acc: f64,
    pub med_acc: f64,
    pub tail_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

impl RunLog {
    /// JSON-lines: one record per step, one per epoch.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        for s in &self.steps {
            writeln!(f, "{}", serde_json::to_string(s)?)?;
        }
        for e in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shuffled index order for one epoch, a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0e5a + epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

pub fn make_optimizer<T: Scalar>(kind: OptimizerKind, lr: f64, weight_decay: f64, momentum: f64) -> Optimizer<T> {
    match kind {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(s(lr)).with_weight_decay(s(weight_decay))),
        OptimizerKind::Sgd => {
            Optimizer::Sgd(Sgd::new(s(lr)).with_momentum(s(momentum)).with_weight_decay(s(weight_decay)))
        }
    }
}

/// Random horizontal flip plus zero-pad-4 random crop, in place.
fn augment_batch<T: Scalar>(x: &mut Tensor<T>, rng: &mut ChaCha8Rng) {
    const PAD: usize = 4;
    let (n, c, h, w) = x.dims4().expect("augment input");
    for im in 0..n {
        if rng.gen::<bool>() {
            for ci in 0..c {
                let base = (im * c + ci) * h * w;
                for row in 0..h {
                    x.data_mut()[base + row * w..base + (row + 1) * w].reverse();
                }
            }
        }
        let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        if dy == 0 && dx == 0 {
            continue;
        }
        let mut shifted = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for row in 0..h {
                let sy = row as isize + dy;
                if sy < 0 || sy as usize >= h {
                    continue;
                }
                for col in 0..w {
                    let sx = col as isize + dx;
                    if sx < 0 || sx as usize >= w {
                        continue;
                    }
                    shifted[(ci * h + row) * w + col] =
                        x.data()[((im * c + ci) * h + sy as usize) * w + sx as usize];
                }
            }
        }
        let base = im * c * h * w;
        x.data_mut()[base..base + c * h * w].copy_from_slice(&shifted);
    }
}

/// Top-1 accuracy of a logits function over a dataset, batched.
pub fn accuracy_of<T: Scalar>(
    mut forward: impl FnMut(&Tensor<T>) -> Tensor<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> f64 {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch(chunk);
        let logits = forward(&x);
        for (p, &y) in crate::ops::argmax_rows(&logits).iter().zip(&labels) {
            if p == &y {
                correct += 1;
            }
        }
    }
    correct as f64 / data.len() as f64
}

/// Train the teacher encoder with plain cross-entropy on balanced data,
/// then freeze it. The matching convs and classifier stay randomly
/// initialized for calibration; the pretraining head is retired frozen.
pub fn pretrain_teacher<T: Scalar>(
    balanced: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(TeacherModel<T>, Params<T>, RunLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7ea0));
    let mut ps = Params::new();
    let teacher = TeacherModel::new(
        &mut ps,
        cfg.teacher_width,
        4 * cfg.binary_width,
        balanced.num_classes,
        (cfg.resolution_s, cfg.resolution_b, cfg.resolution_l),
        cfg.multi_res,
        &mut rng,
    );
    let mut log = RunLog::default();
    let mut opt = Optimizer::Adam(Adam::new(s::<T>(cfg.pretrain_lr)));
    let steps_per_epoch = balanced.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.pretrain_epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(balanced.len(), cfg.seed, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xa06 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let (mut x, labels) = balanced.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut aug_rng);
            }
            let lr = cosine_lr(step, total_steps, s::<T>(cfg.pretrain_lr));
            opt.set_lr(lr);
            ps.zero_grads();
            let mut g = Graph::new();
            let fmap = teacher.encoder_forward_train(&mut g, &mut ps, &x)?;
            let pooled = g.global_avgpool(fmap)?;
            let logits = teacher.pretrain_head.forward(&mut g, &ps, pooled)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss.node)?;
            ps.accumulate(&g, &grads);
            opt.step(&mut ps, &[Role::Encoder, Role::Classifier]);
            log.steps.push(StepLog {
                step,
                k: g.value(loss.node).item().to_f64().unwrap(),
                f: None,
                lambda: None,
                lr: lr.to_f64().unwrap(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }

    if cfg.pretrain_epochs > 0 {
        let acc = accuracy_of(
            |x| {
                let fmap = teacher.encoder_infer(&ps, x);
                let pooled = crate::ops::global_avgpool_fwd(&fmap);
                teacher.pretrain_head.infer(&ps, &pooled)
            },
            balanced,
            cfg.batch_size,
        );
        let floor = 1.5 / balanced.num_classes as f64;
        if acc < floor {
            log.warnings.push(format!(
                "teacher pretraining did not converge: train accuracy {acc:.4} < {floor:.4}"
            ));
        }
    }

    teacher.freeze_encoder(&mut ps);
    // retire the pretraining head; calibration trains match convs + classifier
    let ph_w = teacher.pretrain_head.w;
    let ph_b = teacher.pretrain_head.b;
    ps.get_mut(ph_w).trainable = false;
    ps.get_mut(ph_b).trainable = false;
    Ok((teacher, ps, log))
}

/// Calibrate the frozen teacher on long-tailed data: class-balanced
/// sampling, label-aware smoothed cross-entropy, classifier-side
/// parameters only. Encoder weights are untouched bit for bit.
pub fn calibrate<T: Scalar>(
    teacher: &TeacherModel<T>,
    ps: &mut Params<T>,
    lt: &LtDataset<T>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    if !teacher.encoder_frozen(ps) {
        return Err(Error::ContractViolation(
            "calibrate requires every teacher encoder parameter frozen".into(),
        ));
    }
    let mut log = RunLog::default();
    let mut opt = Optimizer::Adam(Adam::new(s::<T>(cfg.calibrate_lr)));
    let class_counts = lt.data.class_counts();
    let steps_per_epoch = lt.data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.calibrate_epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.calibrate_epochs {
        let order = class_balanced_indices(lt, lt.data.len(), mix_seed(cfg.seed, 0xca1 + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let (x, labels) = lt.data.batch(chunk);
            let lr = cosine_lr(step, total_steps, s::<T>(cfg.calibrate_lr));
            opt.set_lr(lr);
            ps.zero_grads();
            let mut g = Graph::new();
            let logits = teacher.calibrate_forward(&mut g, ps, &x)?;
            let loss = g.lt_aware_ce(logits, &labels, &class_counts, s(cfg.eps_head), s(cfg.eps_tail))?;
            let grads = g.backward(loss.node)?;
            ps.accumulate(&g, &grads);
            opt.step(ps, &[Role::Classifier]);
            log.steps.push(StepLog {
                step,
                k: g.value(loss.node).item().to_f64().unwrap(),
                f: None,
                lambda: None,
                lr: lr.to_f64().unwrap(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Optimizers and counters for one distillation run.
pub struct DistillOpts<T> {
    pub opt_c: Optimizer<T>,
    pub opt_e: Optimizer<T>,
    pub opt_phi: Optimizer<T>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Scalar> DistillOpts<T> {
    pub fn from_config(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            opt_c: make_optimizer(cfg.optimizer, cfg.lr0, cfg.weight_decay, cfg.momentum),
            opt_e: make_optimizer(cfg.optimizer, cfg.lr0, cfg.weight_decay, cfg.momentum),
            opt_phi: make_optimizer(cfg.balancer_optimizer, cfg.balancer_lr.unwrap_or(cfg.lr0), 0.0, 0.0),
            step: 0,
            total_steps,
        }
    }
}

/// One adversarially balanced distillation step. `bps` holds the binary
/// network (Encoder/Classifier roles) and the balancer (Balancer role);
/// the teacher contributed only detached outputs, so it cannot receive
/// gradients by construction.
pub fn distill_step<T: Scalar>(
    x: &Tensor<T>,
    teacher_out: &TeacherOutput<T>,
    binary: &BinaryModel<T>,
    bps: &mut Params<T>,
    bal: &mut Balancer<T>,
    opts: &mut DistillOpts<T>,
    cfg: &TrainConfig,
    batch_index: usize,
) -> Result<StepLog> {
    let t0 = Instant::now();
    let lr = cosine_lr(opts.step, opts.total_steps, s::<T>(cfg.lr0));
    opts.opt_c.set_lr(lr);
    opts.opt_e.set_lr(lr);
    let phi_lr = cfg.balancer_lr.map_or(lr, |v| s::<T>(v));
    opts.opt_phi.set_lr(phi_lr);

    if !teacher_out.logits.is_finite() || !teacher_out.features.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "batch {batch_index}: non-finite teacher output"
        )));
    }
    bps.zero_grads();
    let mut g = Graph::new();
    let (feat, logits) = binary.forward_train(&mut g, bps, x)?;
    let t_logits = g.input(teacher_out.logits.clone());
    let t_feat = g.input(teacher_out.features.clone());
    let k_loss = g.kl_div(t_logits, logits, s(cfg.kl_temperature))?;
    let f_loss = g.feature_similarity(t_feat, feat)?;
    let k_val = g.value(k_loss.node).item();
    let f_val = g.value(f_loss.node).item();
    if !k_val.is_finite() || !f_val.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "batch {batch_index}: K={k_val}, F={f_val}"
        )));
    }

    // classifier moves on the KL term alone
    let grads_k = g.backward(k_loss.node)?;
    bps.accumulate(&g, &grads_k);
    opts.opt_c.step(bps, &[Role::Classifier]);

    // mixed encoder objective with the balancer's lambda
    bps.zero_grads();
    let lambda = bal.forward(&mut g, bps, k_val, f_val)?;
    let lambda_val = g.value(lambda).item().to_f64().unwrap();
    let one_minus = g.const_minus(T::one(), lambda);
    let kl_term = g.mul(one_minus, k_loss.node)?;
    let fs_term = g.mul(lambda, f_loss.node)?;
    let mixed = g.add(kl_term, fs_term)?;
    let grads_l = g.backward(mixed)?;
    bps.accumulate(&g, &grads_l);

    // balancer ascends the mixed loss
    bps.scale_grads(Role::Balancer, -T::one());
    opts.opt_phi.step(bps, &[Role::Balancer]);
    for _ in 1..cfg.minmax_ratio {
        // additional maximization steps reuse the fixed loss scalars
        bps.zero_grads();
        let mut g2 = Graph::new();
        let lam2 = bal.forward(&mut g2, bps, k_val, f_val)?;
        let one_minus2 = g2.const_minus(T::one(), lam2);
        let kn = g2.input(Tensor::scalar(k_val));
        let fn_ = g2.input(Tensor::scalar(f_val));
        let a = g2.mul(one_minus2, kn)?;
        let b = g2.mul(lam2, fn_)?;
        let l2 = g2.add(a, b)?;
        let grads2 = g2.backward(l2)?;
        bps.accumulate(&g2, &grads2);
        bps.scale_grads(Role::Balancer, -T::one());
        opts.opt_phi.step(bps, &[Role::Balancer]);
    }

    // encoder descends; by default with the pre-ascent lambda already baked
    // into grads_l (one forward pass feeds every update)
    if cfg.lambda_post_ascent {
        bps.zero_grads();
        let lambda2 = bal.forward(&mut g, bps, k_val, f_val)?;
        let one_minus2 = g.const_minus(T::one(), lambda2);
        let kl2 = g.mul(one_minus2, k_loss.node)?;
        let fs2 = g.mul(lambda2, f_loss.node)?;
        let mixed2 = g.add(kl2, fs2)?;
        let grads_post = g.backward(mixed2)?;
        bps.accumulate(&g, &grads_post);
    }
    opts.opt_e.step(bps, &[Role::Encoder]);

    debug_assert!(
        g.param_leaves().iter().all(|&(_, pid)| bps.get(pid).role != Role::TeacherFrozen),
        "teacher parameters must stay out of the distillation graph"
    );

    bal.last_lambda = lambda_val;
    bal.last_k = k_val.to_f64().unwrap();
    bal.last_f = f_val.to_f64().unwrap();
    opts.step += 1;
    Ok(StepLog {
        step: opts.step - 1,
        k: bal.last_k,
        f: Some(bal.last_f),
        lambda: Some(lambda_val),
        lr: lr.to_f64().unwrap(),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Profiling-only variant of a distillation step where the student also
/// consumes all three resolutions (losses averaged); reproduces the cost
/// of naive multi-scale training.
pub fn distill_step_direct_multires<T: Scalar>(
    x: &Tensor<T>,
    teacher_out: &TeacherOutput<T>,
    binary: &BinaryModel<T>,
    bps: &mut Params<T>,
    bal: &mut Balancer<T>,
    opts: &mut DistillOpts<T>,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    let t0 = Instant::now();
    let lr = cosine_lr(opts.step, opts.total_steps, s::<T>(cfg.lr0));
    opts.opt_c.set_lr(lr);
    opts.opt_e.set_lr(lr);
    opts.opt_phi.set_lr(cfg.balancer_lr.map_or(lr, |v| s::<T>(v)));

    let (rs, rb, rl) = (cfg.resolution_s, cfg.resolution_b, cfg.resolution_l);
    let xs = crate::ops::nearest_down_fwd(x, rb / rs);
    let xl = crate::ops::nearest_up_fwd(x, rl / rb);

    bps.zero_grads();
    let mut g = Graph::new();
    let third = s::<T>(1.0 / 3.0);
    let mut k_sum = None;
    let mut f_sum = None;
    for xi in [&xs, x, &xl] {
        let (feat, logits) = binary.forward_train(&mut g, bps, xi)?;
        let t_logits = g.input(teacher_out.logits.clone());
        let t_feat = g.input(teacher_out.features.clone());
        let k = g.kl_div(t_logits, logits, s(cfg.kl_temperature))?;
        let f = g.feature_similarity(t_feat, feat)?;
        k_sum = Some(match k_sum {
            None => k.node,
            Some(prev) => g.add(prev, k.node)?,
        });
        f_sum = Some(match f_sum {
            None => f.node,
            Some(prev) => g.add(prev, f.node)?,
        });
    }
    let k_node = g.scale_const(third, k_sum.unwrap());
    let f_node = g.scale_const(third, f_sum.unwrap());
    let k_val = g.value(k_node).item();
    let f_val = g.value(f_node).item();

    let grads_k = g.backward(k_node)?;
    bps.accumulate(&g, &grads_k);
    opts.opt_c.step(bps, &[Role::Classifier]);

    bps.zero_grads();
    let lambda = bal.forward(&mut g, bps, k_val, f_val)?;
    let lambda_val = g.value(lambda).item().to_f64().unwrap();
    let one_minus = g.const_minus(T::one(), lambda);
    let kl_term = g.mul(one_minus, k_node)?;
    let fs_term = g.mul(lambda, f_node)?;
    let mixed = g.add(kl_term, fs_term)?;
    let grads_l = g.backward(mixed)?;
    bps.accumulate(&g, &grads_l);
    bps.scale_grads(Role::Balancer, -T::one());
    opts.opt_phi.step(bps, &[Role::Balancer]);
    opts.opt_e.step(bps, &[Role::Encoder]);

    opts.step += 1;
    Ok(StepLog {
        step: opts.step - 1,
        k: k_val.to_f64().unwrap(),
        f: Some(f_val.to_f64().unwrap()),
        lambda: Some(lambda_val),
        lr: lr.to_f64().unwrap(),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Everything that evolves during a distillation run; checkpointable.
pub struct DistillState<T> {
    pub model: BinaryModel<T>,
    pub params: Params<T>,
    pub balancer: Balancer<T>,
    pub opts: DistillOpts<T>,
    pub next_epoch: usize,
}

impl<T: Scalar> DistillState<T> {
    pub fn new(cfg: &TrainConfig, num_classes: usize, total_steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xb14a));
        let mut params = Params::new();
        let model = BinaryModel::new(
            &mut params,
            cfg.binary_width,
            num_classes,
            cfg.prelu,
            cfg.learned_alpha,
            s(cfg.ste_clip),
            &mut rng,
        );
        let balancer = Balancer::new(&mut params, &mut rng);
        let opts = DistillOpts::from_config(cfg, total_steps);
        Self { model, params, balancer, opts, next_epoch: 0 }
    }

    /// Optimizer tensors for the checkpoint's parallel section.
    pub fn optimizer_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.opts.opt_c.export_state(&self.params, "classifier");
        out.extend(self.opts.opt_e.export_state(&self.params, "encoder"));
        out.extend(self.opts.opt_phi.export_state(&self.params, "balancer"));
        out
    }

    pub fn restore_optimizers(&mut self, tensors: &[(String, Tensor<T>)]) {
        self.opts.opt_c.import_state(&self.params, "classifier", tensors);
        self.opts.opt_e.import_state(&self.params, "encoder", tensors);
        self.opts.opt_phi.import_state(&self.params, "balancer", tensors);
    }
}

/// Full adversarially balanced distillation loop. Runs epochs
/// `state.next_epoch..cfg.distill_epochs`; per-epoch metrics are recorded
/// when a test set is supplied, and `on_epoch` fires after each epoch for
/// checkpointing.
pub fn train_candle<T: Scalar>(
    state: &mut DistillState<T>,
    teacher: &TeacherModel<T>,
    tps: &Params<T>,
    lt: &LtDataset<T>,
    test: Option<(&Dataset<T>, &ClassPartition)>,
    cfg: &TrainConfig,
    log: &mut RunLog,
    mut on_epoch: impl FnMut(&DistillState<T>, usize) -> Result<()>,
) -> Result<()> {
    if !teacher.encoder_frozen(tps) {
        return Err(Error::ContractViolation(
            "distillation requires a frozen, calibrated teacher".into(),
        ));
    }
    for epoch in state.next_epoch..cfg.distill_epochs {
        let order = epoch_order(lt.data.len(), cfg.seed, 0xd157 + epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xd16a + epoch as u64));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, _labels) = lt.data.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut aug_rng);
            }
            let t_out = teacher.forward_infer(tps, &x)?;
            let entry = distill_step(
                &x,
                &t_out,
                &state.model,
                &mut state.params,
                &mut state.balancer,
                &mut state.opts,
                cfg,
                bi,
            )?;
            log.steps.push(entry);
        }
        if let Some((test_set, partition)) = test {
            let report = crate::analysis::evaluate_binary(&state.model, &state.params, test_set, partition, cfg.batch_size);
            log.epochs.push(EpochLog {
                epoch,
                mean_acc: report.mean_acc,
                head_acc: report.head_acc,
                med_acc: report.medium_acc,
                tail_acc: report.tail_acc,
            });
        }
        state.next_epoch = epoch + 1;
        on_epoch(state, epoch)?;
    }
    Ok(())
}

/// Plain cross-entropy training of the binary model on the long-tailed
/// data; the study baseline. Optimizer/weight-decay axes are configurable
/// here (and only here).
pub fn train_scratch<T: Scalar>(
    lt: &LtDataset<T>,
    test: Option<(&Dataset<T>, &ClassPartition)>,
    cfg: &TrainConfig,
) -> Result<(BinaryModel<T>, Params<T>, RunLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xb14a));
    let mut ps = Params::new();
    let model = BinaryModel::new(
        &mut ps,
        cfg.binary_width,
        lt.data.num_classes,
        cfg.prelu,
        cfg.learned_alpha,
        s(cfg.ste_clip),
        &mut rng,
    );
    let mut opt = make_optimizer(cfg.scratch_optimizer, cfg.lr0, cfg.scratch_weight_decay, cfg.scratch_momentum);
    let mut log = RunLog::default();
    let steps_per_epoch = lt.data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.distill_epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.distill_epochs {
        let order = epoch_order(lt.data.len(), cfg.seed, 0x5c4a + epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5c4b + epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let (mut x, labels) = lt.data.batch(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut aug_rng);
            }
            let lr = cosine_lr(step, total_steps, s::<T>(cfg.lr0));
            opt.set_lr(lr);
            ps.zero_grads();
            let mut g = Graph::new();
            let (_, logits) = model.forward_train(&mut g, &mut ps, &x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss.node)?;
            ps.accumulate(&g, &grads);
            opt.step(&mut ps, &[Role::Encoder, Role::Classifier]);
            log.steps.push(StepLog {
                step,
                k: g.value(loss.node).item().to_f64().unwrap(),
                f: None,
                lambda: None,
                lr: lr.to_f64().unwrap(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        if let Some((test_set, partition)) = test {
            let report = crate::analysis::evaluate_binary(&model, &ps, test_set, partition, cfg.batch_size);
            log.epochs.push(EpochLog {
                epoch,
                mean_acc: report.mean_acc,
                head_acc: report.head_acc,
                med_acc: report.medium_acc,
                tail_acc: report.tail_acc,
            });
        }
    }
    Ok((model, ps, log))
}
