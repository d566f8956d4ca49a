//! Adam and SGD with role-filtered stepping, plus the cosine learning-rate
//! schedule. Optimizer state serializes into the checkpoint's parallel
//! section so interrupted runs resume bitwise.

use crate::graph::{Params, Role};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// `lr = 0.5 * lr0 * (1 + cos(pi * step / total))`, clamped at the final
/// value once `step > total_steps`.
pub fn cosine_lr<T: Scalar>(step: usize, total_steps: usize, lr0: T) -> T {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps);
    let frac = t as f64 / total_steps as f64;
    lr0 * s::<T>(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-8),
            weight_decay: T::zero(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: T) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over trainable params of the given roles; other params
    /// are untouched bit for bit.
    pub fn step(&mut self, params: &mut Params<T>, roles: &[Role]) {
        self.step += 1;
        if self.m.len() < params.len() {
            self.m.resize_with(params.len(), || None);
            self.v.resize_with(params.len(), || None);
        }
        let bc1 = T::one() - self.beta1.powi(self.step as i32);
        let bc2 = T::one() - self.beta2.powi(self.step as i32);
        for id in 0..params.len() {
            let p = params.get(id);
            if !roles.contains(&p.role) || !p.trainable {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(shape));
            let p = params.get_mut(id);
            for i in 0..p.value.numel() {
                let mut g = p.grad.data()[i];
                if self.weight_decay != T::zero() {
                    g += self.weight_decay * p.value.data()[i];
                }
                let mi = self.beta1 * m.data()[i] + (T::one() - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (T::one() - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers and step counter as named tensors for checkpointing.
    pub fn export_state(&self, params: &Params<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            format!("opt.{prefix}.step"),
            Tensor::scalar(T::from_u64(self.step).unwrap()),
        )];
        for (id, p) in params.iter() {
            if let Some(m) = self.m.get(id).and_then(|m| m.as_ref()) {
                out.push((format!("opt.{prefix}.{}.m", p.name), m.clone()));
            }
            if let Some(v) = self.v.get(id).and_then(|v| v.as_ref()) {
                out.push((format!("opt.{prefix}.{}.v", p.name), v.clone()));
            }
        }
        out
    }

    pub fn import_state(&mut self, params: &Params<T>, prefix: &str, tensors: &[(String, Tensor<T>)]) {
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        if let Some(t) = lookup(&format!("opt.{prefix}.step")) {
            self.step = t.item().to_f64().unwrap() as u64;
        }
        self.m = vec![None; params.len()];
        self.v = vec![None; params.len()];
        for (id, p) in params.iter() {
            self.m[id] = lookup(&format!("opt.{prefix}.{}.m", p.name));
            self.v[id] = lookup(&format!("opt.{prefix}.{}.v", p.name));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    bufs: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, momentum: T::zero(), weight_decay: T::zero(), bufs: Vec::new() }
    }

    pub fn with_momentum(mut self, momentum: T) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_weight_decay(mut self, wd: T) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut Params<T>, roles: &[Role]) {
        if self.bufs.len() < params.len() {
            self.bufs.resize_with(params.len(), || None);
        }
        for id in 0..params.len() {
            let p = params.get(id);
            if !roles.contains(&p.role) || !p.trainable {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let p = params.get_mut(id);
            if self.momentum == T::zero() {
                for i in 0..p.value.numel() {
                    let mut g = p.grad.data()[i];
                    if self.weight_decay != T::zero() {
                        g += self.weight_decay * p.value.data()[i];
                    }
                    p.value.data_mut()[i] -= self.lr * g;
                }
                continue;
            }
            let buf = self.bufs[id].get_or_insert_with(|| Tensor::zeros(shape));
            for i in 0..p.value.numel() {
                let mut g = p.grad.data()[i];
                if self.weight_decay != T::zero() {
                    g += self.weight_decay * p.value.data()[i];
                }
                let b = self.momentum * buf.data()[i] + g;
                buf.data_mut()[i] = b;
                p.value.data_mut()[i] -= self.lr * b;
            }
        }
    }

    pub fn export_state(&self, params: &Params<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (id, p) in params.iter() {
            if let Some(b) = self.bufs.get(id).and_then(|b| b.as_ref()) {
                out.push((format!("opt.{prefix}.{}.momentum", p.name), b.clone()));
            }
        }
        out
    }

    pub fn import_state(&mut self, params: &Params<T>, prefix: &str, tensors: &[(String, Tensor<T>)]) {
        self.bufs = vec![None; params.len()];
        for (id, p) in params.iter() {
            let name = format!("opt.{prefix}.{}.momentum", p.name);
            self.bufs[id] = tensors.iter().find(|(n, _)| n == &name).map(|(_, t)| t.clone());
        }
    }
}

/// Stage optimizer selected by config.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn set_lr(&mut self, lr: T) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }

    pub fn lr(&self) -> T {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd(s) => s.lr,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, roles: &[Role]) {
        match self {
            Optimizer::Adam(a) => a.step(params, roles),
            Optimizer::Sgd(s) => s.step(params, roles),
        }
    }

    pub fn export_state(&self, params: &Params<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        match self {
            Optimizer::Adam(a) => a.export_state(params, prefix),
            Optimizer::Sgd(s) => s.export_state(params, prefix),
        }
    }

    pub fn import_state(&mut self, params: &Params<T>, prefix: &str, tensors: &[(String, Tensor<T>)]) {
        match self {
            Optimizer::Adam(a) => a.import_state(params, prefix, tensors),
            Optimizer::Sgd(s) => s.import_state(params, prefix, tensors),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
        assert!(cosine_lr::<f64>(100, 100, 0.01).abs() < 1e-18);
        assert!((cosine_lr::<f64>(50, 100, 0.01) - 0.005).abs() < 1e-12);
        // clamped past the end
        assert!(cosine_lr::<f64>(250, 100, 0.01).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut params = Params::<f64>::new();
        let w = params.add("w", Tensor::from_vec(vec![2], vec![1.0, -3.0]), Role::Encoder, true);
        params.get_mut(w).grad = Tensor::from_vec(vec![2], vec![0.2, -0.7]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut params, &[Role::Encoder]);
        for (i, &g) in [0.2, -0.7].iter().enumerate() {
            let want = [1.0, -3.0][i] - 0.01 * g / (f64::abs(g) + 1e-8);
            assert!((params.get(w).value.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_leaves_param_unchanged() {
        let mut params = Params::<f64>::new();
        let w = params.add("w", Tensor::from_vec(vec![2], vec![1.5, 2.5]), Role::Encoder, true);
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &[Role::Encoder]);
        assert_eq!(params.get(w).value.data(), &[1.5, 2.5]);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // loss = 0.5 * a * w^2, grad = a * w
        let a = 3.0f64;
        let mut params = Params::<f64>::new();
        let w = params.add("w", Tensor::from_vec(vec![1], vec![2.0]), Role::Encoder, true);
        let mut opt = Adam::new(0.05);

        // independent scalar Adam
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let (mut m, mut v, mut wref) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=5 {
            let g = a * params.get(w).value.data()[0];
            params.get_mut(w).grad = Tensor::from_vec(vec![1], vec![g]);
            opt.step(&mut params, &[Role::Encoder]);

            let gref = a * wref;
            m = b1 * m + (1.0 - b1) * gref;
            v = b2 * v + (1.0 - b2) * gref * gref;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            wref -= lr * mhat / (vhat.sqrt() + eps);
            assert!(
                (params.get(w).value.data()[0] - wref).abs() < 1e-6,
                "step {t}: {} vs {wref}",
                params.get(w).value.data()[0]
            );
        }
    }

    #[test]
    fn role_filtered_step_leaves_other_roles_bitwise_identical() {
        let mut params = Params::<f32>::new();
        let e = params.add("enc", Tensor::from_vec(vec![2], vec![1.0, 2.0]), Role::Encoder, true);
        let c = params.add("cls", Tensor::from_vec(vec![2], vec![3.0, 4.0]), Role::Classifier, true);
        params.get_mut(e).grad = Tensor::from_vec(vec![2], vec![0.5, 0.5]);
        params.get_mut(c).grad = Tensor::from_vec(vec![2], vec![0.5, 0.5]);
        let before = params.get(e).value.clone();
        let mut opt = Adam::new(0.01f32);
        opt.step(&mut params, &[Role::Classifier]);
        assert_eq!(params.get(e).value, before);
        assert_ne!(params.get(c).value.data(), &[3.0, 4.0]);
    }

    #[test]
    fn sgd_plain_step() {
        let mut params = Params::<f64>::new();
        let w = params.add("w", Tensor::from_vec(vec![1], vec![1.0]), Role::Classifier, true);
        params.get_mut(w).grad = Tensor::from_vec(vec![1], vec![2.0]);
        let mut opt = Sgd::new(0.1);
        opt.step(&mut params, &[Role::Classifier]);
        assert!((params.get(w).value.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_state_roundtrips_through_export() {
        let mut params = Params::<f32>::new();
        let w = params.add("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]), Role::Encoder, true);
        params.get_mut(w).grad = Tensor::from_vec(vec![2], vec![0.3, -0.2]);
        let mut opt = Adam::new(0.01f32);
        opt.step(&mut params, &[Role::Encoder]);
        let state = opt.export_state(&params, "enc");

        let mut opt2 = Adam::new(0.01f32);
        opt2.import_state(&params, "enc", &state);
        // both must produce identical params on the next step
        let mut pa = params.clone();
        let mut pb = params.clone();
        pa.get_mut(w).grad = Tensor::from_vec(vec![2], vec![0.1, 0.1]);
        pb.get_mut(w).grad = Tensor::from_vec(vec![2], vec![0.1, 0.1]);
        opt.step(&mut pa, &[Role::Encoder]);
        opt2.step(&mut pb, &[Role::Encoder]);
        assert_eq!(pa.get(w).value, pb.get(w).value);
    }
}
