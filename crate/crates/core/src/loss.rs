//! The four scalar objectives: cross-entropy, label-aware smoothed
//! cross-entropy for calibration on long-tailed data, temperature KL
//! divergence for distillation, and cosine feature distance.
//!
//! Distillation losses take the teacher side as a graph node but never
//! backpropagate into it; only the student side receives gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::ops;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    LtAwareCe,
    Kl,
    Fs,
}

/// Scalar loss node on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub node: NodeId,
    pub kind: LossKind,
}

/// Per-class smoothing factor, linear in class frequency: the most
/// frequent class gets `eps_head`, the rarest gets `eps_tail`.
pub fn smoothing_eps<T: Scalar>(class_counts: &[usize], eps_head: T, eps_tail: T) -> Vec<T> {
    let n_max = *class_counts.iter().max().unwrap();
    let n_min = *class_counts.iter().min().unwrap();
    if n_max == n_min {
        return vec![eps_head; class_counts.len()];
    }
    let span = T::from_usize(n_max - n_min).unwrap();
    class_counts
        .iter()
        .map(|&n| {
            let t = T::from_usize(n - n_min).unwrap() / span;
            eps_tail + (eps_head - eps_tail) * t
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Mean batch cross-entropy, stabilized by max-subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<LossValue> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::InvalidLabel { label: y, num_classes: k });
            }
        }
        let logp = ops::log_softmax_rows(self.value(logits));
        let mut acc = T::zero();
        for (row, &y) in labels.iter().enumerate() {
            acc -= logp.data()[row * k + y];
        }
        let value = Tensor::scalar(acc / T::from_usize(n).unwrap());
        let probs = logp.map(|v| v.exp());
        let node = self.push(
            Op::CrossEntropy { probs, labels: labels.to_vec() },
            vec![logits.0],
            value,
        );
        Ok(LossValue { node, kind: LossKind::Ce })
    }

    /// Cross-entropy against label-aware smoothed targets: class `c` of the
    /// true label spreads `eps_c` of its mass uniformly over the other
    /// classes, with `eps_c` interpolated linearly in class frequency.
    pub fn lt_aware_ce(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        class_counts: &[usize],
        eps_head: T,
        eps_tail: T,
    ) -> Result<LossValue> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if class_counts.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} class counts for {k} classes",
                class_counts.len()
            )));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::InvalidLabel { label: y, num_classes: k });
            }
        }
        let eps = smoothing_eps(class_counts, eps_head, eps_tail);
        let mut targets = Tensor::zeros(vec![n, k]);
        for (row, &y) in labels.iter().enumerate() {
            if k == 1 {
                targets.data_mut()[row] = T::one();
                continue;
            }
            let e = eps[y];
            let off = e / T::from_usize(k - 1).unwrap();
            for j in 0..k {
                targets.data_mut()[row * k + j] = if j == y { T::one() - e } else { off };
            }
        }
        let logp = ops::log_softmax_rows(self.value(logits));
        let mut acc = T::zero();
        for i in 0..n * k {
            acc -= targets.data()[i] * logp.data()[i];
        }
        let value = Tensor::scalar(acc / T::from_usize(n).unwrap());
        let probs = logp.map(|v| v.exp());
        let node = self.push(Op::LtAwareCe { probs, targets }, vec![logits.0], value);
        Ok(LossValue { node, kind: LossKind::LtAwareCe })
    }

    /// `T^2 * mean KL(softmax(teacher/T) || softmax(student/T))`.
    /// Gradient flows only into the student logits.
    pub fn kl_div(&mut self, teacher_logits: NodeId, student_logits: NodeId, temp: T) -> Result<LossValue> {
        if self.value(teacher_logits).shape() != self.value(student_logits).shape() {
            return Err(Error::ShapeMismatch(format!(
                "kl_div {:?} vs {:?}",
                self.value(teacher_logits).shape(),
                self.value(student_logits).shape()
            )));
        }
        if temp <= T::zero() {
            return Err(Error::Config("kl temperature must be > 0".into()));
        }
        let (n, k) = self.value(teacher_logits).dims2()?;
        let inv_t = T::one() / temp;
        let t_scaled = self.value(teacher_logits).map(|v| v * inv_t);
        let s_scaled = self.value(student_logits).map(|v| v * inv_t);
        let logp = ops::log_softmax_rows(&t_scaled);
        let logq = ops::log_softmax_rows(&s_scaled);
        let p = logp.map(|v| v.exp());
        let q = logq.map(|v| v.exp());
        let mut acc = T::zero();
        for i in 0..n * k {
            // p * (log p - log q); the p = 0 limit contributes nothing.
            // The != comparison (not >) lets NaN poison the sum.
            if p.data()[i] != T::zero() {
                acc += p.data()[i] * (logp.data()[i] - logq.data()[i]);
            }
        }
        let value = Tensor::scalar(temp * temp * acc / T::from_usize(n).unwrap());
        let node = self.push(
            Op::KlDiv { temp, p_teacher: p, q_student: q },
            vec![teacher_logits.0, student_logits.0],
            value,
        );
        Ok(LossValue { node, kind: LossKind::Kl })
    }

    /// Mean cosine distance `1 - cos(e_t, e_b)` over the batch, norms
    /// epsilon-guarded. Gradient flows only into the student features.
    pub fn feature_similarity(&mut self, teacher_feat: NodeId, student_feat: NodeId) -> Result<LossValue> {
        if self.value(teacher_feat).shape() != self.value(student_feat).shape() {
            return Err(Error::ShapeMismatch(format!(
                "feature_similarity {:?} vs {:?}",
                self.value(teacher_feat).shape(),
                self.value(student_feat).shape()
            )));
        }
        let (n, d) = self.value(teacher_feat).dims2()?;
        let eps = s::<T>(1e-8);
        let t = self.value(teacher_feat);
        let b = self.value(student_feat);
        let mut acc = T::zero();
        for row in 0..n {
            let tr = &t.data()[row * d..(row + 1) * d];
            let br = &b.data()[row * d..(row + 1) * d];
            let nt = tr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
            let nb = br.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
            let dot = tr.iter().zip(br).fold(T::zero(), |a, (&u, &v)| a + u * v);
            acc += T::one() - dot / (nt * nb);
        }
        let value = Tensor::scalar(acc / T::from_usize(n).unwrap());
        let node = self.push(Op::FeatureSim { eps }, vec![teacher_feat.0, student_feat.0], value);
        Ok(LossValue { node, kind: LossKind::Fs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Params, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ce_oracle(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
        let (n, k) = logits.dims2().unwrap();
        let mut total = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let src = &logits.data()[row * k..(row + 1) * k];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - src[y];
        }
        total / n as f64
    }

    #[test]
    fn ce_confident_correct_is_near_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::from_vec(vec![1, 4], vec![1000.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(l.node).item() < 1e-9);
    }

    #[test]
    fn ce_uniform_is_log_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(vec![2, 4]));
        let l = g.cross_entropy(logits, &[1, 3]).unwrap();
        assert!((g.value(l.node).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_f64_oracle_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x64 = Tensor::<f64>::randn(vec![8, 5], 0.0, 2.0, &mut rng);
        let labels = vec![0, 1, 2, 3, 4, 0, 1, 2];
        let want = ce_oracle(&x64, &labels);

        let mut g = Graph::<f32>::new();
        let logits = g.input(Tensor::<f32>::from_f32(&x64.to_f32()));
        let l = g.cross_entropy(logits, &labels).unwrap();
        assert!((g.value(l.node).item() as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(Error::InvalidLabel { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn lt_ce_with_zero_eps_reduces_to_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::<f64>::randn(vec![6, 4], 0.0, 1.5, &mut rng);
        let labels = vec![3, 1, 0, 2, 1, 3];
        let mut g = Graph::<f64>::new();
        let logits = g.input(x.clone());
        let plain = g.cross_entropy(logits, &labels).unwrap();
        let lt = g.lt_aware_ce(logits, &labels, &[40, 30, 20, 10], 0.0, 0.0).unwrap();
        assert!((g.value(plain.node).item() - g.value(lt.node).item()).abs() < 1e-12);
    }

    #[test]
    fn lt_ce_single_class_is_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::from_vec(vec![2, 1], vec![3.0, -1.0]));
        let l = g.lt_aware_ce(logits, &[0, 0], &[5], 0.1, 0.4).unwrap();
        assert_eq!(g.value(l.node).item(), 0.0);
    }

    #[test]
    fn lt_ce_matches_hand_oracle() {
        // K = 3, counts [100, 50, 10], eps_head 0.1 / eps_tail 0.4
        let logits = Tensor::<f64>::from_vec(vec![2, 3], vec![2.0, -1.0, 0.5, 0.0, 1.0, -2.0]);
        let labels = [0usize, 2];
        let counts = [100usize, 50, 10];
        let (eps_head, eps_tail) = (0.1, 0.4);

        // independent scalar computation of the smoothed CE
        let mut want = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let src = &logits.data()[row * 3..(row + 1) * 3];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let e = eps_tail + (eps_head - eps_tail) * (counts[y] as f64 - 10.0) / 90.0;
            for j in 0..3 {
                let t = if j == y { 1.0 - e } else { e / 2.0 };
                want += t * (lse - src[j]);
            }
        }
        want /= 2.0;

        let mut g = Graph::<f64>::new();
        let l_node = g.input(logits);
        let l = g.lt_aware_ce(l_node, &labels, &counts, eps_head, eps_tail).unwrap();
        assert!((g.value(l.node).item() - want).abs() < 1e-12);
    }

    #[test]
    fn lt_ce_balanced_counts_use_eps_head() {
        let eps = smoothing_eps::<f64>(&[7, 7, 7], 0.25, 0.4);
        assert_eq!(eps, vec![0.25, 0.25, 0.25]);
    }

    #[test]
    fn lt_ce_monotone_in_eps_for_confident_correct() {
        let mut prev = f64::NEG_INFINITY;
        for step in 0..20 {
            let e = 0.5 * step as f64 / 19.0;
            let mut g = Graph::<f64>::new();
            let logits = g.input(Tensor::from_vec(vec![1, 3], vec![5.0, 0.0, 0.0]));
            let l = g.lt_aware_ce(logits, &[0], &[10, 10, 10], e, e).unwrap();
            let v = g.value(l.node).item();
            assert!(v >= prev - 1e-12, "loss decreased at eps={e}");
            prev = v;
        }
    }

    #[test]
    fn kl_zero_when_distributions_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::<f64>::randn(vec![4, 6], 0.0, 2.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let t = g.input(x.clone());
        let s_node = g.input(x);
        for temp in [0.5, 1.0, 4.0] {
            let l = g.kl_div(t, s_node, temp).unwrap();
            assert!(g.value(l.node).item().abs() < 1e-12);
        }
        // uniform vs uniform
        let tu = g.input(Tensor::zeros(vec![2, 5]));
        let su = g.input(Tensor::full(vec![2, 5], 3.0)); // shifted uniform
        let l = g.kl_div(tu, su, 1.0).unwrap();
        assert!(g.value(l.node).item().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_closed_form() {
        // teacher [2,0], student [0,2], T=1
        let mut g = Graph::<f64>::new();
        let t = g.input(Tensor::from_vec(vec![1, 2], vec![2.0, 0.0]));
        let s_node = g.input(Tensor::from_vec(vec![1, 2], vec![0.0, 2.0]));
        let l = g.kl_div(t, s_node, 1.0).unwrap();

        let p = [(2.0f64).exp() / ((2.0f64).exp() + 1.0), 1.0 / ((2.0f64).exp() + 1.0)];
        let q = [1.0 / ((2.0f64).exp() + 1.0), (2.0f64).exp() / ((2.0f64).exp() + 1.0)];
        let want = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert!((g.value(l.node).item() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_teacher_side_gets_no_gradient() {
        let mut params = Params::<f64>::new();
        let tw = params.add("t", Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -1.0]), Role::Classifier, true);
        let sw = params.add("s", Tensor::from_vec(vec![1, 3], vec![0.0, 0.5, 0.2]), Role::Classifier, true);
        let mut g = Graph::new();
        let t = g.param(&params, tw);
        let s_node = g.param(&params, sw);
        let l = g.kl_div(t, s_node, 2.0).unwrap();
        let grads = g.backward(l.node).unwrap();
        params.accumulate(&g, &grads);
        assert!(params.get(tw).grad.data().iter().all(|&v| v == 0.0));
        assert!(params.get(sw).grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fs_geometry_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]));
        let same = g.input(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]));
        let l = g.feature_similarity(a, same).unwrap();
        assert!(g.value(l.node).item().abs() < 1e-12);

        let ortho = g.input(Tensor::from_vec(vec![1, 2], vec![-4.0, 3.0]));
        let l = g.feature_similarity(a, ortho).unwrap();
        assert!((g.value(l.node).item() - 1.0).abs() < 1e-12);

        let anti = g.input(Tensor::from_vec(vec![1, 2], vec![-3.0, -4.0]));
        let l = g.feature_similarity(a, anti).unwrap();
        assert!((g.value(l.node).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fs_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let t = Tensor::<f64>::randn(vec![3, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![3, 8], 0.0, 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let tn = g.input(t.clone());
        let bn = g.input(b.clone());
        let base = g.feature_similarity(tn, bn).unwrap();
        for c in [0.01, 0.5, 3.0, 1000.0] {
            let ts = g.input(t.map(|v| c * v));
            let l = g.feature_similarity(ts, bn).unwrap();
            assert!((g.value(l.node).item() - g.value(base.node).item()).abs() < 1e-6);
        }
    }

    #[test]
    fn fs_teacher_side_gets_no_gradient() {
        let mut params = Params::<f64>::new();
        let tw = params.add("t", Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -1.0]), Role::Encoder, true);
        let sw = params.add("s", Tensor::from_vec(vec![1, 3], vec![0.3, 0.5, 0.2]), Role::Encoder, true);
        let mut g = Graph::new();
        let t = g.param(&params, tw);
        let s_node = g.param(&params, sw);
        let l = g.feature_similarity(t, s_node).unwrap();
        let grads = g.backward(l.node).unwrap();
        params.accumulate(&g, &grads);
        assert!(params.get(tw).grad.data().iter().all(|&v| v == 0.0));
        assert!(params.get(sw).grad.data().iter().any(|&v| v != 0.0));
    }
}
