//! Evaluation reports, classifier weight-norm profiles, per-class gain
//! reports and step-cost profiling.
//!
//! Accuracies are percentages. Head/medium/tail aggregates are
//! sample-weighted means over the classes of each partition group.

use crate::checkpoint::Container;
use crate::config::TrainConfig;
use crate::data::{synth_generate, ClassPartition, Dataset};
use crate::error::{Error, Result};
use crate::graph::Params;
use crate::model::{BinaryModel, TeacherModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{distill_step, distill_step_direct_multires, DistillState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class accuracy (%) indexed by class id.
    pub per_class_acc: Vec<f64>,
    /// Test sample count per class id.
    pub class_counts: Vec<usize>,
    pub mean_acc: f64,
    pub head_acc: f64,
    pub medium_acc: f64,
    pub tail_acc: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no test samples, excluded from the aggregates.
    pub excluded_classes: Vec<usize>,
}

/// Evaluate any logits function over a balanced test set.
pub fn evaluate_with<T: Scalar>(
    mut forward: impl FnMut(&Tensor<T>) -> Tensor<T>,
    test: &Dataset<T>,
    partition: &ClassPartition,
    batch_size: usize,
) -> EvalReport {
    let k = test.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = test.batch(chunk);
        let logits = forward(&x);
        for (pred, &truth) in crate::ops::argmax_rows(&logits).iter().zip(&labels) {
            confusion[truth][*pred] += 1;
        }
    }
    report_from_confusion(confusion, partition)
}

/// Build the report from a finished confusion tally.
pub fn report_from_confusion(confusion: Vec<Vec<usize>>, partition: &ClassPartition) -> EvalReport {
    let k = confusion.len();
    let class_counts: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
    let per_class_acc: Vec<f64> = (0..k)
        .map(|c| {
            if class_counts[c] == 0 {
                0.0
            } else {
                100.0 * confusion[c][c] as f64 / class_counts[c] as f64
            }
        })
        .collect();
    let excluded_classes: Vec<usize> = (0..k).filter(|&c| class_counts[c] == 0).collect();
    let group_acc = |classes: &[usize]| -> f64 {
        let total: usize = classes.iter().map(|&c| class_counts[c]).sum();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = classes.iter().map(|&c| confusion[c][c]).sum();
        100.0 * correct as f64 / total as f64
    };
    let all: Vec<usize> = (0..k).collect();
    EvalReport {
        mean_acc: group_acc(&all),
        head_acc: group_acc(&partition.head),
        medium_acc: group_acc(&partition.medium),
        tail_acc: group_acc(&partition.tail),
        per_class_acc,
        class_counts,
        confusion,
        excluded_classes,
    }
}

/// Evaluate the binary model on its bit-packed inference path.
pub fn evaluate_binary<T: Scalar>(
    model: &BinaryModel<T>,
    ps: &Params<T>,
    test: &Dataset<T>,
    partition: &ClassPartition,
    batch_size: usize,
) -> EvalReport {
    evaluate_with(|x| model.infer(ps, x).1, test, partition, batch_size)
}

/// Evaluate the (calibrated) teacher through its inference forward.
pub fn evaluate_teacher<T: Scalar>(
    teacher: &TeacherModel<T>,
    ps: &Params<T>,
    test: &Dataset<T>,
    partition: &ClassPartition,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut err = None;
    let report = evaluate_with(
        |x| match teacher.forward_infer(ps, x) {
            Ok(out) => out.logits,
            Err(e) => {
                let k = test.num_classes;
                err.get_or_insert(e);
                Tensor::zeros(vec![x.shape()[0], k])
            }
        },
        test,
        partition,
        batch_size,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainReport {
    pub per_class_delta: Vec<f64>,
    pub mean_delta: f64,
    pub head_delta: f64,
    pub medium_delta: f64,
    pub tail_delta: f64,
}

/// Per-class and aggregate accuracy gains of one report over another.
pub fn gain_report(candle: &EvalReport, baseline: &EvalReport) -> Result<GainReport> {
    if candle.per_class_acc.len() != baseline.per_class_acc.len() {
        return Err(Error::ShapeMismatch(format!(
            "gain report over {} vs {} classes",
            candle.per_class_acc.len(),
            baseline.per_class_acc.len()
        )));
    }
    let per_class_delta = candle
        .per_class_acc
        .iter()
        .zip(&baseline.per_class_acc)
        .map(|(a, b)| a - b)
        .collect();
    Ok(GainReport {
        per_class_delta,
        mean_delta: candle.mean_acc - baseline.mean_acc,
        head_delta: candle.head_acc - baseline.head_acc,
        medium_delta: candle.medium_acc - baseline.medium_acc,
        tail_delta: candle.tail_acc - baseline.tail_acc,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormProfile {
    /// Per-class classifier row L2 norms, head-to-tail order.
    pub norms: Vec<f64>,
    /// Per-class biases in the same order.
    pub biases: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Coefficient of variation (std / mean), the dispersion scalar.
    pub cv: f64,
    /// Least-squares slope of norm against head-to-tail rank.
    pub slope: f64,
}

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        num += dx * (y - ybar);
        den += dx * dx;
    }
    num / den
}

/// Weight/bias norm profile of a checkpoint's classifier, in head-to-tail
/// class order.
pub fn classifier_norms(container: &Container, class_order: &[usize]) -> Result<NormProfile> {
    let w = container.find("classifier.weight")?;
    let b = container.find("classifier.bias")?;
    let (k, d) = w.dims2()?;
    if class_order.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "class order has {} entries for {k} classifier rows",
            class_order.len()
        )));
    }
    let norms: Vec<f64> = class_order
        .iter()
        .map(|&c| {
            w.data()[c * d..(c + 1) * d]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let biases: Vec<f64> = class_order.iter().map(|&c| b.data()[c] as f64).collect();
    let mean = norms.iter().sum::<f64>() / k as f64;
    let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    Ok(NormProfile {
        slope: least_squares_slope(&norms),
        cv: if mean.abs() > 0.0 { std / mean } else { 0.0 },
        mean,
        std,
        norms,
        biases,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileVariant {
    SingleRes,
    MultiResTeacher,
    DirectMultiRes,
}

impl ProfileVariant {
    pub const ALL: [ProfileVariant; 3] =
        [ProfileVariant::SingleRes, ProfileVariant::MultiResTeacher, ProfileVariant::DirectMultiRes];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileVariant::SingleRes => "single-res",
            ProfileVariant::MultiResTeacher => "multi-res-teacher",
            ProfileVariant::DirectMultiRes => "direct-multi-res",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: String,
    pub mean_step_ms: f64,
    pub std_step_ms: f64,
    /// Allocator high-water mark during the measured steps; 0 when the
    /// counting allocator is not installed in this process.
    pub peak_bytes: usize,
    pub steps: usize,
}

/// Measure mean step wall time per variant on identical data: warmup
/// steps, then `profile_steps` measured steps. Step time includes the
/// teacher forward.
pub fn profile_step_costs<T: Scalar>(cfg: &TrainConfig, variants: &[ProfileVariant]) -> Result<Vec<CostRow>> {
    if cfg.profile_steps == 0 {
        return Ok(Vec::new());
    }
    use rand::SeedableRng;
    let k = cfg.synth_classes.max(2);
    let data = synth_generate::<T>(k, cfg.batch_size.div_ceil(k) + 1, cfg.resolution_b, cfg.synth_separation, cfg.seed);
    let idx: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
    let (x, _) = data.batch(&idx);

    let mut rows = Vec::new();
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.multi_res = variant != ProfileVariant::SingleRes;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tps = Params::new();
        let teacher = TeacherModel::new(
            &mut tps,
            vcfg.teacher_width,
            4 * vcfg.binary_width,
            k,
            (vcfg.resolution_s, vcfg.resolution_b, vcfg.resolution_l),
            vcfg.multi_res,
            &mut rng,
        );
        teacher.freeze_encoder(&mut tps);
        let total = cfg.profile_warmup + cfg.profile_steps;
        let mut state = DistillState::new(&vcfg, k, total);

        let mut samples = Vec::with_capacity(cfg.profile_steps);
        crate::alloc::reset_peak();
        for i in 0..total {
            let t0 = Instant::now();
            let t_out = teacher.forward_infer(&tps, &x)?;
            match variant {
                ProfileVariant::DirectMultiRes => {
                    distill_step_direct_multires(
                        &x,
                        &t_out,
                        &state.model,
                        &mut state.params,
                        &mut state.balancer,
                        &mut state.opts,
                        &vcfg,
                    )?;
                }
                _ => {
                    distill_step(
                        &x,
                        &t_out,
                        &state.model,
                        &mut state.params,
                        &mut state.balancer,
                        &mut state.opts,
                        &vcfg,
                        i,
                    )?;
                }
            }
            if i >= cfg.profile_warmup {
                samples.push(t0.elapsed().as_secs_f64() * 1e3);
            } else if i + 1 == cfg.profile_warmup {
                crate::alloc::reset_peak();
            }
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples.len() as f64;
        rows.push(CostRow {
            variant: variant.as_str().to_string(),
            mean_step_ms: mean,
            std_step_ms: var.sqrt(),
            peak_bytes: crate::alloc::peak_bytes(),
            steps: samples.len(),
        });
    }
    Ok(rows)
}

/// One row of the fixed per-class CSV schema:
/// `class_rank,class_id,count,accuracy,weight_norm,bias`.
#[derive(Clone, Debug)]
pub struct PerClassRow {
    pub class_rank: usize,
    pub class_id: usize,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub weight_norm: Option<f64>,
    pub bias: Option<f64>,
}

pub fn write_per_class_csv(path: &std::path::Path, rows: &[PerClassRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "class_rank,class_id,count,accuracy,weight_norm,bias")?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.class_rank,
            r.class_id,
            r.count,
            fmt(r.accuracy),
            fmt(r.weight_norm),
            fmt(r.bias)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_partition(k: usize) -> ClassPartition {
        let order: Vec<usize> = (0..k).collect();
        crate::data::partition_classes(&vec![1; k], &order)
    }

    #[test]
    fn perfect_classifier_scores_100_everywhere() {
        let mut confusion = vec![vec![0usize; 4]; 4];
        for c in 0..4 {
            confusion[c][c] = 25;
        }
        let r = report_from_confusion(confusion, &uniform_partition(4));
        assert_eq!(r.mean_acc, 100.0);
        assert_eq!(r.head_acc, 100.0);
        assert_eq!(r.medium_acc, 100.0);
        assert_eq!(r.tail_acc, 100.0);
        assert!(r.per_class_acc.iter().all(|&a| a == 100.0));
        assert!(r.excluded_classes.is_empty());
    }

    #[test]
    fn constant_classifier_scores_chance_on_balanced_test() {
        let k = 5;
        let mut confusion = vec![vec![0usize; k]; k];
        for c in 0..k {
            confusion[c][0] = 20; // everything predicted as class 0
        }
        let r = report_from_confusion(confusion, &uniform_partition(k));
        assert!((r.mean_acc - 100.0 / k as f64).abs() < 1e-9);
    }

    #[test]
    fn random_confusion_matches_tally_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let k = 7;
        let truth: Vec<usize> = (0..300).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..300).map(|_| rng.gen_range(0..k)).collect();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            confusion[t][p] += 1;
        }
        let r = report_from_confusion(confusion.clone(), &uniform_partition(k));

        // independent tally
        let mut correct = vec![0usize; k];
        let mut count = vec![0usize; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            count[t] += 1;
            if t == p {
                correct[t] += 1;
            }
        }
        for c in 0..k {
            let want = 100.0 * correct[c] as f64 / count[c] as f64;
            assert!((r.per_class_acc[c] - want).abs() < 1e-9);
        }
        let mean_want = 100.0 * correct.iter().sum::<usize>() as f64 / 300.0;
        assert!((r.mean_acc - mean_want).abs() < 1e-9);
    }

    #[test]
    fn mean_recomputes_from_per_class_and_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = 6;
        let mut confusion = vec![vec![0usize; k]; k];
        for t in 0..k {
            for p in 0..k {
                confusion[t][p] = rng.gen_range(0..30);
            }
        }
        let r = report_from_confusion(confusion, &uniform_partition(k));
        let recomputed: f64 = (0..k)
            .map(|c| r.per_class_acc[c] * r.class_counts[c] as f64)
            .sum::<f64>()
            / r.class_counts.iter().sum::<usize>() as f64;
        assert!((r.mean_acc - recomputed).abs() < 1e-9);
    }

    #[test]
    fn empty_class_is_excluded_with_flag() {
        let mut confusion = vec![vec![0usize; 3]; 3];
        confusion[0][0] = 10;
        confusion[1][1] = 5;
        // class 2 has no test samples
        let r = report_from_confusion(confusion, &uniform_partition(3));
        assert_eq!(r.excluded_classes, vec![2]);
        assert_eq!(r.mean_acc, 100.0);
    }

    #[test]
    fn gain_report_examples() {
        let p = uniform_partition(3);
        let mk = |accs: [f64; 3]| {
            let mut confusion = vec![vec![0usize; 3]; 3];
            for c in 0..3 {
                confusion[c][c] = accs[c] as usize;
                confusion[c][(c + 1) % 3] = 100 - accs[c] as usize;
            }
            report_from_confusion(confusion, &p)
        };
        let a = mk([50.0, 60.0, 70.0]);
        let zero = gain_report(&a, &a).unwrap();
        assert!(zero.per_class_delta.iter().all(|&d| d == 0.0));
        assert_eq!(zero.mean_delta, 0.0);

        let full = mk([100.0, 100.0, 100.0]);
        let none = mk([0.0, 0.0, 0.0]);
        let g = gain_report(&full, &none).unwrap();
        assert!(g.per_class_delta.iter().all(|&d| d == 100.0));
        assert_eq!(g.mean_delta, 100.0);

        // elementwise subtraction oracle on a random pair
        let b = mk([30.0, 80.0, 10.0]);
        let g = gain_report(&a, &b).unwrap();
        for c in 0..3 {
            assert!((g.per_class_delta[c] - (a.per_class_acc[c] - b.per_class_acc[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_report_rejects_k_mismatch() {
        let a = report_from_confusion(vec![vec![1]], &uniform_partition(1));
        let b = report_from_confusion(vec![vec![1, 0], vec![0, 1]], &uniform_partition(2));
        assert!(matches!(gain_report(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn norm_profile_flat_and_linear_cases() {
        // all rows equal: slope 0, cv 0
        let k = 5;
        let d = 8;
        let mut w = Vec::new();
        for _ in 0..k {
            w.extend((0..d).map(|j| (j as f32) * 0.1 + 0.5));
        }
        let container = Container {
            params: vec![
                ("classifier.weight".into(), Tensor::from_vec(vec![k, d], w)),
                ("classifier.bias".into(), Tensor::from_vec(vec![k], vec![0.25f32; k])),
            ],
            optimizer: vec![],
        };
        let order: Vec<usize> = (0..k).collect();
        let p = classifier_norms(&container, &order).unwrap();
        assert!(p.slope.abs() < 1e-9);
        assert!(p.cv.abs() < 1e-7);
        assert!(p.biases.iter().all(|&b| (b - 0.25).abs() < 1e-7));

        // rows scaled 1..K: norms are i * base, slope = base exactly
        let base_row: Vec<f32> = (0..d).map(|j| (j as f32) * 0.2 - 0.7).collect();
        let base_norm = base_row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let mut w = Vec::new();
        for i in 1..=k {
            w.extend(base_row.iter().map(|&v| v * i as f32));
        }
        let container = Container {
            params: vec![
                ("classifier.weight".into(), Tensor::from_vec(vec![k, d], w)),
                ("classifier.bias".into(), Tensor::from_vec(vec![k], vec![0.0f32; k])),
            ],
            optimizer: vec![],
        };
        let p = classifier_norms(&container, &order).unwrap();
        assert!((p.slope - base_norm).abs() < 1e-5, "slope {} vs {}", p.slope, base_norm);
    }

    #[test]
    fn norm_profile_matches_f64_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = Tensor::<f32>::randn(vec![10, 32], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![10], 0.0, 1.0, &mut rng);
        let container = Container {
            params: vec![("classifier.weight".into(), w.clone()), ("classifier.bias".into(), b)],
            optimizer: vec![],
        };
        let order: Vec<usize> = (0..10).collect();
        let p = classifier_norms(&container, &order).unwrap();
        for c in 0..10 {
            let want: f64 = w.data()[c * 32..(c + 1) * 32]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            assert!((p.norms[c] - want).abs() / want < 1e-6);
        }
    }

    #[test]
    fn missing_classifier_tensor_is_reported() {
        let container = Container::default();
        assert!(matches!(
            classifier_norms(&container, &[]),
            Err(Error::MissingTensor(_))
        ));
    }

    #[test]
    fn profile_with_zero_steps_is_empty() {
        let mut cfg = TrainConfig::default();
        cfg.profile_steps = 0;
        let rows = profile_step_costs::<f32>(&cfg, &ProfileVariant::ALL).unwrap();
        assert!(rows.is_empty());
    }
}
