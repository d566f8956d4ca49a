//! Flat `key = value` run configuration.
//!
//! Every key has a documented default; unknown keys are hard errors. The
//! effective configuration hashes into checkpoint sidecars for provenance.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    fn parse(v: &str) -> Result<Self> {
        match v {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("optimizer must be `adam` or `sgd`, got `{v}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Cifar10,
    Cifar100,
}

impl DataSource {
    fn parse(v: &str) -> Result<Self> {
        match v {
            "synth" => Ok(DataSource::Synth),
            "cifar10" => Ok(DataSource::Cifar10),
            "cifar100" => Ok(DataSource::Cifar100),
            _ => Err(Error::Config(format!(
                "dataset must be `synth`, `cifar10` or `cifar100`, got `{v}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DataSource::Synth => "synth",
            DataSource::Cifar10 => "cifar10",
            DataSource::Cifar100 => "cifar100",
        }
    }
}

/// One row per key: (key, default, unit, help).
pub const CONFIG_DOC: &[(&str, &str, &str, &str)] = &[
    ("dataset", "synth", "-", "data source: synth | cifar10 | cifar100"),
    ("data_dir", "data", "path", "directory holding CIFAR binary files"),
    ("synth_classes", "10", "count", "number of synthetic classes"),
    ("synth_per_class", "1100", "count", "per-class pool the LT subset is drawn from"),
    ("synth_pretrain_per_class", "400", "count", "balanced per-class pool for teacher pretraining"),
    ("synth_test_per_class", "100", "count", "balanced held-out per-class test samples"),
    ("synth_image", "32", "px", "synthetic image side length"),
    ("synth_separation", "2.5", "noise sigmas", "class pattern amplitude; 0 = indistinguishable"),
    ("lt_ratio", "50", "ratio", "imbalance ratio (head count / tail count), >= 1"),
    ("augment", "false", "bool", "random horizontal flip + pad-4 crop on training batches"),
    ("binary_width", "16", "channels", "binary stem width; feature width D_B = 4x"),
    ("teacher_width", "12", "channels", "teacher stem width; encoder width = 4x"),
    ("prelu", "true", "bool", "PReLU activations (false = ReLU)"),
    ("learned_alpha", "false", "bool", "trainable per-channel scale instead of mean |w|"),
    ("ste_clip", "1", "-", "straight-through clip window |x| <= c"),
    ("resolution_s", "16", "px", "small input resolution"),
    ("resolution_b", "32", "px", "base input resolution (dataset resolution)"),
    ("resolution_l", "64", "px", "large input resolution"),
    ("multi_res", "true", "bool", "multi-resolution teacher forward and calibration"),
    ("batch_size", "32", "samples", "minibatch size"),
    ("lr0", "0.01", "lr", "initial learning rate (cosine-annealed)"),
    ("optimizer", "adam", "-", "distillation optimizer: adam | sgd"),
    ("weight_decay", "0", "-", "weight decay; must stay 0 for binary-network stages"),
    ("momentum", "0.9", "-", "sgd momentum (when optimizer = sgd)"),
    ("kl_temperature", "1", "-", "softmax temperature of the KL loss"),
    ("eps_head", "0", "-", "label smoothing at the most frequent class"),
    ("eps_tail", "0.1", "-", "label smoothing at the rarest class"),
    ("minmax_ratio", "1", "steps", "maximization steps per minimization step"),
    ("balancer_lr", "auto", "lr", "balancer step size; `auto` follows the schedule"),
    ("balancer_optimizer", "sgd", "-", "balancer ascent optimizer: sgd | adam"),
    ("lambda_post_ascent", "false", "bool", "re-evaluate lambda after the ascent step for the encoder update"),
    ("pretrain_epochs", "8", "epochs", "teacher pretraining epochs"),
    ("pretrain_lr", "0.01", "lr", "teacher pretraining learning rate"),
    ("calibrate_epochs", "5", "epochs", "classifier calibration epochs"),
    ("calibrate_lr", "0.01", "lr", "calibration learning rate"),
    ("distill_epochs", "12", "epochs", "distillation epochs"),
    ("scratch_optimizer", "adam", "-", "from-scratch baseline optimizer: adam | sgd"),
    ("scratch_weight_decay", "0", "-", "weight decay for the from-scratch baseline only"),
    ("scratch_momentum", "0.9", "-", "sgd momentum for the from-scratch baseline"),
    ("checkpoint_every", "0", "epochs", "checkpoint interval; 0 = final only"),
    ("seed", "7", "-", "RNG seed for all stages"),
    ("profile_warmup", "20", "steps", "profiling warmup steps per variant"),
    ("profile_steps", "200", "steps", "profiling measured steps per variant"),
];

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub dataset: DataSource,
    pub data_dir: String,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_pretrain_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_image: usize,
    pub synth_separation: f64,
    pub lt_ratio: f64,
    pub augment: bool,
    pub binary_width: usize,
    pub teacher_width: usize,
    pub prelu: bool,
    pub learned_alpha: bool,
    pub ste_clip: f64,
    pub resolution_s: usize,
    pub resolution_b: usize,
    pub resolution_l: usize,
    pub multi_res: bool,
    pub batch_size: usize,
    pub lr0: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub kl_temperature: f64,
    pub eps_head: f64,
    pub eps_tail: f64,
    pub minmax_ratio: usize,
    /// `None` follows the cosine schedule of the main learning rate.
    pub balancer_lr: Option<f64>,
    pub balancer_optimizer: OptimizerKind,
    pub lambda_post_ascent: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub calibrate_epochs: usize,
    pub calibrate_lr: f64,
    pub distill_epochs: usize,
    pub scratch_optimizer: OptimizerKind,
    pub scratch_weight_decay: f64,
    pub scratch_momentum: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub profile_warmup: usize,
    pub profile_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut cfg = Self {
            dataset: DataSource::Synth,
            data_dir: String::new(),
            synth_classes: 0,
            synth_per_class: 0,
            synth_pretrain_per_class: 0,
            synth_test_per_class: 0,
            synth_image: 0,
            synth_separation: 0.0,
            lt_ratio: 0.0,
            augment: false,
            binary_width: 0,
            teacher_width: 0,
            prelu: false,
            learned_alpha: false,
            ste_clip: 0.0,
            resolution_s: 0,
            resolution_b: 0,
            resolution_l: 0,
            multi_res: false,
            batch_size: 0,
            lr0: 0.0,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            momentum: 0.0,
            kl_temperature: 0.0,
            eps_head: 0.0,
            eps_tail: 0.0,
            minmax_ratio: 0,
            balancer_lr: None,
            balancer_optimizer: OptimizerKind::Sgd,
            lambda_post_ascent: false,
            pretrain_epochs: 0,
            pretrain_lr: 0.0,
            calibrate_epochs: 0,
            calibrate_lr: 0.0,
            distill_epochs: 0,
            scratch_optimizer: OptimizerKind::Adam,
            scratch_weight_decay: 0.0,
            scratch_momentum: 0.0,
            checkpoint_every: 0,
            seed: 0,
            profile_warmup: 0,
            profile_steps: 0,
        };
        for (key, default, _, _) in CONFIG_DOC {
            cfg.apply(key, default).expect("defaults parse");
        }
        cfg
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key `{key}`: expected {what}, got `{value}`"));
        let as_usize = || value.parse::<usize>().map_err(|_| bad("an unsigned integer"));
        let as_u64 = || value.parse::<u64>().map_err(|_| bad("an unsigned integer"));
        let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
        let as_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("true or false")),
        };
        match key {
            "dataset" => self.dataset = DataSource::parse(value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "synth_classes" => self.synth_classes = as_usize()?,
            "synth_per_class" => self.synth_per_class = as_usize()?,
            "synth_pretrain_per_class" => self.synth_pretrain_per_class = as_usize()?,
            "synth_test_per_class" => self.synth_test_per_class = as_usize()?,
            "synth_image" => self.synth_image = as_usize()?,
            "synth_separation" => self.synth_separation = as_f64()?,
            "lt_ratio" => self.lt_ratio = as_f64()?,
            "augment" => self.augment = as_bool()?,
            "binary_width" => self.binary_width = as_usize()?,
            "teacher_width" => self.teacher_width = as_usize()?,
            "prelu" => self.prelu = as_bool()?,
            "learned_alpha" => self.learned_alpha = as_bool()?,
            "ste_clip" => self.ste_clip = as_f64()?,
            "resolution_s" => self.resolution_s = as_usize()?,
            "resolution_b" => self.resolution_b = as_usize()?,
            "resolution_l" => self.resolution_l = as_usize()?,
            "multi_res" => self.multi_res = as_bool()?,
            "batch_size" => self.batch_size = as_usize()?,
            "lr0" => self.lr0 = as_f64()?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "weight_decay" => self.weight_decay = as_f64()?,
            "momentum" => self.momentum = as_f64()?,
            "kl_temperature" => self.kl_temperature = as_f64()?,
            "eps_head" => self.eps_head = as_f64()?,
            "eps_tail" => self.eps_tail = as_f64()?,
            "minmax_ratio" => self.minmax_ratio = as_usize()?,
            "balancer_lr" => {
                self.balancer_lr = if value == "auto" { None } else { Some(as_f64()?) };
            }
            "balancer_optimizer" => self.balancer_optimizer = OptimizerKind::parse(value)?,
            "lambda_post_ascent" => self.lambda_post_ascent = as_bool()?,
            "pretrain_epochs" => self.pretrain_epochs = as_usize()?,
            "pretrain_lr" => self.pretrain_lr = as_f64()?,
            "calibrate_epochs" => self.calibrate_epochs = as_usize()?,
            "calibrate_lr" => self.calibrate_lr = as_f64()?,
            "distill_epochs" => self.distill_epochs = as_usize()?,
            "scratch_optimizer" => self.scratch_optimizer = OptimizerKind::parse(value)?,
            "scratch_weight_decay" => self.scratch_weight_decay = as_f64()?,
            "scratch_momentum" => self.scratch_momentum = as_f64()?,
            "checkpoint_every" => self.checkpoint_every = as_usize()?,
            "seed" => self.seed = as_u64()?,
            "profile_warmup" => self.profile_warmup = as_usize()?,
            "profile_steps" => self.profile_steps = as_usize()?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_str_contents(contents: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in contents.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path)?;
        Self::from_str_contents(&contents)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lt_ratio < 1.0 || !self.lt_ratio.is_finite() {
            return Err(Error::Config(format!(
                "key `lt_ratio` ({}): `ratio` must be >= 1",
                self.lt_ratio
            )));
        }
        for (key, v) in [("eps_head", self.eps_head), ("eps_tail", self.eps_tail)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("key `{key}` must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("key `batch_size` must be >= 1".into()));
        }
        if self.kl_temperature <= 0.0 {
            return Err(Error::Config("key `kl_temperature` must be > 0".into()));
        }
        if self.minmax_ratio == 0 {
            return Err(Error::Config("key `minmax_ratio` must be >= 1".into()));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::Config(
                "key `weight_decay` must be 0 for binary-network training stages \
                 (use `scratch_weight_decay` for the from-scratch study)"
                    .into(),
            ));
        }
        if self.resolution_s == 0 || self.resolution_b % self.resolution_s != 0 {
            return Err(Error::Config(format!(
                "key `resolution_s` ({}) must divide resolution_b ({})",
                self.resolution_s, self.resolution_b
            )));
        }
        if self.resolution_b == 0 || self.resolution_l % self.resolution_b != 0 {
            return Err(Error::Config(format!(
                "key `resolution_l` ({}) must be a multiple of resolution_b ({})",
                self.resolution_l, self.resolution_b
            )));
        }
        if self.resolution_s < 8 {
            return Err(Error::Config("key `resolution_s` must be >= 8".into()));
        }
        if self.binary_width == 0 || self.teacher_width == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if self.ste_clip <= 0.0 {
            return Err(Error::Config("key `ste_clip` must be > 0".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key in doc order with its current value.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (key, _, _, _) in CONFIG_DOC {
            let v = self.value_of(key);
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    pub fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.as_str().to_string(),
            "data_dir" => self.data_dir.clone(),
            "synth_classes" => self.synth_classes.to_string(),
            "synth_per_class" => self.synth_per_class.to_string(),
            "synth_pretrain_per_class" => self.synth_pretrain_per_class.to_string(),
            "synth_test_per_class" => self.synth_test_per_class.to_string(),
            "synth_image" => self.synth_image.to_string(),
            "synth_separation" => self.synth_separation.to_string(),
            "lt_ratio" => self.lt_ratio.to_string(),
            "augment" => self.augment.to_string(),
            "binary_width" => self.binary_width.to_string(),
            "teacher_width" => self.teacher_width.to_string(),
            "prelu" => self.prelu.to_string(),
            "learned_alpha" => self.learned_alpha.to_string(),
            "ste_clip" => self.ste_clip.to_string(),
            "resolution_s" => self.resolution_s.to_string(),
            "resolution_b" => self.resolution_b.to_string(),
            "resolution_l" => self.resolution_l.to_string(),
            "multi_res" => self.multi_res.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr0" => self.lr0.to_string(),
            "optimizer" => self.optimizer.as_str().to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "kl_temperature" => self.kl_temperature.to_string(),
            "eps_head" => self.eps_head.to_string(),
            "eps_tail" => self.eps_tail.to_string(),
            "minmax_ratio" => self.minmax_ratio.to_string(),
            "balancer_lr" => self.balancer_lr.map_or("auto".to_string(), |v| v.to_string()),
            "balancer_optimizer" => self.balancer_optimizer.as_str().to_string(),
            "lambda_post_ascent" => self.lambda_post_ascent.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "calibrate_epochs" => self.calibrate_epochs.to_string(),
            "calibrate_lr" => self.calibrate_lr.to_string(),
            "distill_epochs" => self.distill_epochs.to_string(),
            "scratch_optimizer" => self.scratch_optimizer.as_str().to_string(),
            "scratch_weight_decay" => self.scratch_weight_decay.to_string(),
            "scratch_momentum" => self.scratch_momentum.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "seed" => self.seed.to_string(),
            "profile_warmup" => self.profile_warmup.to_string(),
            "profile_steps" => self.profile_steps.to_string(),
            _ => String::new(),
        }
    }

    /// FNV-1a over the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Rendered key table for `--help`.
    pub fn describe() -> String {
        let mut out = String::from("configuration keys (key = value per line, `#` comments):\n");
        for (key, default, unit, help) in CONFIG_DOC {
            let _ = writeln!(out, "  {key:<26} default {default:<8} [{unit}]  {help}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_documented_key() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        for (key, default, _, _) in CONFIG_DOC {
            assert_eq!(&cfg.value_of(key), default, "key {key}");
        }
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        let err = TrainConfig::from_str_contents("no_such_key = 1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
    }

    #[test]
    fn ratio_below_one_rejected_citing_ratio() {
        let err = TrainConfig::from_str_contents("lt_ratio = 0.5").unwrap_err();
        assert!(err.to_string().contains("ratio"), "{err}");
    }

    #[test]
    fn weight_decay_must_be_zero_for_binary_stages() {
        assert!(TrainConfig::from_str_contents("weight_decay = 0.01").is_err());
        // the from-scratch study axis stays configurable
        let cfg = TrainConfig::from_str_contents("scratch_weight_decay = 0.0005\nscratch_optimizer = sgd").unwrap();
        assert_eq!(cfg.scratch_weight_decay, 0.0005);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::from_str_contents("# a comment\n\nseed = 11 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
