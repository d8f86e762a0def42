//! Run configuration: a flat `key = value` text file with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::geometry::ShapeKind;
use crate::masking::Strategy;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub n_points: usize,
    /// Patch count G.
    pub groups: usize,
    /// Neighbours per patch k.
    pub group_size: usize,
    /// Token width C.
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub mlp_ratio: usize,
    /// Mini-PointNet widths: first MLP hidden, first MLP out, second MLP hidden.
    pub pointnet_widths: [usize; 3],
    /// Prototype count Q.
    pub prototypes: usize,
    pub temperature: f64,
    pub mask_ratio: f64,
    /// Components fully masked per cloud (m_c).
    pub mask_components: usize,
    pub strategy: Strategy,
    pub lambda_proto: f64,
    pub lambda_cont: f64,
    pub knorm: bool,
    pub knorm_k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: Vec<(ShapeKind, usize)>,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub head_hidden: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Stop fine-tuning once an epoch's train accuracy reaches this value
    /// (0 disables).
    pub finetune_target_acc: f64,
}

pub const PRESETS: [&str; 3] = ["paper-default", "test-small", "toy"];

fn balanced(count: usize) -> Vec<(ShapeKind, usize)> {
    ShapeKind::ALL.iter().map(|&k| (k, count)).collect()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::paper_default()),
            "test-small" => Ok(Self::test_small()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// Full-size architecture: 1024 points, 64 patches of 32, width 384,
    /// 6 heads, 12 encoder and 4 decoder blocks.
    pub fn paper_default() -> Self {
        RunConfig {
            preset: "paper-default".into(),
            n_points: 1024,
            groups: 64,
            group_size: 32,
            dim: 384,
            heads: 6,
            encoder_blocks: 12,
            decoder_blocks: 4,
            mlp_ratio: 4,
            pointnet_widths: [128, 256, 512],
            prototypes: 8,
            temperature: 0.07,
            mask_ratio: 0.6,
            mask_components: 1,
            strategy: Strategy::Csem,
            lambda_proto: 1.0,
            lambda_cont: 1.0,
            knorm: true,
            knorm_k: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            dataset: balanced(64),
            split_seed: 17,
            train_fraction: 0.8,
            head_hidden: 256,
            finetune_epochs: 300,
            finetune_lr: 5e-4,
            finetune_target_acc: 0.0,
        }
    }

    /// Desk-scale preset used by every training-based check.
    pub fn test_small() -> Self {
        RunConfig {
            preset: "test-small".into(),
            n_points: 256,
            groups: 32,
            group_size: 8,
            dim: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 1,
            mlp_ratio: 2,
            pointnet_widths: [32, 64, 128],
            prototypes: 4,
            knorm_k: 4,
            epochs: 30,
            batch_size: 16,
            finetune_epochs: 50,
            finetune_lr: 1e-3,
            ..Self::paper_default()
        }
    }

    /// Tiny network for finite-difference gradient checks.
    pub fn toy() -> Self {
        RunConfig {
            preset: "toy".into(),
            n_points: 64,
            groups: 8,
            group_size: 4,
            dim: 16,
            heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 1,
            mlp_ratio: 2,
            pointnet_widths: [8, 16, 16],
            prototypes: 4,
            knorm_k: 3,
            head_hidden: 16,
            epochs: 2,
            batch_size: 4,
            dataset: balanced(4),
            finetune_epochs: 2,
            ..Self::test_small()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Points predicted per token by the prototype reconstruction head.
    pub fn ppr_fanout(&self) -> usize {
        ((self.n_points as f64 / self.groups as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.groups == 0 || self.groups > self.n_points {
            return fail(format!("groups = {} must be in 1..=n_points", self.groups));
        }
        if self.group_size == 0 || self.group_size > self.n_points {
            return fail(format!(
                "group_size = {} must be in 1..=n_points",
                self.group_size
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.decoder_blocks == 0 || self.encoder_blocks < self.decoder_blocks {
            return fail("need encoder_blocks >= decoder_blocks >= 1".into());
        }
        if self.prototypes < 2 {
            return fail("prototypes must be at least 2".into());
        }
        if self.temperature <= 0.0 {
            return fail("temperature must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        let masked = (self.mask_ratio * self.groups as f64).round() as usize;
        if masked == 0 || masked >= self.groups {
            return fail(format!(
                "mask_ratio {} masks {masked} of {} tokens",
                self.mask_ratio, self.groups
            ));
        }
        if self.knorm_k == 0 || self.knorm_k > self.groups {
            return fail(format!("knorm_k = {} must be in 1..=groups", self.knorm_k));
        }
        if self.batch_size == 0 || self.dataset.is_empty() {
            return fail("batch_size and dataset must be non-empty".into());
        }
        if self.mlp_ratio == 0 || self.pointnet_widths.contains(&0) || self.head_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)".into());
        }
        if self.n_points < crate::geometry::MIN_POINTS {
            return fail(format!(
                "n_points must be at least {}",
                crate::geometry::MIN_POINTS
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::Config(format!("bad value '{v}' for '{key}': {e}")))
        }
        match key {
            "preset" => self.preset = value.to_string(),
            "n_points" => self.n_points = p(key, value)?,
            "groups" => self.groups = p(key, value)?,
            "group_size" => self.group_size = p(key, value)?,
            "dim" => self.dim = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "encoder_blocks" => self.encoder_blocks = p(key, value)?,
            "decoder_blocks" => self.decoder_blocks = p(key, value)?,
            "mlp_ratio" => self.mlp_ratio = p(key, value)?,
            "pointnet_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.pointnet_widths = parts.try_into().map_err(|_| {
                    Error::Config("pointnet_widths needs exactly three values".into())
                })?;
            }
            "prototypes" => self.prototypes = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "mask_ratio" => self.mask_ratio = p(key, value)?,
            "mask_components" => self.mask_components = p(key, value)?,
            "strategy" => {
                self.strategy = value
                    .parse()
                    .map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "lambda_proto" => self.lambda_proto = p(key, value)?,
            "lambda_cont" => self.lambda_cont = p(key, value)?,
            "knorm" => self.knorm = p(key, value)?,
            "knorm_k" => self.knorm_k = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "dataset" => self.dataset = parse_dataset(value)?,
            "split_seed" => self.split_seed = p(key, value)?,
            "train_fraction" => self.train_fraction = p(key, value)?,
            "head_hidden" => self.head_hidden = p(key, value)?,
            "finetune_epochs" => self.finetune_epochs = p(key, value)?,
            "finetune_lr" => self.finetune_lr = p(key, value)?,
            "finetune_target_acc" => self.finetune_target_acc = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses config text. A `preset` key, wherever it appears, selects the
    /// base values; all other keys override it.
    pub fn parse(text: &str, default_preset: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let base = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or(default_preset);
        let mut cfg = Self::preset(base)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, default_preset)
    }

    /// Every key, one per line, in a fixed order. `parse` of this text
    /// reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let w = self.pointnet_widths;
        let dataset = self
            .dataset
            .iter()
            .map(|(k, n)| format!("{k}:{n}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("n_points", self.n_points.to_string());
        kv("groups", self.groups.to_string());
        kv("group_size", self.group_size.to_string());
        kv("dim", self.dim.to_string());
        kv("heads", self.heads.to_string());
        kv("encoder_blocks", self.encoder_blocks.to_string());
        kv("decoder_blocks", self.decoder_blocks.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("pointnet_widths", format!("{},{},{}", w[0], w[1], w[2]));
        kv("prototypes", self.prototypes.to_string());
        kv("temperature", self.temperature.to_string());
        kv("mask_ratio", self.mask_ratio.to_string());
        kv("mask_components", self.mask_components.to_string());
        kv("strategy", self.strategy.to_string());
        kv("lambda_proto", self.lambda_proto.to_string());
        kv("lambda_cont", self.lambda_cont.to_string());
        kv("knorm", self.knorm.to_string());
        kv("knorm_k", self.knorm_k.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset", dataset);
        kv("split_seed", self.split_seed.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("finetune_lr", self.finetune_lr.to_string());
        kv("finetune_target_acc", self.finetune_target_acc.to_string());
        s
    }
}

fn parse_dataset(value: &str) -> Result<Vec<(ShapeKind, usize)>> {
    value
        .split(',')
        .map(|item| {
            let (kind, count) = item.trim().split_once(':').ok_or_else(|| {
                Error::Config(format!("dataset entry '{item}' must be kind:count"))
            })?;
            let kind: ShapeKind = kind
                .trim()
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?;
            let count = count
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad count in '{item}': {e}")))?;
            Ok((kind, count))
        })
        .collect()
}
