//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are errors. Command
//! line overrides go through [`ExperimentConfig::set`], the same path the
//! file parser uses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, FusionFn, FusionLocation};
use crate::edge::{FeatureMask, TranslationNorm};
use crate::m4c::{FeatureDims, ModelConfig, MAX_DECODE_STEPS};
use crate::synth::{GenParams, TemplateMix};

use super::HarnessError;

/// Environment variable naming the directory that run outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "GRT_OUTPUT_ROOT";
pub const MAX_QUESTION_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub d_in: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// 0 means `4 * d_in`.
    pub ffn_width: usize,
    pub fusion_location: FusionLocation,
    pub fusion_fn: FusionFn,
    pub d_e_prime: usize,
    pub feature_mask: FeatureMask,
    pub translation_norm: TranslationNorm,
    pub max_decode_steps: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    /// Fractions of `max_updates` at which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub max_updates: usize,
    pub batch_size: usize,
    /// Validation cadence in updates; the final update is always evaluated.
    pub eval_every: usize,

    /// Scene files; when empty the split is generated from `data_seed`.
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub data_seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub gen: GenParams,

    /// Worker threads for per-instance passes; 0 uses every available core.
    /// Results do not depend on it.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_in: 48,
            n_heads: 12,
            n_layers: 4,
            ffn_width: 0,
            fusion_location: FusionLocation::Values,
            fusion_fn: FusionFn::Add,
            d_e_prime: 32,
            feature_mask: FeatureMask::ALL.without(crate::edge::EdgeFeature::Appearance),
            translation_norm: TranslationNorm::Image,
            max_decode_steps: MAX_DECODE_STEPS,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_fraction: 0.02,
            decay_points: vec![0.58, 0.79],
            decay_factor: 0.1,
            grad_clip: 0.25,
            max_updates: 3000,
            batch_size: 32,
            eval_every: 500,
            train_data: None,
            val_data: None,
            data_seed: 0,
            train_size: 2000,
            val_size: 500,
            gen: GenParams::default(),
            workers: 0,
            output_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.trim().parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize), HarnessError> {
    let (lo, hi) = value.split_once('-').unwrap_or((value, value));
    Ok((parse_num(key, lo)?, parse_num(key, hi)?))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Keys accepted by [`ExperimentConfig::set`], in file order.
    pub const KEYS: [&'static str; 35] = [
        "seed",
        "d_in",
        "n_heads",
        "n_layers",
        "ffn_width",
        "fusion_location",
        "fusion_fn",
        "d_e_prime",
        "feature_mask",
        "translation_norm",
        "max_decode_steps",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "warmup_fraction",
        "decay_points",
        "decay_factor",
        "grad_clip",
        "max_updates",
        "batch_size",
        "eval_every",
        "train_data",
        "val_data",
        "data_seed",
        "train_size",
        "val_size",
        "gen_objects",
        "gen_ocr",
        "gen_templates",
        "gen_answer_noise",
        "gen_appearance_noise",
        "feature_dims",
        "workers",
        "output_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        let bad = |what: &str| HarnessError::Config(format!("{key}: {what} {v:?}"));
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "d_in" => self.d_in = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "n_layers" => self.n_layers = parse_num(key, v)?,
            "ffn_width" => self.ffn_width = parse_num(key, v)?,
            "fusion_location" => self.fusion_location = FusionLocation::parse(v).ok_or_else(|| bad("unknown location"))?,
            "fusion_fn" => self.fusion_fn = FusionFn::parse(v).ok_or_else(|| bad("unknown function"))?,
            "d_e_prime" => self.d_e_prime = parse_num(key, v)?,
            "feature_mask" => self.feature_mask = FeatureMask::parse(v).ok_or_else(|| bad("unknown feature in"))?,
            "translation_norm" => {
                self.translation_norm = match v {
                    "image" => TranslationNorm::Image,
                    "object_size" => TranslationNorm::ObjectSize,
                    _ => return Err(bad("expected image or object_size, got")),
                }
            }
            "max_decode_steps" => self.max_decode_steps = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_num(key, v)?,
            "decay_points" => {
                self.decay_points = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty() && s.trim() != "none")
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_, _>>()?
            }
            "decay_factor" => self.decay_factor = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "max_updates" => self.max_updates = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "train_data" => self.train_data = opt_path(v),
            "val_data" => self.val_data = opt_path(v),
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "train_size" => self.train_size = parse_num(key, v)?,
            "val_size" => self.val_size = parse_num(key, v)?,
            "gen_objects" => self.gen.objects = parse_range(key, v)?,
            "gen_ocr" => self.gen.ocr = parse_range(key, v)?,
            "gen_templates" => self.gen.mix = if v == "default" { TemplateMix::default() } else { TemplateMix::parse(v)? },
            "gen_answer_noise" => self.gen.answer_noise = parse_num(key, v)?,
            "gen_appearance_noise" => self.gen.appearance_noise = parse_num(key, v)?,
            "feature_dims" => {
                let parts: Vec<usize> = v.split(',').map(|s| parse_num(key, s)).collect::<Result<_, _>>()?;
                let [d_fr, d_ft, d_p] = parts[..] else { return Err(bad("expected d_fr,d_ft,d_p, got")) };
                self.gen.dims = FeatureDims { d_fr, d_ft, d_p };
            }
            "workers" => self.workers = parse_num(key, v)?,
            "output_dir" => self.output_dir = opt_path(v),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let join = |v: &[f64]| if v.is_empty() { "none".to_string() } else { v.iter().map(f64::to_string).collect::<Vec<_>>().join(",") };
        match key {
            "seed" => self.seed.to_string(),
            "d_in" => self.d_in.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "ffn_width" => self.ffn_width.to_string(),
            "fusion_location" => self.fusion_location.name().to_string(),
            "fusion_fn" => self.fusion_fn.name().to_string(),
            "d_e_prime" => self.d_e_prime.to_string(),
            "feature_mask" => self.feature_mask.describe(),
            "translation_norm" => match self.translation_norm {
                TranslationNorm::Image => "image".into(),
                TranslationNorm::ObjectSize => "object_size".into(),
            },
            "max_decode_steps" => self.max_decode_steps.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "decay_points" => join(&self.decay_points),
            "decay_factor" => self.decay_factor.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "max_updates" => self.max_updates.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "train_data" => path_text(&self.train_data),
            "val_data" => path_text(&self.val_data),
            "data_seed" => self.data_seed.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "gen_objects" => format!("{}-{}", self.gen.objects.0, self.gen.objects.1),
            "gen_ocr" => format!("{}-{}", self.gen.ocr.0, self.gen.ocr.1),
            "gen_templates" => self.gen.mix.describe(),
            "gen_answer_noise" => self.gen.answer_noise.to_string(),
            "gen_appearance_noise" => self.gen.appearance_noise.to_string(),
            "feature_dims" => format!("{},{},{}", self.gen.dims.d_fr, self.gen.dims.d_ft, self.gen.dims.d_p),
            "workers" => self.workers.to_string(),
            "output_dir" => path_text(&self.output_dir),
            _ => unreachable!("key list and getter disagree"),
        }
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key, one per line; `parse(to_text())` restores the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// Hash of every key that can change results; `workers` and
    /// `output_dir` are excluded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| !matches!(**k, "workers" | "output_dir")) {
            h.update(format!("{k}={}\n", self.get(k)));
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_in: self.d_in,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_width: if self.ffn_width == 0 { 4 * self.d_in } else { self.ffn_width },
            fusion_location: self.fusion_location,
            fusion_fn: self.fusion_fn,
            d_e: self.feature_mask.d_e(),
            d_e_prime: self.d_e_prime,
        }
    }

    pub fn model_config(&self, question_vocab: usize, answer_vocab: usize) -> ModelConfig {
        ModelConfig {
            attention: self.attention(),
            dims: self.gen.dims,
            question_vocab,
            max_question_len: MAX_QUESTION_LEN,
            answer_vocab,
            max_decode_steps: self.max_decode_steps,
            feature_mask: self.feature_mask,
            translation_norm: self.translation_norm,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.max_updates < 1 {
            return fail("max_updates must be at least 1");
        }
        if self.batch_size < 1 || self.eval_every < 1 {
            return fail("batch_size and eval_every must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.decay_points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("warmup_fraction and decay_points must lie in [0, 1]");
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 || self.grad_clip < 0.0 {
            return fail("decay_factor must be positive and grad_clip non-negative");
        }
        if self.fusion_location.is_fused() && self.feature_mask.d_e() == 0 {
            return fail("a fused model needs at least one edge feature");
        }
        for p in [&self.train_data, &self.val_data].into_iter().flatten() {
            if !p.exists() {
                return Err(HarnessError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if self.train_data.is_some() != self.val_data.is_some() {
            return fail("train_data and val_data must be given together");
        }
        if self.train_data.is_none() && (self.train_size == 0 || self.val_size == 0) {
            return fail("train_size and val_size must be at least 1");
        }
        self.gen.validate()?;
        self.attention().validate()?;
        Ok(())
    }

    /// Number of warmup updates, at least one.
    pub fn warmup_updates(&self) -> usize {
        (snap(self.warmup_fraction * self.max_updates as f64).ceil() as usize).max(1)
    }

    /// Learning rate for 0-based update `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let warm = self.warmup_updates();
        let mut lr = self.lr * ((step + 1) as f64 / warm as f64).min(1.0);
        for p in &self.decay_points {
            if step >= snap(p * self.max_updates as f64).floor() as usize {
                lr *= self.decay_factor;
            }
        }
        lr
    }
}

/// Rounds products like `0.58 * 100 = 57.999..` to the integer they denote
/// before `floor`/`ceil`.
fn snap(x: f64) -> f64 {
    if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x
    }
}
