//! Flat `key = value` run configuration.
//!
//! Sources are applied in order: built-in defaults, the config file,
//! `DIQA_<KEY>` environment variables (key upper-cased, dots replaced by
//! underscores), then `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prompt::PromptMode;
use crate::schedule::Spacing;

pub const ENV_PREFIX: &str = "DIQA_";

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // schedule
    pub total_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_timestep_range: (usize, usize),
    pub eval_timestep_count: usize,
    pub eval_timestep_spacing: Spacing,
    pub denoise_steps: usize,
    pub denoise_delta: usize,

    // toy backbone
    pub image_size: usize,
    pub latent_channels: usize,
    pub patch: usize,
    pub base_width: usize,
    pub num_blocks: usize,
    pub text_width: usize,
    pub attention_width: usize,
    pub detail_scale: f64,
    /// Blocks whose maps are pooled; `None` means all.
    pub tapped_blocks: Option<Vec<usize>>,

    // prompts
    pub pos_attribute: String,
    pub neg_attribute: String,
    pub context_length: usize,
    pub prompt_mode: PromptMode,
    pub prompt_trainable: bool,

    // readout
    pub lambda: f64,
    pub lora_rank: usize,
    pub lora_scale: f64,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub target_span: f64,
    /// `None` places the target offset at the uniform-attention score.
    pub target_offset: Option<f64>,
    pub freeze_cross_attention: bool,
    pub fixed_prompts: bool,
    pub mean_pool_instead_of_lse: bool,
    pub train_query_weights: bool,
    pub train_key_weights: bool,
    pub train_value_weights: bool,

    // pretrained adapter stanza
    pub adapter_kind: String,
    pub adapter_checkpoint: Option<PathBuf>,
    pub adapter_blocks: Option<Vec<(usize, usize)>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            train_timestep_range: (0, 100),
            eval_timestep_count: 8,
            eval_timestep_spacing: Spacing::Even,
            denoise_steps: 1,
            denoise_delta: 20,
            image_size: 128,
            latent_channels: 4,
            patch: 8,
            base_width: 32,
            num_blocks: 2,
            text_width: 64,
            attention_width: 64,
            detail_scale: 4.0,
            tapped_blocks: None,
            pos_attribute: "Good Photo.".into(),
            neg_attribute: "Bad Photo.".into(),
            context_length: 16,
            prompt_mode: PromptMode::Antonym,
            prompt_trainable: true,
            lambda: 0.14,
            lora_rank: 4,
            lora_scale: 1.0,
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            lr_decay: 1.0,
            seed: 0,
            target_span: 1e-3,
            target_offset: None,
            freeze_cross_attention: false,
            fixed_prompts: false,
            mean_pool_instead_of_lse: false,
            train_query_weights: false,
            train_key_weights: true,
            train_value_weights: true,
            adapter_kind: "toy".into(),
            adapter_checkpoint: None,
            adapter_blocks: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `"lo,hi"` meaning the half-open range `(lo, hi]`.
fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let v: Vec<usize> = parse_list(key, value)?;
    match v.as_slice() {
        [lo, hi] if lo < hi => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("{key}: expected `lo,hi` with lo < hi, got {value:?}"))),
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// All recognised keys, in a stable order.
    pub const KEYS: &'static [&'static str] = &[
        "total_timesteps",
        "beta_start",
        "beta_end",
        "train_timestep_range",
        "eval_timestep_count",
        "eval_timestep_spacing",
        "denoise_steps",
        "denoise_delta",
        "image_size",
        "latent_channels",
        "patch",
        "base_width",
        "num_blocks",
        "text_width",
        "attention_width",
        "detail_scale",
        "tapped_blocks",
        "pos_attribute",
        "neg_attribute",
        "context_length",
        "prompt_mode",
        "prompt_trainable",
        "lambda",
        "lora_rank",
        "lora_scale",
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "lr_decay",
        "seed",
        "target_span",
        "target_offset",
        "freeze_cross_attention",
        "fixed_prompts",
        "mean_pool_instead_of_lse",
        "train_query_weights",
        "train_key_weights",
        "train_value_weights",
        "adapter.kind",
        "adapter.checkpoint",
        "adapter.blocks",
    ];

    pub fn has_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "total_timesteps" => self.total_timesteps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "train_timestep_range" => self.train_timestep_range = parse_range(key, v)?,
            "eval_timestep_count" => self.eval_timestep_count = parse(key, v)?,
            "eval_timestep_spacing" => {
                self.eval_timestep_spacing = match v {
                    "even" => Spacing::Even,
                    "random" => Spacing::Random,
                    _ => return Err(Error::Config(format!("{key}: expected even|random, got {v:?}"))),
                }
            }
            "denoise_steps" => self.denoise_steps = parse(key, v)?,
            "denoise_delta" => self.denoise_delta = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "latent_channels" => self.latent_channels = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "base_width" => self.base_width = parse(key, v)?,
            "num_blocks" => self.num_blocks = parse(key, v)?,
            "text_width" => self.text_width = parse(key, v)?,
            "attention_width" => self.attention_width = parse(key, v)?,
            "detail_scale" => self.detail_scale = parse(key, v)?,
            "tapped_blocks" => {
                self.tapped_blocks = if v == "all" { None } else { Some(parse_list(key, v)?) }
            }
            "pos_attribute" => self.pos_attribute = v.to_string(),
            "neg_attribute" => self.neg_attribute = v.to_string(),
            "context_length" => self.context_length = parse(key, v)?,
            "prompt_mode" => {
                self.prompt_mode = match v {
                    "antonym" => PromptMode::Antonym,
                    "single" => PromptMode::Single,
                    _ => return Err(Error::Config(format!("{key}: expected antonym|single, got {v:?}"))),
                }
            }
            "prompt_trainable" => self.prompt_trainable = parse_bool(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_scale" => self.lora_scale = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "target_span" => self.target_span = parse(key, v)?,
            "target_offset" => {
                self.target_offset = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "freeze_cross_attention" => self.freeze_cross_attention = parse_bool(key, v)?,
            "fixed_prompts" => self.fixed_prompts = parse_bool(key, v)?,
            "mean_pool_instead_of_lse" => self.mean_pool_instead_of_lse = parse_bool(key, v)?,
            "train_query_weights" => self.train_query_weights = parse_bool(key, v)?,
            "train_key_weights" => self.train_key_weights = parse_bool(key, v)?,
            "train_value_weights" => self.train_value_weights = parse_bool(key, v)?,
            "adapter.kind" => self.adapter_kind = v.to_string(),
            "adapter.checkpoint" => {
                self.adapter_checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "adapter.blocks" => {
                self.adapter_blocks = if v.is_empty() {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|item| {
                                let (n, d) = item
                                    .trim()
                                    .split_once('x')
                                    .ok_or_else(|| Error::Config(format!("{key}: expected NxD items, got {item:?}")))?;
                                Ok((parse(key, n)?, parse(key, d)?))
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "total_timesteps" => self.total_timesteps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "train_timestep_range" => format!("{},{}", self.train_timestep_range.0, self.train_timestep_range.1),
            "eval_timestep_count" => self.eval_timestep_count.to_string(),
            "eval_timestep_spacing" => match self.eval_timestep_spacing {
                Spacing::Even => "even".into(),
                Spacing::Random => "random".into(),
            },
            "denoise_steps" => self.denoise_steps.to_string(),
            "denoise_delta" => self.denoise_delta.to_string(),
            "image_size" => self.image_size.to_string(),
            "latent_channels" => self.latent_channels.to_string(),
            "patch" => self.patch.to_string(),
            "base_width" => self.base_width.to_string(),
            "num_blocks" => self.num_blocks.to_string(),
            "text_width" => self.text_width.to_string(),
            "attention_width" => self.attention_width.to_string(),
            "detail_scale" => self.detail_scale.to_string(),
            "tapped_blocks" => match &self.tapped_blocks {
                None => "all".into(),
                Some(b) => b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            },
            "pos_attribute" => self.pos_attribute.clone(),
            "neg_attribute" => self.neg_attribute.clone(),
            "context_length" => self.context_length.to_string(),
            "prompt_mode" => match self.prompt_mode {
                PromptMode::Antonym => "antonym".into(),
                PromptMode::Single => "single".into(),
            },
            "prompt_trainable" => self.prompt_trainable.to_string(),
            "lambda" => self.lambda.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_scale" => self.lora_scale.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "seed" => self.seed.to_string(),
            "target_span" => self.target_span.to_string(),
            "target_offset" => fmt_opt_f64(self.target_offset),
            "freeze_cross_attention" => self.freeze_cross_attention.to_string(),
            "fixed_prompts" => self.fixed_prompts.to_string(),
            "mean_pool_instead_of_lse" => self.mean_pool_instead_of_lse.to_string(),
            "train_query_weights" => self.train_query_weights.to_string(),
            "train_key_weights" => self.train_key_weights.to_string(),
            "train_value_weights" => self.train_value_weights.to_string(),
            "adapter.kind" => self.adapter_kind.clone(),
            "adapter.checkpoint" => self
                .adapter_checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "adapter.blocks" => self
                .adapter_blocks
                .as_ref()
                .map(|b| b.iter().map(|(n, d)| format!("{n}x{d}")).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
            _ => return None,
        };
        Some(s)
    }

    /// Snapshot of every key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `DIQA_*` variables from the given environment.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let lowered = rest.to_ascii_lowercase();
            let key = Self::KEYS
                .iter()
                .find(|k| k.replace('.', "_") == lowered)
                .ok_or_else(|| Error::Config(format!("unknown environment override {name}")))?;
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        if self.eval_timestep_count == 0 {
            return Err(Error::Config("eval_timestep_count must be >= 1".into()));
        }
        if self.train_timestep_range.1 > self.total_timesteps {
            return Err(Error::Config("train_timestep_range exceeds total_timesteps".into()));
        }
        if self.denoise_steps == 0 || self.denoise_delta == 0 {
            return Err(Error::Config("denoise_steps and denoise_delta must be >= 1".into()));
        }
        if let Some(b) = &self.tapped_blocks {
            if b.is_empty() || b.iter().any(|&i| i >= self.num_blocks) {
                return Err(Error::Config(format!("tapped_blocks {b:?} out of range")));
            }
        }
        Ok(())
    }
}
