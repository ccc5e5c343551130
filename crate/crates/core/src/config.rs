//! Flat `key = value` configuration shared by every command.
//!
//! Keys are grouped by prefix (`data.`, `model.`, `train.`, `policy.`,
//! `codec.`). Every key has a default, unknown or repeated keys are errors,
//! and `#` starts a comment.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::CostWeights;
use crate::training::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Budget-adherence probe every this many iterations (0: never).
    pub eval_every: usize,
    /// Regenerate teacher labels from the current model at the halfway point.
    pub refresh_labels: bool,
    /// Label cache to start from; empty means record one from the initial
    /// model.
    pub labels: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            refresh_labels: false,
            labels: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySettings {
    pub label_count: usize,
    pub label_neighbors: usize,
    pub cost: CostWeights,
    pub threshold: f64,
    pub label_seed: u64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            label_count: 64,
            label_neighbors: 4,
            cost: CostWeights::default(),
            threshold: 0.5,
            label_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecSettings {
    /// Decode every freshly encoded stream and compare before writing it.
    pub verify: bool,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self { verify: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub policy: PolicySettings,
    pub codec: CodecSettings,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            data: DatasetSpec {
                count: 256,
                size: model.image_size,
                complexity: 0.6,
                seed: 1,
            },
            model,
            train: TrainSettings::default(),
            policy: PolicySettings::default(),
            codec: CodecSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let p = &self.policy;
        vec![
            ("data.count", d.count.to_string()),
            ("data.size", d.size.to_string()),
            ("data.complexity", d.complexity.to_string()),
            ("data.seed", d.seed.to_string()),
            ("model.levels", list(&m.denoiser.levels)),
            (
                "model.blocks_per_level",
                m.denoiser.blocks_per_level.to_string(),
            ),
            (
                "model.time_embed_dim",
                m.denoiser.time_embed_dim.to_string(),
            ),
            (
                "model.entropy_embed_dim",
                m.denoiser.entropy_embed_dim.to_string(),
            ),
            ("model.groups", m.denoiser.groups.to_string()),
            ("model.attention", list(&m.denoiser.attention)),
            ("model.conditioning", m.denoiser.conditioning.to_string()),
            ("model.steps", m.steps.to_string()),
            ("model.beta_start", m.beta_start.to_string()),
            ("model.beta_end", m.beta_end.to_string()),
            ("model.budget_min", m.budget.min.to_string()),
            ("model.budget_max", m.budget.max.to_string()),
            ("model.init_seed", m.init_seed.to_string()),
            (
                "model.entropy_hyper_channels",
                m.entropy.hyper_channels.to_string(),
            ),
            (
                "model.entropy_latent_channels",
                m.entropy.latent_channels.to_string(),
            ),
            (
                "model.entropy_context_channels",
                m.entropy.context_channels.to_string(),
            ),
            (
                "model.entropy_fusion_channels",
                m.entropy.fusion_channels.to_string(),
            ),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.lambda_ent", t.weights.lambda_ent.to_string()),
            ("train.lambda_cal", t.weights.lambda_cal.to_string()),
            ("train.lambda_stop", t.weights.lambda_stop.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.refresh_labels", t.refresh_labels.to_string()),
            ("train.labels", t.labels.clone()),
            ("policy.hidden", list(&m.policy.hidden)),
            ("policy.label_count", p.label_count.to_string()),
            ("policy.label_neighbors", p.label_neighbors.to_string()),
            ("policy.beta", p.cost.beta.to_string()),
            ("policy.gamma", p.cost.gamma.to_string()),
            ("policy.threshold", p.threshold.to_string()),
            ("policy.label_seed", p.label_seed.to_string()),
            ("codec.verify", self.codec.verify.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.policy;
        match key {
            "data.count" => self.data.count = parse(key, v)?,
            "data.size" => {
                self.data.size = parse(key, v)?;
                m.image_size = self.data.size;
            }
            "data.complexity" => self.data.complexity = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.levels" => m.denoiser.levels = parse_list(key, v)?,
            "model.blocks_per_level" => m.denoiser.blocks_per_level = parse(key, v)?,
            "model.time_embed_dim" => m.denoiser.time_embed_dim = parse(key, v)?,
            "model.entropy_embed_dim" => m.denoiser.entropy_embed_dim = parse(key, v)?,
            "model.groups" => m.denoiser.groups = parse(key, v)?,
            "model.attention" => m.denoiser.attention = parse_list(key, v)?,
            "model.conditioning" => m.denoiser.conditioning = parse(key, v)?,
            "model.steps" => m.steps = parse(key, v)?,
            "model.beta_start" => m.beta_start = parse(key, v)?,
            "model.beta_end" => m.beta_end = parse(key, v)?,
            "model.budget_min" => m.budget.min = parse(key, v)?,
            "model.budget_max" => m.budget.max = parse(key, v)?,
            "model.init_seed" => m.init_seed = parse(key, v)?,
            "model.entropy_hyper_channels" => m.entropy.hyper_channels = parse(key, v)?,
            "model.entropy_latent_channels" => m.entropy.latent_channels = parse(key, v)?,
            "model.entropy_context_channels" => m.entropy.context_channels = parse(key, v)?,
            "model.entropy_fusion_channels" => m.entropy.fusion_channels = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.lambda_ent" => t.weights.lambda_ent = parse(key, v)?,
            "train.lambda_cal" => t.weights.lambda_cal = parse(key, v)?,
            "train.lambda_stop" => t.weights.lambda_stop = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.refresh_labels" => t.refresh_labels = parse(key, v)?,
            "train.labels" => t.labels = v.to_string(),
            "policy.hidden" => m.policy.hidden = parse_list(key, v)?,
            "policy.label_count" => p.label_count = parse(key, v)?,
            "policy.label_neighbors" => p.label_neighbors = parse(key, v)?,
            "policy.beta" => p.cost.beta = parse(key, v)?,
            "policy.gamma" => p.cost.gamma = parse(key, v)?,
            "policy.threshold" => p.threshold = parse(key, v)?,
            "policy.label_seed" => p.label_seed = parse(key, v)?,
            "codec.verify" => self.codec.verify = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            c.set(k, v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        if self.model.image_size != self.data.size {
            return bad("model image size differs from data.size".into());
        }
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.model.budget.min < self.model.budget.max) {
            return bad("model.budget_min must be below model.budget_max".into());
        }
        if !(t.lr > 0.0) || !(t.clip_norm > 0.0) || !(t.eps > 0.0) {
            return bad("train.lr, train.clip_norm and train.eps must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        t.weights.validate()?;
        let p = &self.policy;
        if p.label_count == 0 || p.label_neighbors == 0 {
            return bad("policy.label_count and policy.label_neighbors must be positive".into());
        }
        if !(p.cost.beta >= 0.0) || !(p.cost.gamma >= 0.0) {
            return bad("policy.beta and policy.gamma must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = c.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn overrides_and_comments() {
        let c =
            Config::parse("# desk run\ntrain.iterations = 7  # short\nmodel.levels = 8, 16\n\n")
                .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.model.denoiser.levels, vec![8, 16]);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Config::parse("nope = 1"), Err(Error::Config(_))));
        assert!(Config::parse("train.iterations = x").is_err());
        assert!(Config::parse("train.iterations = 1\ntrain.iterations = 2").is_err());
        assert!(Config::parse("train.batch_size = 0").is_err());
        assert!(Config::parse("model.budget_min = 2.0\nmodel.budget_max = 1.0").is_err());
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("train.lambda_ent = -1").is_err());
    }
}
