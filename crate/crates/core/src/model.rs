//! The trainable system: denoiser, entropy model and stop policy sharing one
//! parameter set, plus the fixed noise schedule.

use crate::diffusion::{BudgetRange, Denoiser, DenoiserConfig, EntropyBudget, NoiseSchedule};
use crate::entropy::{EntropyConfig, EntropyModel};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::policy::{PolicyConfig, PolicyNet};

pub const DENOISER_PREFIX: &str = "denoiser";
pub const ENTROPY_PREFIX: &str = "entropy";
pub const POLICY_PREFIX: &str = "policy";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub denoiser: DenoiserConfig,
    pub entropy: EntropyConfig,
    pub policy: PolicyConfig,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub budget: BudgetRange,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            denoiser: DenoiserConfig::default(),
            entropy: EntropyConfig::default(),
            policy: PolicyConfig::default(),
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            budget: BudgetRange::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.entropy.validate()?;
        self.budget.validate()?;
        let m = self
            .denoiser
            .size_multiple()
            .max(crate::entropy::model::HYPER_FACTOR);
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return Err(Error::pre(format!(
                "image size {} must be a positive multiple of {m}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub denoiser: Denoiser,
    pub entropy: EntropyModel,
    pub policy: PolicyNet,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(config.init_seed);
        let denoiser = Denoiser::new(config.denoiser.clone(), &mut params, DENOISER_PREFIX)?;
        let entropy = EntropyModel::new(config.entropy.clone(), &mut params, ENTROPY_PREFIX)?;
        let policy = PolicyNet::new(
            &config.policy,
            &mut params,
            POLICY_PREFIX,
            denoiser.feature_dim(),
            config.denoiser.time_embed_dim,
            config.denoiser.entropy_embed_dim,
        )?;
        let schedule = config.schedule()?;
        Ok(Self {
            config,
            params,
            denoiser,
            entropy,
            policy,
            schedule,
        })
    }

    pub fn budget(&self, bpp: f64) -> Result<EntropyBudget> {
        EntropyBudget::new(bpp, &self.config.budget)
    }

    /// Budget embedding `[n, d]` for the policy; zeros for an unconditional
    /// denoiser, which has no embedding of its own.
    pub fn budget_features(&self, g: &mut Graph, ps: &ParamSet, budgets: &[f64]) -> Result<Var> {
        let norm: Vec<f64> = budgets
            .iter()
            .map(|&b| self.config.budget.normalize(b))
            .collect();
        match self.denoiser.embed_budget(g, ps, &norm)? {
            Some(h) => Ok(h),
            None => Ok(g.constant(Tensor::zeros(&[
                budgets.len(),
                self.config.denoiser.entropy_embed_dim,
            ]))),
        }
    }

    /// One inference pass: `(ε̂, pooled feature, budget embedding)` for a
    /// single image `x_t: [1, 1, s, s]`.
    pub fn denoise(&self, x_t: &Tensor, t: usize, budget: f64) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let h = self.budget_features(&mut g, &self.params, &[budget])?;
        let hh = if self.config.denoiser.conditioning {
            Some(h)
        } else {
            None
        };
        let out = self.denoiser.forward(&mut g, &self.params, x, &[t], hh)?;
        let eps = g.value(out.eps).clone();
        eps.check_finite("denoiser output")?;
        Ok((eps, g.value(out.feature).clone(), g.value(h).clone()))
    }
}

/// Smallest sensible system, for tests across the crate.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        denoiser: DenoiserConfig {
            levels: vec![4, 8],
            blocks_per_level: 1,
            time_embed_dim: 8,
            entropy_embed_dim: 6,
            groups: 2,
            attention: vec![false, false],
            conditioning: true,
        },
        entropy: EntropyConfig {
            hyper_channels: 3,
            latent_channels: 1,
            context_channels: 3,
            fusion_channels: 4,
        },
        policy: PolicyConfig { hidden: vec![8, 4] },
        steps: 10,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_and_denoises() {
        let m = Model::new(tiny_config()).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let (eps, f, h) = m.denoise(&x, 5, 1.0).unwrap();
        assert_eq!(eps.shape(), &[1, 1, 8, 8]);
        assert_eq!(f.shape(), &[1, 8]);
        assert_eq!(h.shape(), &[1, 6]);
        assert!(m
            .params
            .iter()
            .all(|(_, p)| [DENOISER_PREFIX, ENTROPY_PREFIX, POLICY_PREFIX]
                .iter()
                .any(|pre| p.name.starts_with(pre))));
    }

    #[test]
    fn rejects_bad_size() {
        let mut c = tiny_config();
        c.image_size = 6;
        assert!(Model::new(c).is_err());
    }
}
