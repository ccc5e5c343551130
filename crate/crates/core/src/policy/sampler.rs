//! Reverse-diffusion chains with optional early termination.

use crate::diffusion::{reconstruct_x0, reverse_step, EntropyBudget};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

/// Key of the per-seed noise stream used by every sampler.
const SAMPLE_STREAM: u64 = 0x5a4d_504c;

/// What a chain exposes at step `t`, after the denoiser pass on `x_t`.
pub struct ChainStep<'a> {
    pub t: usize,
    pub x_t: &'a Tensor,
    pub x0_hat: &'a Tensor,
    pub feature: &'a Tensor,
    pub budget_embedding: &'a Tensor,
}

/// Runs `t = T, …, 1`. At each step `visit` sees the current estimate and may
/// stop the chain; the estimate `x̂0` at the stopping step is returned with
/// `τ`. The noise for seed `s` does not depend on where the chain stops.
pub fn run_chain(
    model: &Model,
    budget: f64,
    seed: u64,
    mut visit: impl FnMut(&ChainStep) -> Result<bool>,
) -> Result<(Tensor, usize)> {
    let s = model.config.image_size;
    let shape = [1, 1, s, s];
    let mut rng = RngStream::derive(seed, SAMPLE_STREAM);
    let mut x = Tensor::new(&shape, rng.normal_vec(s * s))?;
    for t in (1..=model.schedule.steps()).rev() {
        let (eps, feature, h) = model.denoise(&x, t, budget)?;
        let x0_hat = reconstruct_x0(&x, t, &eps, &model.schedule)?;
        let stop = visit(&ChainStep {
            t,
            x_t: &x,
            x0_hat: &x0_hat,
            feature: &feature,
            budget_embedding: &h,
        })?;
        if stop || t == 1 {
            return Ok((x0_hat, t));
        }
        let z = Tensor::new(&shape, rng.normal_vec(s * s))?;
        x = reverse_step(&x, t, &eps, &z, &model.schedule)?;
        x.check_finite("reverse step")?;
    }
    unreachable!("schedule has at least one step")
}

#[derive(Clone, Debug)]
pub struct AdaptiveSample {
    /// `x̂0` at the stopping step, `[1, 1, s, s]` in [−1, 1].
    pub image: Tensor,
    pub tau: usize,
    pub steps_executed: usize,
    /// Stop probabilities seen along the way, in sampling order.
    pub probabilities: Vec<f64>,
}

/// Stops at the first step whose stop probability reaches `threshold`.
pub fn adaptive_sample(
    model: &Model,
    budget: &EntropyBudget,
    seed: u64,
    threshold: f64,
) -> Result<AdaptiveSample> {
    let mut probabilities = Vec::new();
    let (image, tau) = run_chain(model, budget.bpp, seed, |st| {
        let p = model
            .policy
            .probability(&model.params, st.feature, st.t, st.budget_embedding)?;
        probabilities.push(p);
        Ok(p >= threshold)
    })?;
    Ok(AdaptiveSample {
        image,
        tau,
        steps_executed: model.schedule.steps() - tau + 1,
        probabilities,
    })
}

/// Full `T`-step sample.
pub fn full_sample(model: &Model, budget: &EntropyBudget, seed: u64) -> Result<Tensor> {
    Ok(run_chain(model, budget.bpp, seed, |_| Ok(false))?.0)
}
