use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Per-step noise coefficients, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// The 1000-step DDPM linear schedule (β from 1e-4 to 0.02) compressed to
/// 200 steps by scaling β by 1000/200, so x_T is still close to pure noise.
impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(200, 5e-4, 0.1).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::pre("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::pre(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::pre("betas must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::pre(format!("t = {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Standard deviation of the reverse-step noise, `√β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same(x0, eps, "forward_diffuse")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(mix(x0, eps, ab.sqrt(), (1.0 - ab).sqrt()))
}

/// Per-sample version of [`forward_diffuse`] with `ts[n]` for sample `n`.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same(x0, eps, "forward_diffuse")?;
    if ts.len() != x0.dim(0) {
        return Err(Error::shape(format!(
            "{} timesteps for batch {}",
            ts.len(),
            x0.dim(0)
        )));
    }
    let per = x0.len() / ts.len().max(1);
    let mut data = Vec::with_capacity(x0.len());
    for (n, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in n * per..(n + 1) * per {
            data.push(a * x0.data()[i] + b * eps.data()[i]);
        }
    }
    Tensor::new(x0.shape(), data)
}

fn mix(x: &Tensor, y: &Tensor, a: f64, b: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(u, v)| a * u + b * v)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// `x̂0 = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`, clamped to [−1, 1].
pub fn reconstruct_x0(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(reconstruct_x0_unclamped(x_t, t, eps_hat, sched)?.map(|v| v.clamp(-1.0, 1.0)))
}

pub fn reconstruct_x0_unclamped(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same(x_t, eps_hat, "reconstruct_x0")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::pre("alpha_bar is zero"));
    }
    let r = 1.0 / ab.sqrt();
    Ok(mix(x_t, eps_hat, r, -(1.0 - ab).sqrt() * r))
}

/// One ancestral step: `x_{t−1} = (x_t − (β_t/√(1 − ᾱ_t)) ε̂)/√α_t + σ_t z 1{t > 1}`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same(x_t, eps_hat, "reverse_step")?;
    check_same(x_t, z, "reverse_step noise")?;
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let sigma = if t > 1 { sched.sigma(t) } else { 0.0 };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((x, e), zz)| inv * (x - coef * e) + sigma * zz)
        .collect();
    Tensor::new(x_t.shape(), data)
}
