//! Differentiable per-image code length in bits per pixel.

use std::f64::consts::LN_2;

use crate::entropy::bins::{bin_of, to_bin_units, K};
use crate::entropy::logistic::{log_pmf_unchecked, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::graph::{CustomOp, Graph, Var};
use crate::numerics::tensor::Tensor;

/// Temperature of the soft bin membership, in squared bin units.
pub const SOFT_BIN_TEMPERATURE: f64 = 0.05;
const WINDOW: usize = 2;

/// How discretization enters the value of the code length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyMode {
    /// Value from the hard bin of each pixel; gradient to pixel values from
    /// the softened bin membership. Network inputs are bin centres with a
    /// straight-through gradient.
    Hard,
    /// Everything continuous: value is the membership-weighted code length,
    /// so the whole objective is smooth and finite differences apply.
    Smooth,
}

struct PixelTerms {
    start: usize,
    len: usize,
    hard: usize,
    weights: [f64; 2 * WINDOW + 1],
    bits: [f64; 2 * WINDOW + 1],
    d_mu: [f64; 2 * WINDOW + 1],
    d_sigma: [f64; 2 * WINDOW + 1],
    u: f64,
}

struct CodeLengthOp {
    mode: EntropyMode,
    pixels: Vec<PixelTerms>,
    per_image: usize,
}

fn pixel_terms(x: f64, mu: f64, sigma: f64) -> PixelTerms {
    let u = to_bin_units(x);
    let hard = bin_of(x.clamp(-1.0, 1.0));
    let start = hard.saturating_sub(WINDOW);
    let end = (hard + WINDOW).min(K - 1);
    let len = end - start + 1;
    let mut t = PixelTerms {
        start,
        len,
        hard,
        weights: [0.0; 2 * WINDOW + 1],
        bits: [0.0; 2 * WINDOW + 1],
        d_mu: [0.0; 2 * WINDOW + 1],
        d_sigma: [0.0; 2 * WINDOW + 1],
        u,
    };
    let mut max_logit = f64::NEG_INFINITY;
    let mut logits = [0.0; 2 * WINDOW + 1];
    for j in 0..len {
        let c = (start + j) as f64 - (K / 2) as f64;
        logits[j] = -(u - c).powi(2) / SOFT_BIN_TEMPERATURE;
        max_logit = max_logit.max(logits[j]);
        let lp = log_pmf_unchecked(start + j, mu, sigma);
        t.bits[j] = -lp.logp / LN_2;
        t.d_mu[j] = -lp.d_mu / LN_2;
        t.d_sigma[j] = -lp.d_sigma / LN_2;
    }
    let mut z = 0.0;
    for j in 0..len {
        t.weights[j] = (logits[j] - max_logit).exp();
        z += t.weights[j];
    }
    for w in &mut t.weights[..len] {
        *w /= z;
    }
    t
}

impl PixelTerms {
    fn value(&self, mode: EntropyMode) -> f64 {
        match mode {
            EntropyMode::Hard => self.bits[self.hard - self.start],
            EntropyMode::Smooth => (0..self.len).map(|j| self.weights[j] * self.bits[j]).sum(),
        }
    }

    fn grads(&self, mode: EntropyMode) -> (f64, f64, f64) {
        let (dmu, dsig) = match mode {
            EntropyMode::Hard => {
                let j = self.hard - self.start;
                (self.d_mu[j], self.d_sigma[j])
            }
            EntropyMode::Smooth => (0..self.len).fold((0.0, 0.0), |(a, b), j| {
                (
                    a + self.weights[j] * self.d_mu[j],
                    b + self.weights[j] * self.d_sigma[j],
                )
            }),
        };
        // d/du of Σ w_j ℓ_j with w = softmax(−(u − c_j)²/τ).
        let dlogit = |j: usize| {
            let c = (self.start + j) as f64 - (K / 2) as f64;
            -2.0 * (self.u - c) / SOFT_BIN_TEMPERATURE
        };
        let mean_dlogit: f64 = (0..self.len).map(|j| self.weights[j] * dlogit(j)).sum();
        let du: f64 = (0..self.len)
            .map(|j| self.bits[j] * self.weights[j] * (dlogit(j) - mean_dlogit))
            .sum();
        (dmu, dsig, du * (K as f64 / 2.0))
    }
}

impl CustomOp for CodeLengthOp {
    fn name(&self) -> &'static str {
        "code_length"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = self.pixels.len();
        let mut dx = vec![0.0; n];
        let mut dmu = vec![0.0; n];
        let mut dsig = vec![0.0; n];
        for (i, p) in self.pixels.iter().enumerate() {
            let scale = upstream[i / self.per_image] / self.per_image as f64;
            if scale == 0.0 {
                continue;
            }
            let (a, b, c) = p.grads(self.mode);
            dmu[i] = scale * a;
            dsig[i] = scale * b;
            dx[i] = scale * c;
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dmu),
            needs[2].then_some(dsig),
        ]
    }
}

/// Mean code length in bits per pixel of each image in `x: [n, 1, h, w]`
/// under per-pixel logistic parameters of the same shape. Returns `[n]`.
pub fn code_length(g: &mut Graph, x: Var, mu: Var, sigma: Var, mode: EntropyMode) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if g.shape(mu) != s.as_slice() || g.shape(sigma) != s.as_slice() || s.is_empty() {
        return Err(Error::shape("code_length: x, mu, sigma must share a shape"));
    }
    let n = s[0];
    let per_image = g.value(x).len() / n.max(1);
    let (xv, mv, sv) = (g.value(x).data(), g.value(mu).data(), g.value(sigma).data());
    if let Some(bad) = sv.iter().find(|&&v| !(v >= SIGMA_FLOOR)) {
        return Err(Error::pre(format!("sigma {bad} below floor")));
    }
    let pixels: Vec<PixelTerms> = (0..xv.len())
        .map(|i| pixel_terms(xv[i], mv[i], sv[i]))
        .collect();
    let out: Vec<f64> = pixels
        .chunks(per_image)
        .map(|c| c.iter().map(|p| p.value(mode)).sum::<f64>() / per_image as f64)
        .collect();
    let op = CodeLengthOp {
        mode,
        pixels,
        per_image,
    };
    g.custom(&[x, mu, sigma], Tensor::from_vec(out), Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::param::ParamSet;
    use crate::numerics::rng::RngStream;

    #[test]
    fn hard_value_is_exact_code_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.5]).unwrap());
        let mu = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 3.0]).unwrap());
        let sg = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let h = code_length(&mut g, x, mu, sg, EntropyMode::Hard).unwrap();
        let b0 = -crate::entropy::logistic::logistic_pmf(32, 0.0, 1.0)
            .unwrap()
            .log2();
        let b1 = -crate::entropy::logistic::logistic_pmf(48, 3.0, 2.0)
            .unwrap()
            .log2();
        assert!((g.value(h).item() - (b0 + b1) / 2.0).abs() < 1e-13);
    }

    #[test]
    fn smooth_mode_gradients() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed);
            let n = 2 * 9;
            let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.97, 0.97)).collect();
            let mu: Vec<f64> = (0..n).map(|_| rng.uniform_range(-20.0, 20.0)).collect();
            let sg: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.3, 6.0)).collect();
            let shape = [2, 1, 3, 3];
            let inputs = [
                Tensor::new(&shape, x).unwrap(),
                Tensor::new(&shape, mu).unwrap(),
                Tensor::new(&shape, sg).unwrap(),
            ];
            let mut ps = ParamSet::new(0);
            let r = check_gradients(&mut ps, &inputs, 18, seed, |g, _, v| {
                let h = code_length(g, v[0], v[1], v[2], EntropyMode::Smooth)?;
                let w = g.constant(Tensor::from_vec(vec![0.7, 1.3]));
                let h = g.mul(h, w)?;
                Ok(g.sum(h))
            })
            .unwrap();
            assert!(r.max_rel_err() < 1e-4, "seed {seed}: {:?}", r.worst());
        }
    }

    #[test]
    fn hard_mode_mu_sigma_gradients_are_exact() {
        let mut rng = RngStream::new(3);
        let shape = [1, 1, 2, 2];
        let x = Tensor::new(
            &shape,
            (0..4).map(|_| rng.uniform_range(-0.9, 0.9)).collect(),
        )
        .unwrap();
        let mu = Tensor::new(
            &shape,
            (0..4).map(|_| rng.uniform_range(-9.0, 9.0)).collect(),
        )
        .unwrap();
        let sg = Tensor::new(
            &shape,
            (0..4).map(|_| rng.uniform_range(0.5, 4.0)).collect(),
        )
        .unwrap();
        let mut ps = ParamSet::new(0);
        let r = check_gradients(&mut ps, &[mu, sg], 4, 0, |g, _, v| {
            let xv = g.constant(x.clone());
            let h = code_length(g, xv, v[0], v[1], EntropyMode::Hard)?;
            Ok(g.sum(h))
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-6, "{:?}", r.worst());
    }
}
