//! Finite-difference gradient suites over every differentiable piece, grouped
//! by scope. Used by the `grad-check` command and the acceptance tests.
//!
//! Straight-through nodes are excluded: their backward pass is the identity
//! by construction and does not match the derivative of the forward value.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{Denoiser, DenoiserConfig, EntropyEmbedding};
use crate::entropy::{
    calibration_loss, calibration_targets, code_length, hinge_loss, EntropyMode, EntropyModel,
    SymbolGrid,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::gradcheck::{check_gradients, GradEntry, GradReport};
use crate::numerics::graph::{causal_mask, Graph, Var};
use crate::numerics::param::{Init, ParamSet};
use crate::numerics::rng::{mix, RngStream};
use crate::numerics::tensor::Tensor;
use crate::policy::{generate_labels, stop_loss, CostWeights, PolicyConfig, PolicyNet};
use crate::training::{calibration_for, draw_batch, total_loss, Batch, LossOptions, LossWeights};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Numerics,
    Entropy,
    Policy,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Numerics, Scope::Entropy, Scope::Policy, Scope::Full];
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numerics" => Ok(Scope::Numerics),
            "entropy" => Ok(Scope::Entropy),
            "policy" => Ok(Scope::Policy),
            "full" => Ok(Scope::Full),
            _ => Err(Error::Config(format!(
                "unknown scope {s:?} (numerics, entropy, policy, full)"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::Numerics => "numerics",
            Scope::Entropy => "entropy",
            Scope::Policy => "policy",
            Scope::Full => "full",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub scope: Scope,
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst: Option<GradEntry>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

type Case = (&'static str, fn(u64) -> Result<GradReport>);

fn cases(scope: Scope) -> Vec<Case> {
    match scope {
        Scope::Numerics => vec![
            ("add_sub_mul", add_sub_mul),
            ("scale_shift", scale_shift),
            ("reshape_concat", reshape_concat),
            ("dense", dense),
            ("conv2d", conv2d),
            ("conv2d_stride2", conv2d_stride2),
            ("masked_conv2d", masked_conv2d),
            ("upsample_add_channel", upsample_add_channel),
            ("activations", activations),
            ("clamp", clamp),
            ("softmax", softmax),
            ("group_norm", group_norm),
            ("reductions", reductions),
            ("bmm", bmm),
        ],
        Scope::Entropy => vec![
            ("code_length", code_length_case),
            ("hinge", hinge_case),
            ("calibration", calibration_case),
            ("entropy_model", entropy_model_case),
        ],
        Scope::Policy => vec![
            ("budget_embedding", embedding_case),
            ("policy_bce", policy_case),
        ],
        Scope::Full => vec![("denoiser", denoiser_case), ("total_loss", total_loss_case)],
    }
}

/// Runs every case of `scope` for seeds `0..seeds` and keeps the worst entry
/// of each case.
pub fn run_scope(scope: Scope, seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, f) in cases(scope) {
        let mut worst: Option<GradEntry> = None;
        for seed in 0..seeds {
            let report = f(seed)?;
            if let Some(w) = report.worst() {
                if worst.as_ref().is_none_or(|c| w.rel_err > c.rel_err) {
                    worst = Some(w.clone());
                }
            }
        }
        out.push(CaseResult {
            scope,
            name,
            seeds,
            max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
            worst,
        });
    }
    Ok(out)
}

fn normal(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n)).expect("shape matches")
}

/// `Σ r ⊙ y` with fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = normal(&mut RngStream::derive(seed, 0x7072), g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn add_sub_mul(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let a = normal(&mut rng, &[2, 3]);
    let b = normal(&mut rng, &[2, 3]);
    check_gradients(&mut ParamSet::new(seed), &[a, b], 6, seed, |g, _, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let m = g.mul(s, d)?;
        let m = g.mul(m, v[0])?;
        probe(g, m, seed)
    })
}

fn scale_shift(seed: u64) -> Result<GradReport> {
    let x = normal(&mut RngStream::new(seed), &[3, 2, 2]);
    check_gradients(&mut ParamSet::new(seed), &[x], 12, seed, |g, _, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.scale_per_sample(y, &[0.5, -2.0, 3.0])?;
        let y = g.mul(y, y)?;
        probe(g, y, seed)
    })
}

fn reshape_concat(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let a = normal(&mut rng, &[2, 1, 2, 2]);
    let b = normal(&mut rng, &[2, 3, 2, 2]);
    check_gradients(&mut ParamSet::new(seed), &[a, b], 24, seed, |g, _, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let c = g.reshape(c, &[2, 16])?;
        let c = g.tanh(c);
        probe(g, c, seed)
    })
}

fn dense(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let w = ps.add("w", &[3, 4], Init::Normal(0.7))?;
    let b = ps.add("b", &[3], Init::Normal(0.7))?;
    let x = normal(&mut RngStream::new(seed), &[2, 4]);
    check_gradients(&mut ps, &[x], 12, seed, |g, ps, v| {
        let (wv, bv) = (g.param(ps, w), g.param(ps, b));
        let y = g.dense(v[0], wv, Some(bv))?;
        probe(g, y, seed)
    })
}

fn conv_case(seed: u64, stride: usize) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let k = ps.add("k", &[3, 2, 3, 3], Init::Normal(0.4))?;
    let b = ps.add("b", &[3], Init::Normal(0.4))?;
    let x = normal(&mut RngStream::new(seed), &[2, 2, 4, 4]);
    check_gradients(&mut ps, &[x], 10, seed, |g, ps, v| {
        let (kv, bv) = (g.param(ps, k), g.param(ps, b));
        let y = g.conv2d(v[0], kv, Some(bv), stride, 1)?;
        probe(g, y, seed)
    })
}

fn conv2d(seed: u64) -> Result<GradReport> {
    conv_case(seed, 1)
}

fn conv2d_stride2(seed: u64) -> Result<GradReport> {
    conv_case(seed, 2)
}

fn masked_conv2d(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let k = ps.add("k", &[2, 1, 5, 5], Init::Normal(0.4))?;
    let b = ps.add("b", &[2], Init::Normal(0.4))?;
    let x = normal(&mut RngStream::new(seed), &[1, 1, 4, 4]);
    let mask = causal_mask(5);
    check_gradients(&mut ps, &[x], 12, seed, |g, ps, v| {
        let (kv, bv) = (g.param(ps, k), g.param(ps, b));
        let y = g.masked_conv2d(v[0], kv, Some(bv), &mask)?;
        probe(g, y, seed)
    })
}

fn upsample_add_channel(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let x = normal(&mut rng, &[2, 2, 2, 2]);
    let c = normal(&mut rng, &[2, 2]);
    check_gradients(&mut ParamSet::new(seed), &[x, c], 8, seed, |g, _, v| {
        let y = g.upsample(v[0], 2)?;
        let y = g.add_channel(y, v[1])?;
        let y = g.mul(y, y)?;
        probe(g, y, seed)
    })
}

fn activations(seed: u64) -> Result<GradReport> {
    let x = normal(&mut RngStream::new(seed), &[2, 5]).map(|v| 2.0 * v);
    check_gradients(&mut ParamSet::new(seed), &[x], 10, seed, |g, _, v| {
        let a = g.silu(v[0]);
        let b = g.sigmoid(a);
        let c = g.softplus(b);
        let d = g.tanh(v[0]);
        let e = g.mul(c, d)?;
        let s = g.softplus(v[0]);
        let e = g.add(e, s)?;
        probe(g, e, seed)
    })
}

fn clamp(seed: u64) -> Result<GradReport> {
    // Keep inputs away from the two kinks.
    let x = normal(&mut RngStream::new(seed), &[12]).map(|v| {
        let v = 1.5 * v;
        if (v.abs() - 1.0).abs() < 1e-3 {
            v + 0.01
        } else {
            v
        }
    });
    check_gradients(&mut ParamSet::new(seed), &[x], 12, seed, |g, _, v| {
        let y = g.clamp(v[0], -1.0, 1.0);
        let y = g.mul(y, v[0])?;
        probe(g, y, seed)
    })
}

fn softmax(seed: u64) -> Result<GradReport> {
    let x = normal(&mut RngStream::new(seed), &[3, 4]);
    check_gradients(&mut ParamSet::new(seed), &[x], 12, seed, |g, _, v| {
        let y = g.softmax(v[0]);
        probe(g, y, seed)
    })
}

fn group_norm(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let gamma = ps.add("gamma", &[4], Init::Normal(1.0))?;
    let beta = ps.add("beta", &[4], Init::Normal(1.0))?;
    let x = normal(&mut RngStream::new(seed), &[2, 4, 3, 3]);
    check_gradients(&mut ps, &[x], 12, seed, |g, ps, v| {
        let (ga, be) = (g.param(ps, gamma), g.param(ps, beta));
        let y = g.group_norm(v[0], ga, be, 2)?;
        probe(g, y, seed)
    })
}

fn reductions(seed: u64) -> Result<GradReport> {
    let x = normal(&mut RngStream::new(seed), &[2, 3, 2, 2]);
    check_gradients(&mut ParamSet::new(seed), &[x], 12, seed, |g, _, v| {
        let sq = g.mul(v[0], v[0])?;
        let pooled = g.mean_pool_spatial(sq)?;
        let per = g.mean_per_sample(v[0]);
        let a = probe(g, pooled, seed)?;
        let b = probe(g, per, seed + 1)?;
        let m = g.mean(sq);
        let s = g.sum(v[0]);
        let t = g.add(a, b)?;
        let t = g.add(t, m)?;
        g.add(t, s)
    })
}

fn bmm(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let a = normal(&mut rng, &[2, 3, 4]);
    let b = normal(&mut rng, &[2, 4, 3]);
    check_gradients(&mut ParamSet::new(seed), &[a, b], 8, seed, |g, _, v| {
        let p = g.bmm(v[0], v[1], false, false)?;
        let q = g.bmm(v[0], v[1], true, true)?;
        let r = g.bmm(v[0], v[0], false, true)?;
        let s = g.bmm(v[1], v[1], true, false)?;
        let mut acc = probe(g, p, seed)?;
        for (i, y) in [q, r, s].into_iter().enumerate() {
            let t = probe(g, y, seed + 1 + i as u64)?;
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    })
}

fn code_length_case(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let n = 2 * 9;
    let x: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.97, 0.97)).collect();
    let mu: Vec<f64> = (0..n).map(|_| rng.uniform_range(-20.0, 20.0)).collect();
    let sg: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.3, 6.0)).collect();
    let shape = [2, 1, 3, 3];
    let inputs = [
        Tensor::new(&shape, x)?,
        Tensor::new(&shape, mu)?,
        Tensor::new(&shape, sg)?,
    ];
    check_gradients(&mut ParamSet::new(0), &inputs, 18, seed, |g, _, v| {
        let h = code_length(g, v[0], v[1], v[2], EntropyMode::Smooth)?;
        probe(g, h, seed)
    })
}

fn hinge_case(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let mut h = Vec::new();
    let mut targets = Vec::new();
    while h.len() < 8 {
        let (a, b) = (rng.uniform_range(0.0, 4.0), rng.uniform_range(0.2, 2.0));
        if (a - b).abs() > 1e-3 {
            h.push(a);
            targets.push(b);
        }
    }
    let h = Tensor::from_vec(h);
    check_gradients(&mut ParamSet::new(0), &[h], 8, seed, |g, _, v| {
        let sq = g.mul(v[0], v[0])?;
        let l = hinge_loss(g, sq, &targets.iter().map(|t| t * t).collect::<Vec<_>>())?;
        probe(g, l, seed)
    })
}

fn calibration_case(seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let grid = SymbolGrid::new(3, 3, (0..9).map(|_| rng.below(64) as u8).collect())?;
    let targets = vec![calibration_targets(&grid)];
    let mu = Tensor::new(
        &[1, 1, 3, 3],
        (0..9).map(|_| rng.uniform_range(-20.0, 20.0)).collect(),
    )?;
    let sg = Tensor::new(
        &[1, 1, 3, 3],
        (0..9).map(|_| rng.uniform_range(0.2, 8.0)).collect(),
    )?;
    check_gradients(&mut ParamSet::new(0), &[mu, sg], 9, seed, |g, _, v| {
        let l = calibration_loss(g, &targets, v[0], v[1])?;
        Ok(g.sum(l))
    })
}

fn tiny_entropy() -> crate::entropy::EntropyConfig {
    crate::entropy::EntropyConfig {
        hyper_channels: 3,
        latent_channels: 1,
        context_channels: 3,
        fusion_channels: 4,
    }
}

fn entropy_model_case(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let m = EntropyModel::new(tiny_entropy(), &mut ps, "entropy")?;
    let x = normal(&mut RngStream::new(seed + 20), &[2, 1, 8, 8]).map(|v| 0.9 * v.tanh());
    check_gradients(&mut ps, &[x], 2, seed, |g, ps, v| {
        let out = m.forward(g, ps, v[0], EntropyMode::Smooth)?;
        probe(g, out.bpp, seed)
    })
}

fn embedding_case(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let emb = EntropyEmbedding::new(&mut ps, "psi", 8)?;
    let h = Tensor::new(&[2, 1], vec![0.1 + 0.03 * seed as f64, 0.8])?;
    check_gradients(&mut ps, &[h], 8, seed, |g, ps, v| {
        let y = emb.forward(g, ps, v[0])?;
        probe(g, y, seed)
    })
}

fn policy_case(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let cfg = PolicyConfig { hidden: vec![6, 5] };
    let pn = PolicyNet::new(&cfg, &mut ps, "policy", 4, 8, 3)?;
    let mut rng = RngStream::new(seed + 100);
    let f = normal(&mut rng, &[3, 4]);
    let b = normal(&mut rng, &[3, 3]);
    let y = [0.0, 1.0, 0.25];
    check_gradients(&mut ps, &[f, b], 4, seed, |g, ps, v| {
        let p = pn.forward(g, ps, v[0], &[3, 70, 140], v[1])?;
        stop_loss(g, &y, p)
    })
}

fn tiny_denoiser(attention: bool) -> DenoiserConfig {
    DenoiserConfig {
        levels: vec![4, 8],
        blocks_per_level: 1,
        time_embed_dim: 8,
        entropy_embed_dim: 6,
        groups: 2,
        attention: vec![false, attention],
        conditioning: true,
    }
}

fn denoiser_case(seed: u64) -> Result<GradReport> {
    let mut ps = ParamSet::new(seed);
    let d = Denoiser::new(tiny_denoiser(seed % 2 == 1), &mut ps, "denoiser")?;
    let x = normal(&mut RngStream::new(seed + 10), &[2, 1, 8, 8]);
    check_gradients(&mut ps, &[x], 2, seed, |g, ps, v| {
        let h = d.embed_budget(g, ps, &[0.2, 0.7])?;
        let out = d.forward(g, ps, v[0], &[4, 150], h)?;
        let a = probe(g, out.eps, seed)?;
        let b = probe(g, out.feature, seed + 1)?;
        g.add(a, b)
    })
}

/// The weighted objective on a 2-image 8×8 batch with smooth code lengths
/// and frozen calibration targets.
fn total_loss_case(seed: u64) -> Result<GradReport> {
    let config = crate::model::ModelConfig {
        image_size: 8,
        denoiser: tiny_denoiser(false),
        entropy: tiny_entropy(),
        policy: PolicyConfig { hidden: vec![8, 4] },
        steps: 10,
        init_seed: seed,
        ..Default::default()
    };
    let model = Model::new(config)?;
    let labels = generate_labels(&model, 3, mix(seed, 1), CostWeights::default())?;
    let mut rng = RngStream::new(mix(seed, 2));
    let data: Vec<Tensor> = (0..4)
        .map(|_| normal(&mut rng, &[1, 8, 8]).map(|v| 0.5 * v.tanh()))
        .collect();
    let batch = draw_batch(&data, 2, 10, &model.config.budget, seed, 0)?;
    // Early timesteps keep x̂0 clear of the clamp kinks at ±1, and budgets
    // far below any untrained code length keep the hinge active.
    let batch = Batch {
        ts: vec![1, 2],
        budgets: vec![0.2, 0.3],
        ..batch
    };
    let weights = LossWeights {
        lambda_ent: 0.3,
        lambda_cal: 0.2,
        lambda_stop: 0.5,
    };
    let targets = {
        let mut g = Graph::inference();
        let opts = LossOptions {
            weights,
            mode: EntropyMode::Smooth,
            labels: Some(&labels),
            label_neighbors: 2,
            calibration: None,
        };
        let l = total_loss(&mut g, &model, &model.params, &batch, &opts)?;
        calibration_for(g.value(l.x0_hat))?
    };
    let mut ps = model.params.clone();
    check_gradients(&mut ps, &[], 2, seed, |g, ps, _| {
        let opts = LossOptions {
            weights,
            mode: EntropyMode::Smooth,
            labels: Some(&labels),
            label_neighbors: 2,
            calibration: Some(&targets),
        };
        Ok(total_loss(g, &model, ps, &batch, &opts)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn numerics_scope_passes_on_two_seeds() {
        for r in run_scope(Scope::Numerics, 2).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.worst);
        }
    }
}
