use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::Dense;
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;

/// Inclusive range of admissible budgets in bits per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetRange {
    pub min: f64,
    pub max: f64,
}

impl Default for BudgetRange {
    fn default() -> Self {
        Self { min: 0.2, max: 2.0 }
    }
}

impl BudgetRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(Error::pre(format!(
                "invalid budget range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Maps a budget to [0, 1]; a degenerate range maps everything to 0.
    pub fn normalize(&self, bpp: f64) -> f64 {
        if self.max > self.min {
            (bpp - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// Target code length in bits per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyBudget {
    pub bpp: f64,
}

impl EntropyBudget {
    pub fn new(bpp: f64, range: &BudgetRange) -> Result<Self> {
        if !(bpp >= range.min && bpp <= range.max) {
            return Err(Error::pre(format!(
                "budget {bpp} bpp outside [{}, {}]",
                range.min, range.max
            )));
        }
        Ok(Self { bpp })
    }

    pub fn milli_bpp(&self) -> u16 {
        (self.bpp * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
    }
}

/// Sinusoidal embedding with interleaved `(sin, cos)` pairs at geometric
/// frequencies `10000^(−i/(dim/2))`.
pub fn embed_timestep(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::pre(format!(
            "timestep embedding dim {dim} must be even"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Stacked embeddings `[n, dim]` for a batch of timesteps.
pub fn timestep_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(embed_timestep(t, dim)?);
    }
    Tensor::new(&[ts.len(), dim], data)
}

/// Three-layer SiLU perceptron ψ mapping a normalized budget to `R^d`.
#[derive(Clone, Debug)]
pub struct EntropyEmbedding {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
    pub dim: usize,
}

impl EntropyEmbedding {
    pub fn new(ps: &mut ParamSet, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            l1: Dense::new(ps, &format!("{prefix}.l1"), 1, dim)?,
            l2: Dense::new(ps, &format!("{prefix}.l2"), dim, dim)?,
            l3: Dense::new(ps, &format!("{prefix}.l3"), dim, dim)?,
            dim,
        })
    }

    /// `h_norm: [n, 1]` of normalized budgets → `[n, d]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, h_norm: Var) -> Result<Var> {
        let a = self.l1.forward(g, ps, h_norm)?;
        let a = g.silu(a);
        let a = self.l2.forward(g, ps, a)?;
        let a = g.silu(a);
        self.l3.forward(g, ps, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    #[test]
    fn timestep_zero_alternates() {
        let e = embed_timestep(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(embed_timestep(3, 7).is_err());
        assert_eq!(
            embed_timestep(42, 16).unwrap(),
            embed_timestep(42, 16).unwrap()
        );
    }

    #[test]
    fn distinct_timesteps_differ() {
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| embed_timestep(t, 64).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = all[i]
                    .iter()
                    .zip(&all[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d > 1e-6, "t={} and t={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn budget_bounds() {
        let r = BudgetRange::default();
        assert!(EntropyBudget::new(0.1, &r).is_err());
        assert!(EntropyBudget::new(2.1, &r).is_err());
        assert_eq!(EntropyBudget::new(1.25, &r).unwrap().milli_bpp(), 1250);
        assert_eq!(r.normalize(0.2), 0.0);
        assert!((r.normalize(2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_final_layer_gives_bias() {
        let mut ps = ParamSet::new(1);
        let emb = EntropyEmbedding::new(&mut ps, "psi", 16).unwrap();
        ps.get_mut(emb.l3.w).value.data_mut().fill(0.0);
        for (i, v) in ps.get_mut(emb.l3.b).value.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        for h in [0.0, 0.5, 1.0] {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::new(&[1, 1], vec![h]).unwrap());
            let y = emb.forward(&mut g, &ps, x).unwrap();
            assert_eq!(g.value(y).data(), ps.get(emb.l3.b).value.data());
        }
    }

    #[test]
    fn embedding_gradients() {
        for seed in 0..20 {
            let mut ps = ParamSet::new(seed);
            let emb = EntropyEmbedding::new(&mut ps, "psi", 8).unwrap();
            let h = Tensor::new(&[2, 1], vec![0.1 + 0.03 * seed as f64, 0.8]).unwrap();
            let r = check_gradients(&mut ps, &[h], 16, seed, |g, ps, v| {
                let y = emb.forward(g, ps, v[0])?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(r.max_rel_err() < 1e-5, "seed {seed}: {:?}", r.worst());
        }
    }
}
