//! Stop-probability network and its loss.

use crate::diffusion::embed::timestep_batch;
use crate::error::{Error, Result};
use crate::numerics::graph::{CustomOp, Graph, Var};
use crate::numerics::layers::Dense;
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tensor::Tensor;

/// Probabilities are clipped to `[P_CLIP, 1 − P_CLIP]` inside the loss.
pub const P_CLIP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
        }
    }
}

/// Per-channel spatial mean of `x: [n, c, h, w]`, returned as `[n, c]`.
pub fn pooled_feature(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "pooled_feature expects rank 4, got {s:?}"
        )));
    }
    let hw = s[2] * s[3];
    let data = x
        .data()
        .chunks(hw.max(1))
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[s[0], s[1]], data)
}

/// MLP `[feature ‖ t-embedding ‖ budget embedding] → hidden… → 1 → sigmoid`.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    layers: Vec<Dense>,
    time_dim: usize,
    input_dim: usize,
}

impl PolicyNet {
    pub fn new(
        config: &PolicyConfig,
        ps: &mut ParamSet,
        prefix: &str,
        feature_dim: usize,
        time_dim: usize,
        budget_dim: usize,
    ) -> Result<Self> {
        let input_dim = feature_dim + time_dim + budget_dim;
        let mut widths = vec![input_dim];
        widths.extend(&config.hidden);
        widths.push(1);
        if widths.contains(&0) {
            return Err(Error::pre("policy widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(ps, &format!("{prefix}.l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            time_dim,
            input_dim,
        })
    }

    pub fn head(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Stop probabilities `[n]` from `feature: [n, c]` and `budget: [n, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        feature: Var,
        ts: &[usize],
        budget: Var,
    ) -> Result<Var> {
        let n = g.shape(feature)[0];
        if ts.len() != n {
            return Err(Error::shape(format!(
                "{} timesteps for batch {n}",
                ts.len()
            )));
        }
        let temb = g.constant(timestep_batch(ts, self.time_dim)?);
        let mut a = g.concat(&[feature, temb, budget])?;
        if g.shape(a)[1] != self.input_dim {
            return Err(Error::shape(format!(
                "policy input width {} != {}",
                g.shape(a)[1],
                self.input_dim
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            a = l.forward(g, ps, a)?;
            if i + 1 < self.layers.len() {
                a = g.silu(a);
            }
        }
        let a = g.reshape(a, &[n])?;
        Ok(g.sigmoid(a))
    }

    pub fn probability(
        &self,
        ps: &ParamSet,
        feature: &Tensor,
        t: usize,
        budget: &Tensor,
    ) -> Result<f64> {
        let mut g = Graph::inference();
        let f = g.constant(feature.clone());
        let b = g.constant(budget.clone());
        let p = self.forward(&mut g, ps, f, &[t], b)?;
        let p = g.value(p).item();
        if !p.is_finite() {
            return Err(Error::NonFinite("stop probability".into()));
        }
        Ok(p)
    }
}

struct BceOp {
    grad: Vec<f64>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        upstream: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|d| d * upstream[0]).collect())]
    }
}

/// Mean binary cross-entropy in nats between targets `y ∈ [0, 1]` and
/// probabilities `p: [n]`. Scalar output.
pub fn stop_loss(g: &mut Graph, y: &[f64], p: Var) -> Result<Var> {
    let pv = g.value(p).data();
    if pv.len() != y.len() || y.is_empty() {
        return Err(Error::shape(format!(
            "{} probabilities for {} labels",
            pv.len(),
            y.len()
        )));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::pre("stop labels must lie in [0, 1]"));
    }
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&pi, &yi) in pv.iter().zip(y) {
        let pc = pi.clamp(P_CLIP, 1.0 - P_CLIP);
        loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        let inside = pi > P_CLIP && pi < 1.0 - P_CLIP;
        grad.push(if inside {
            (pc - yi) / (pc * (1.0 - pc)) / n
        } else {
            0.0
        });
    }
    g.custom(&[p], Tensor::scalar(loss / n), Box::new(BceOp { grad }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::rng::RngStream;

    fn net(ps: &mut ParamSet) -> PolicyNet {
        PolicyNet::new(&PolicyConfig { hidden: vec![6, 5] }, ps, "policy", 4, 8, 3).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let c = Tensor::full(&[1, 2, 4, 4], 0.75);
        assert_eq!(pooled_feature(&c).unwrap().data(), &[0.75, 0.75]);
        let checker: Vec<f64> = (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let p = pooled_feature(&Tensor::new(&[1, 1, 4, 4], checker).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.0]);
        let mut rng = RngStream::new(1);
        let a = Tensor::new(&[2, 3, 2, 2], rng.normal_vec(24)).unwrap();
        let b = Tensor::new(&[2, 3, 2, 2], rng.normal_vec(24)).unwrap();
        let sum = Tensor::new(
            &[2, 3, 2, 2],
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let (pa, pb, ps) = (
            pooled_feature(&a).unwrap(),
            pooled_feature(&b).unwrap(),
            pooled_feature(&sum).unwrap(),
        );
        for i in 0..6 {
            assert!((ps.data()[i] - pa.data()[i] - pb.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_head_is_one_half() {
        let mut ps = ParamSet::new(2);
        let pn = net(&mut ps);
        let head = pn.head().clone();
        ps.get_mut(head.w).value.data_mut().fill(0.0);
        ps.get_mut(head.b).value.data_mut().fill(0.0);
        let mut rng = RngStream::new(3);
        for t in [1, 50, 200] {
            let f = Tensor::new(&[1, 4], rng.normal_vec(4)).unwrap();
            let b = Tensor::new(&[1, 3], rng.normal_vec(3)).unwrap();
            assert_eq!(pn.probability(&ps, &f, t, &b).unwrap(), 0.5);
        }
    }

    #[test]
    fn policy_gradients() {
        for seed in 0..20 {
            let mut ps = ParamSet::new(seed);
            let pn = net(&mut ps);
            let mut rng = RngStream::new(seed + 100);
            let f = Tensor::new(&[3, 4], rng.normal_vec(12)).unwrap();
            let b = Tensor::new(&[3, 3], rng.normal_vec(3 * 3)).unwrap();
            let y = [0.0, 1.0, 0.25];
            let r = check_gradients(&mut ps, &[f, b], 4, seed, |g, ps, v| {
                let p = pn.forward(g, ps, v[0], &[3, 70, 140], v[1])?;
                stop_loss(g, &y, p)
            })
            .unwrap();
            assert!(r.max_rel_err() < 1e-5, "seed {seed}: {:?}", r.worst());
        }
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec(vec![0.5; 4]));
        let l = stop_loss(&mut g, &[0.0, 1.0, 1.0, 0.0], p).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = g.input(Tensor::from_vec(vec![0.0, 1.0, 1.0]));
        let l = stop_loss(&mut g, &[0.0, 1.0, 1.0], p).unwrap();
        assert!(g.value(l).item() < 1e-6);
        assert!(stop_loss(&mut g, &[0.0, 1.0], p).is_err());
    }
}
