//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::ParamSet;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    /// Largest relative error per checked tensor, in first-seen order.
    pub fn per_tensor(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, _)| *n == e.name) {
                Some((_, m)) => *m = m.max(e.rel_err),
                None => out.push((e.name.clone(), e.rel_err)),
            }
        }
        out
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn merge(&mut self, other: GradReport) {
        self.entries.extend(other.entries);
    }
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is numerically zero from reporting noise as huge relative error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(y)
}

fn pick_coords(len: usize, per_tensor: usize, rng: &mut RngStream) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(per_tensor);
    while picked.len() < per_tensor {
        let i = rng.below(len as u64) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Checks gradients of the scalar built by `f` with respect to trainable
/// parameters (up to `per_tensor` coordinates each, chosen by `seed`) and to
/// `inputs` (the leaves that `f` is given).
pub fn check_gradients<F>(
    params: &mut ParamSet,
    inputs: &[Tensor],
    per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamSet, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamSet, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, params, &vars)?;
        scalar_of(&g, y)
    };

    params.zero_grads();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, params, &vars)?;
    let y0 = scalar_of(&g, y)?;
    let grads = g.backward(y, params)?;
    let floor = 1e-6 * y0.abs().max(1.0);

    let mut rng = RngStream::new(seed);
    let mut report = GradReport::default();

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let len = params.get(id).value.len();
        for idx in pick_coords(len, per_tensor, &mut rng) {
            let orig = params.get(id).value.data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + FD_STEP;
            let up = eval(params, inputs)?;
            params.get_mut(id).value.data_mut()[idx] = orig - FD_STEP;
            let down = eval(params, inputs)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let p = params.get(id);
            let analytic = p.grad.data()[idx];
            report.entries.push(GradEntry {
                name: p.name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, floor),
            });
        }
    }

    for (k, var) in vars.iter().enumerate() {
        let analytic_all = grads.get(*var).map(<[f64]>::to_vec);
        let len = inputs[k].len();
        for idx in pick_coords(len, per_tensor, &mut rng) {
            let mut shifted = inputs.to_vec();
            let orig = shifted[k].data()[idx];
            shifted[k].data_mut()[idx] = orig + FD_STEP;
            let up = eval(params, &shifted)?;
            shifted[k].data_mut()[idx] = orig - FD_STEP;
            let down = eval(params, &shifted)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = analytic_all.as_ref().map_or(0.0, |a| a[idx]);
            report.entries.push(GradEntry {
                name: format!("input{k}"),
                index: idx,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, floor),
            });
        }
    }
    params.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::Init;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
        assert!(rel_err(1e-12, -1e-12, 1e-6) < 1e-5);
    }

    #[test]
    fn dense_layer_gradients() {
        for seed in 0..20 {
            let mut ps = ParamSet::new(seed);
            let w = ps.add("w", &[3, 4], Init::Normal(1.0)).unwrap();
            let b = ps.add("b", &[3], Init::Normal(1.0)).unwrap();
            let x = Tensor::new(&[2, 4], RngStream::new(seed + 100).normal_vec(8)).unwrap();
            let report = check_gradients(&mut ps, &[x], 64, seed, |g, ps, v| {
                let (wv, bv) = (g.param(ps, w), g.param(ps, b));
                let y = g.dense(v[0], wv, Some(bv))?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(
                report.max_rel_err() < 1e-6,
                "seed {seed}: {:?}",
                report.worst()
            );
        }
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let mut ps = ParamSet::new(0);
        let x = Tensor::zeros(&[2]);
        let r = check_gradients(&mut ps, &[x], 4, 0, |_, _, v| Ok(v[0]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
