//! Budget hinge and calibration against an analytic predictive-coding oracle.

use std::f64::consts::LN_2;

use crate::entropy::bins::{SymbolGrid, K};
use crate::entropy::logistic::{log_pmf_row, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::graph::{CustomOp, Graph, Var};
use crate::numerics::tensor::Tensor;

/// `max(0, H − H_target)`; the derivative is 1 strictly above target and 0
/// otherwise.
pub fn hinge(h_pred: f64, h_target: f64) -> f64 {
    (h_pred - h_target).max(0.0)
}

struct HingeOp {
    active: Vec<bool>,
}

impl CustomOp for HingeOp {
    fn name(&self) -> &'static str {
        "hinge"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        upstream: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = upstream
            .iter()
            .zip(&self.active)
            .map(|(u, &a)| if a { *u } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

/// Element-wise hinge of predicted code lengths `h_pred: [n]` against targets.
pub fn hinge_loss(g: &mut Graph, h_pred: Var, targets: &[f64]) -> Result<Var> {
    let hv = g.value(h_pred).data();
    if hv.len() != targets.len() {
        return Err(Error::shape(format!(
            "hinge: {} predictions for {} targets",
            hv.len(),
            targets.len()
        )));
    }
    let active: Vec<bool> = hv.iter().zip(targets).map(|(h, t)| h > t).collect();
    let out = hv.iter().zip(targets).map(|(h, t)| hinge(*h, *t)).collect();
    g.custom(
        &[h_pred],
        Tensor::from_vec(out),
        Box::new(HingeOp { active }),
    )
}

/// Smallest Laplacian scale of the oracle, in bin units.
pub const ORACLE_MIN_SCALE: f64 = 0.05;

/// Per-pixel target distributions over the `K` bins, raster order.
#[derive(Clone, Debug)]
pub struct CalibrationTargets {
    pub width: usize,
    pub height: usize,
    pub q: Vec<[f64; K]>,
}

impl CalibrationTargets {
    /// Mean Shannon entropy of the targets in bits.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .q
            .iter()
            .map(|q| {
                q.iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.log2())
                    .sum::<f64>()
            })
            .sum();
        total / self.q.len().max(1) as f64
    }
}

fn laplace_cdf(y: f64, centre: f64, b: f64) -> f64 {
    if y < centre {
        0.5 * ((y - centre) / b).exp()
    } else {
        1.0 - 0.5 * (-(y - centre) / b).exp()
    }
}

/// Discretized Laplacian over the bins (edge bins absorb the tails).
pub fn discretized_laplace(centre: f64, b: f64) -> [f64; K] {
    let mut q = [0.0; K];
    let mut prev = 0.0;
    for (k, qk) in q.iter_mut().enumerate() {
        let upper = if k == K - 1 {
            1.0
        } else {
            laplace_cdf(k as f64 - (K / 2) as f64 + 0.5, centre, b)
        };
        *qk = (upper - prev).max(0.0);
        prev = upper;
    }
    q
}

/// Causal-prediction oracle: each pixel's target is a discretized Laplacian
/// centred on the mean of its available left, up and up-left neighbours, with
/// scale equal to their mean pairwise absolute difference. Pixels lacking two
/// neighbours fall back to image-level statistics, playing the role of side
/// information.
pub fn calibration_targets(grid: &SymbolGrid) -> CalibrationTargets {
    let (w, h) = (grid.width, grid.height);
    let v: Vec<f64> = grid
        .symbols
        .iter()
        .map(|&s| s as f64 - (K / 2) as f64)
        .collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let dev = v.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
    let mut q = Vec::with_capacity(v.len());
    for y in 0..h {
        for x in 0..w {
            let mut nb = [0.0; 3];
            let mut m = 0;
            if x > 0 {
                nb[m] = v[y * w + x - 1];
                m += 1;
            }
            if y > 0 {
                nb[m] = v[(y - 1) * w + x];
                m += 1;
            }
            if x > 0 && y > 0 {
                nb[m] = v[(y - 1) * w + x - 1];
                m += 1;
            }
            let centre = if m == 0 {
                mean
            } else {
                nb[..m].iter().sum::<f64>() / m as f64
            };
            let activity = if m >= 2 {
                let mut s = 0.0;
                let mut pairs = 0;
                for i in 0..m {
                    for j in i + 1..m {
                        s += (nb[i] - nb[j]).abs();
                        pairs += 1;
                    }
                }
                s / pairs as f64
            } else {
                dev
            };
            q.push(discretized_laplace(centre, activity.max(ORACLE_MIN_SCALE)));
        }
    }
    CalibrationTargets {
        width: w,
        height: h,
        q,
    }
}

/// Mean cross-entropy in bits, `(1/|Ω|) Σ_u Σ_k q_u(k) (−log2 p_u(k))`, for
/// explicit distributions.
pub fn cross_entropy_bits(q: &[[f64; K]], p: &[[f64; K]]) -> f64 {
    let total: f64 = q
        .iter()
        .zip(p)
        .map(|(qu, pu)| {
            qu.iter()
                .zip(pu)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, b)| -a * b.log2())
                .sum::<f64>()
        })
        .sum();
    total / q.len().max(1) as f64
}

struct CalibrationOp {
    d_mu: Vec<f64>,
    d_sigma: Vec<f64>,
    per_image: usize,
}

impl CustomOp for CalibrationOp {
    fn name(&self) -> &'static str {
        "calibration"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        upstream: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let scale = |i: usize| upstream[i / self.per_image] / self.per_image as f64;
        let dm = self
            .d_mu
            .iter()
            .enumerate()
            .map(|(i, d)| d * scale(i))
            .collect();
        let ds = self
            .d_sigma
            .iter()
            .enumerate()
            .map(|(i, d)| d * scale(i))
            .collect();
        vec![Some(dm), Some(ds)]
    }
}

/// Per-image mean cross-entropy (bits) between oracle targets and the
/// logistic model `(mu, sigma): [n, 1, h, w]`. `targets[i]` belongs to image
/// `i`. Returns `[n]`.
pub fn calibration_loss(
    g: &mut Graph,
    targets: &[CalibrationTargets],
    mu: Var,
    sigma: Var,
) -> Result<Var> {
    let s = g.shape(mu).to_vec();
    if g.shape(sigma) != s.as_slice() || s.is_empty() || s[0] != targets.len() {
        return Err(Error::shape("calibration_loss: shapes disagree"));
    }
    let per_image = g.value(mu).len() / s[0].max(1);
    if targets.iter().any(|t| t.q.len() != per_image) {
        return Err(Error::shape("calibration_loss: target grid size"));
    }
    let (mv, sv) = (g.value(mu).data(), g.value(sigma).data());
    if sv.iter().any(|&v| !(v >= SIGMA_FLOOR)) {
        return Err(Error::pre("sigma below floor"));
    }
    let mut out = vec![0.0; s[0]];
    let mut d_mu = vec![0.0; mv.len()];
    let mut d_sigma = vec![0.0; mv.len()];
    for (i, (&m, &sg)) in mv.iter().zip(sv).enumerate() {
        let q = &targets[i / per_image].q[i % per_image];
        let mut ce = 0.0;
        let row = log_pmf_row(m, sg);
        for (&qk, lp) in q.iter().zip(&row) {
            if qk == 0.0 {
                continue;
            }
            ce -= qk * lp.logp / LN_2;
            d_mu[i] -= qk * lp.d_mu / LN_2;
            d_sigma[i] -= qk * lp.d_sigma / LN_2;
        }
        out[i / per_image] += ce / per_image as f64;
    }
    g.custom(
        &[mu, sigma],
        Tensor::from_vec(out),
        Box::new(CalibrationOp {
            d_mu,
            d_sigma,
            per_image,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::logistic::pmf_all;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::param::ParamSet;
    use crate::numerics::rng::RngStream;

    #[test]
    fn hinge_values_and_subgradients() {
        assert!((hinge(1.2, 1.0) - 0.2).abs() < 1e-15);
        for (h, t, grad) in [(1.2, 1.0, 1.0), (0.8, 1.0, 0.0), (1.0, 1.0, 0.0)] {
            let mut g = Graph::new();
            let hv = g.input(Tensor::from_vec(vec![h]));
            let l = hinge_loss(&mut g, hv, &[t]).unwrap();
            let l = g.sum(l);
            let grads = g.backward(l, &mut ParamSet::new(0)).unwrap();
            assert_eq!(grads.get(hv).unwrap(), &[grad]);
        }
    }

    #[test]
    fn laplace_targets_normalized() {
        let mut rng = RngStream::new(2);
        let s: Vec<u8> = (0..256).map(|_| rng.below(64) as u8).collect();
        let t = calibration_targets(&SymbolGrid::new(16, 16, s).unwrap());
        for q in &t.q {
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(q.iter().all(|&p| p >= 0.0));
        }
        assert!(t.mean_entropy() > 4.0, "{}", t.mean_entropy());
    }

    #[test]
    fn constant_image_targets_concentrate() {
        let t = calibration_targets(&SymbolGrid::new(16, 16, vec![45; 256]).unwrap());
        for q in &t.q {
            assert!(q[45] > 0.999);
        }
        assert!(t.mean_entropy() < 0.2);
    }

    #[test]
    fn cross_entropy_bounds() {
        let grid = SymbolGrid::new(4, 4, (0..16).map(|i| (i * 3) as u8).collect()).unwrap();
        let t = calibration_targets(&grid);
        assert!((cross_entropy_bits(&t.q, &t.q) - t.mean_entropy()).abs() < 1e-12);
        let uniform = vec![[1.0 / K as f64; K]; 16];
        assert!((cross_entropy_bits(&t.q, &uniform) - 6.0).abs() < 1e-12);

        let mut rng = RngStream::new(5);
        for _ in 0..200 {
            let p: Vec<[f64; K]> = (0..16)
                .map(|_| {
                    pmf_all(
                        rng.uniform_range(-30.0, 30.0),
                        rng.uniform_range(0.01, 20.0),
                    )
                })
                .collect();
            assert!(cross_entropy_bits(&t.q, &p) >= t.mean_entropy() - 1e-12);
        }
    }

    #[test]
    fn calibration_gradients() {
        let mut rng = RngStream::new(8);
        for seed in 0..20 {
            let grid =
                SymbolGrid::new(3, 3, (0..9).map(|_| rng.below(64) as u8).collect()).unwrap();
            let targets = vec![calibration_targets(&grid)];
            let mu = Tensor::new(
                &[1, 1, 3, 3],
                (0..9).map(|_| rng.uniform_range(-20.0, 20.0)).collect(),
            )
            .unwrap();
            let sg = Tensor::new(
                &[1, 1, 3, 3],
                (0..9).map(|_| rng.uniform_range(0.2, 8.0)).collect(),
            )
            .unwrap();
            let mut ps = ParamSet::new(0);
            let r = check_gradients(&mut ps, &[mu, sg], 9, seed, |g, _, v| {
                let l = calibration_loss(g, &targets, v[0], v[1])?;
                Ok(g.sum(l))
            })
            .unwrap();
            assert!(r.max_rel_err() < 1e-4, "seed {seed}: {:?}", r.worst());
        }
    }
}
