//! The joint objective: denoising, budget hinge, calibration and stop terms.

use crate::diffusion::{forward_diffuse_batch, BudgetRange, EntropyBudget};
use crate::entropy::{
    calibration_loss, calibration_targets, hinge_loss, quantize_to_bins, CalibrationTargets,
    EntropyMode,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::ParamSet;
use crate::numerics::rng::{mix, RngStream};
use crate::numerics::tensor::Tensor;
use crate::policy::{stop_loss, LabelCache};

const BATCH_KEY: u64 = 0x6261_7463;
const BUDGET_KEY: u64 = 0x6275_6467;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_cal: f64,
    pub lambda_stop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ent: 0.1,
            lambda_cal: 1e-3,
            lambda_stop: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_ent: 0.0,
            lambda_cal: 0.0,
            lambda_stop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_ent", self.lambda_ent),
            ("lambda_cal", self.lambda_cal),
            ("lambda_stop", self.lambda_stop),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{k} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform budget on the range; a degenerate range always yields its bound.
pub fn sample_budget(rng: &mut RngStream, range: &BudgetRange) -> Result<EntropyBudget> {
    let b = if range.max > range.min {
        rng.uniform_range(range.min, range.max)
    } else {
        range.min
    };
    EntropyBudget::new(b.clamp(range.min, range.max), range)
}

/// One training batch: clean images, timesteps, noise and budgets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x0: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub budgets: Vec<f64>,
}

/// Draws the batch of iteration `iter`; depends only on `(seed, iter)`.
pub fn draw_batch(
    data: &[Tensor],
    batch_size: usize,
    steps: usize,
    range: &BudgetRange,
    seed: u64,
    iter: u64,
) -> Result<Batch> {
    if data.is_empty() || batch_size == 0 || steps == 0 {
        return Err(Error::pre("empty dataset, batch or schedule"));
    }
    let mut rng = RngStream::derive(mix(seed, iter), BATCH_KEY);
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| rng.below(data.len() as u64) as usize)
        .collect();
    let ts: Vec<usize> = (0..batch_size)
        .map(|_| 1 + rng.below(steps as u64) as usize)
        .collect();
    let items: Vec<Tensor> = indices.iter().map(|&i| data[i].clone()).collect();
    let x0 = Tensor::stack(&items)?;
    let eps = Tensor::new(x0.shape(), rng.normal_vec(x0.len()))?;
    let mut brng = RngStream::derive(mix(seed, iter), BUDGET_KEY);
    let budgets = (0..batch_size)
        .map(|_| sample_budget(&mut brng, range).map(|b| b.bpp))
        .collect::<Result<_>>()?;
    Ok(Batch {
        indices,
        x0,
        ts,
        eps,
        budgets,
    })
}

/// Options for [`total_loss`] beyond the batch itself.
pub struct LossOptions<'a> {
    pub weights: LossWeights,
    pub mode: EntropyMode,
    pub labels: Option<&'a LabelCache>,
    pub label_neighbors: usize,
    /// Fixed calibration targets; by default they come from the current x̂0.
    pub calibration: Option<&'a [CalibrationTargets]>,
}

/// Values of every term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub den: f64,
    pub ent: f64,
    pub cal: f64,
    pub stop: f64,
    pub mean_h_pred: f64,
    pub mean_h_target: f64,
}

pub struct LossGraph {
    pub total: Var,
    pub den: Var,
    pub ent: Var,
    pub cal: Var,
    /// Absent when the stop weight is zero.
    pub stop: Option<Var>,
    pub x0_hat: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the weighted objective for `batch` on `g`. Terms with zero weight
/// are still reported but do not enter the total.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    ps: &ParamSet,
    batch: &Batch,
    opts: &LossOptions,
) -> Result<LossGraph> {
    opts.weights.validate()?;
    let n = batch.ts.len();
    let sched = &model.schedule;
    let x_t = forward_diffuse_batch(&batch.x0, &batch.ts, &batch.eps, sched)?;
    let xv = g.constant(x_t);
    let h = model.budget_features(g, ps, &batch.budgets)?;
    let cond = model.config.denoiser.conditioning.then_some(h);
    let out = model.denoiser.forward(g, ps, xv, &batch.ts, cond)?;

    let target = g.constant(batch.eps.clone());
    let diff = g.sub(out.eps, target)?;
    let sq = g.mul(diff, diff)?;
    let den = g.mean(sq);

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &t in &batch.ts {
        let ab = sched.alpha_bar(t);
        a.push(1.0 / ab.sqrt());
        b.push(-(1.0 - ab).sqrt() / ab.sqrt());
    }
    let xs = g.scale_per_sample(xv, &a)?;
    let es = g.scale_per_sample(out.eps, &b)?;
    let x0_hat = g.add(xs, es)?;
    let x0_hat = g.clamp(x0_hat, -1.0, 1.0);

    let ent_out = model.entropy.forward(g, ps, x0_hat, opts.mode)?;
    let hinge = hinge_loss(g, ent_out.bpp, &batch.budgets)?;
    let ent = g.mean(hinge);

    let owned;
    let targets = match opts.calibration {
        Some(t) => t,
        None => {
            owned = calibration_for(g.value(x0_hat))?;
            &owned[..]
        }
    };
    let cal = calibration_loss(g, targets, ent_out.params.mu, ent_out.params.sigma)?;
    let cal = g.mean(cal);

    let w = opts.weights;
    let mut total = den;
    let mut stop = None;
    let mut stop_value = 0.0;
    if w.lambda_stop > 0.0 {
        let labels = opts
            .labels
            .ok_or_else(|| Error::MissingLabels("stop term needs a label cache".into()))?;
        let y = batch
            .budgets
            .iter()
            .zip(&batch.ts)
            .map(|(&bud, &t)| labels.soft_label(bud, t, opts.label_neighbors))
            .collect::<Result<Vec<f64>>>()?;
        let p = model.policy.forward(g, ps, out.feature, &batch.ts, h)?;
        let s = stop_loss(g, &y, p)?;
        stop_value = g.value(s).item();
        stop = Some(s);
        let ws = g.scale(s, w.lambda_stop);
        total = g.add(total, ws)?;
    }
    if w.lambda_ent > 0.0 {
        let we = g.scale(ent, w.lambda_ent);
        total = g.add(total, we)?;
    }
    if w.lambda_cal > 0.0 {
        let wc = g.scale(cal, w.lambda_cal);
        total = g.add(total, wc)?;
    }

    let bpp = g.value(ent_out.bpp).data();
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        den: g.value(den).item(),
        ent: g.value(ent).item(),
        cal: g.value(cal).item(),
        stop: stop_value,
        mean_h_pred: bpp.iter().sum::<f64>() / n as f64,
        mean_h_target: batch.budgets.iter().sum::<f64>() / n as f64,
    };
    Ok(LossGraph {
        total,
        den,
        ent,
        cal,
        stop,
        x0_hat,
        breakdown,
    })
}

/// Oracle targets for each image of `x: [n, 1, h, w]` after binning.
pub fn calibration_for(x: &Tensor) -> Result<Vec<CalibrationTargets>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [n, 1, h, w], got {s:?}")));
    }
    (0..s[0])
        .map(|i| {
            let grid = quantize_to_bins(x.sample(i), s[3], s[2])?;
            Ok(calibration_targets(&grid))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use crate::numerics::gradcheck::check_gradients;
    use crate::policy::generate_labels;

    fn data(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = RngStream::new(seed);
        (0..n)
            .map(|_| {
                let v = (0..size * size)
                    .map(|_| rng.uniform_range(-0.9, 0.9))
                    .collect();
                Tensor::new(&[1, size, size], v).unwrap()
            })
            .collect()
    }

    #[test]
    fn budget_draws() {
        let mut rng = RngStream::new(3);
        let r = BudgetRange { min: 1.0, max: 1.0 };
        for _ in 0..10 {
            assert_eq!(sample_budget(&mut rng, &r).unwrap().bpp, 1.0);
        }
        let r = BudgetRange::default();
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let b = sample_budget(&mut rng, &r).unwrap().bpp;
            assert!((r.min..=r.max).contains(&b));
            sum += b;
        }
        assert!((sum / n as f64 - 1.1).abs() < 0.05);
    }

    #[test]
    fn weights_validate() {
        LossWeights::default().validate().unwrap();
        let mut w = LossWeights::zero();
        w.lambda_cal = -1e-9;
        assert!(w.validate().is_err());
        w.lambda_cal = f64::NAN;
        assert!(w.validate().is_err());
    }

    #[test]
    fn batches_depend_on_seed_and_iter_only() {
        let d = data(5, 8, 1);
        let r = BudgetRange::default();
        let a = draw_batch(&d, 3, 10, &r, 4, 9).unwrap();
        let b = draw_batch(&d, 3, 10, &r, 4, 9).unwrap();
        let c = draw_batch(&d, 3, 10, &r, 4, 10).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.budgets, b.budgets);
        assert!(a.eps != c.eps);
        assert!(a.ts.iter().all(|t| (1..=10).contains(t)));
    }

    #[test]
    fn zero_weights_give_denoising_loss() {
        let m = Model::new(tiny_config()).unwrap();
        let d = data(4, 8, 2);
        let batch = draw_batch(&d, 2, 10, &m.config.budget, 0, 0).unwrap();
        let mut g = Graph::new();
        let opts = LossOptions {
            weights: LossWeights::zero(),
            mode: EntropyMode::Hard,
            labels: None,
            label_neighbors: 1,
            calibration: None,
        };
        let l = total_loss(&mut g, &m, &m.params, &batch, &opts).unwrap();
        assert_eq!(l.total, l.den);
        let b = l.breakdown;
        assert_eq!(b.total, b.den);
        assert!(b.den >= 0.0 && b.ent >= 0.0 && b.cal >= 0.0 && b.stop >= 0.0);
    }

    #[test]
    fn stop_term_needs_labels() {
        let m = Model::new(tiny_config()).unwrap();
        let d = data(2, 8, 2);
        let batch = draw_batch(&d, 2, 10, &m.config.budget, 0, 0).unwrap();
        let opts = LossOptions {
            weights: LossWeights::default(),
            mode: EntropyMode::Hard,
            labels: None,
            label_neighbors: 1,
            calibration: None,
        };
        let r = total_loss(&mut Graph::new(), &m, &m.params, &batch, &opts);
        assert!(matches!(r, Err(Error::MissingLabels(_))));
    }

    #[test]
    fn full_objective_gradients() {
        let m = Model::new(tiny_config()).unwrap();
        let labels = generate_labels(&m, 3, 5, Default::default()).unwrap();
        let d = data(4, 8, 3);
        let batch = draw_batch(&d, 2, 10, &m.config.budget, 1, 0).unwrap();
        // Low budgets so the hinge is active.
        let batch = Batch {
            budgets: vec![0.2, 0.25],
            ..batch
        };
        let mut ps = m.params.clone();
        let probe = {
            let mut g = Graph::inference();
            let opts = LossOptions {
                weights: LossWeights::default(),
                mode: EntropyMode::Smooth,
                labels: Some(&labels),
                label_neighbors: 2,
                calibration: None,
            };
            let l = total_loss(&mut g, &m, &ps, &batch, &opts).unwrap();
            calibration_for(g.value(l.x0_hat)).unwrap()
        };
        let weights = LossWeights {
            lambda_ent: 0.3,
            lambda_cal: 0.2,
            lambda_stop: 0.5,
        };
        let report = check_gradients(&mut ps, &[], 3, 11, |g, ps, _| {
            let opts = LossOptions {
                weights,
                mode: EntropyMode::Smooth,
                labels: Some(&labels),
                label_neighbors: 2,
                calibration: Some(&probe),
            };
            Ok(total_loss(g, &m, ps, &batch, &opts)?.total)
        })
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passes(1e-4), "{worst:?}");
    }
}
