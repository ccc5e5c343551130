//! Budget sweeps: sample, measure predicted and realized rate, summarize.

use crate::codec::encode;
use crate::datasets::grid_of;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::stats::spearman;
use crate::policy::{adaptive_sample, full_sample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub target: f64,
    pub seed: u64,
    /// `H_φ` of the delivered image.
    pub predicted_bpp: f64,
    /// Size of the coded bitstream, header included, per pixel.
    pub realized_bpp: f64,
    pub tau: usize,
    pub steps_executed: usize,
}

/// Samples one image at `target` (adaptively unless `threshold` is `None`),
/// codes it and measures both rates.
pub fn evaluate_one(
    model: &Model,
    target: f64,
    seed: u64,
    threshold: Option<f64>,
) -> Result<EvalRecord> {
    let budget = model.budget(target)?;
    let (image, tau, steps_executed) = match threshold {
        Some(th) => {
            let s = adaptive_sample(model, &budget, seed, th)?;
            (s.image, s.tau, s.steps_executed)
        }
        None => (full_sample(model, &budget, seed)?, 1, model.config.steps),
    };
    let predicted_bpp = model.entropy.bpp(&model.params, &image)?[0];
    let grid = grid_of(&image)?;
    let bs = encode(&grid, &model.entropy, &model.params, &budget)?;
    Ok(EvalRecord {
        target,
        seed,
        predicted_bpp,
        realized_bpp: bs.realized_bpp(),
        tau,
        steps_executed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_abs_err_predicted: f64,
    pub mean_abs_err_realized: f64,
    pub mean_tau: f64,
    pub mean_steps: f64,
    pub spearman_predicted: f64,
    pub spearman_realized: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::pre("no evaluation records"));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let targets: Vec<f64> = records.iter().map(|r| r.target).collect();
    let pred: Vec<f64> = records.iter().map(|r| r.predicted_bpp).collect();
    let real: Vec<f64> = records.iter().map(|r| r.realized_bpp).collect();
    Ok(EvalSummary {
        count: records.len(),
        mean_abs_err_predicted: mean(&|r| (r.predicted_bpp - r.target).abs()),
        mean_abs_err_realized: mean(&|r| (r.realized_bpp - r.target).abs()),
        mean_tau: mean(&|r| r.tau as f64),
        mean_steps: mean(&|r| r.steps_executed as f64),
        spearman_predicted: spearman(&targets, &pred),
        spearman_realized: spearman(&targets, &real),
    })
}

pub const EVAL_HEADER: &str = "target_bpp,seed,predicted_bpp,realized_bpp,tau,steps_executed";

impl EvalRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.target,
            self.seed,
            self.predicted_bpp,
            self.realized_bpp,
            self.tau,
            self.steps_executed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    #[test]
    fn untrained_sweep_runs() {
        let m = Model::new(tiny_config()).unwrap();
        let recs: Vec<EvalRecord> = [0.3, 1.5]
            .iter()
            .flat_map(|&h| (0..2).map(move |s| (h, s)))
            .map(|(h, s)| evaluate_one(&m, h, s, Some(0.5)).unwrap())
            .collect();
        let s = summarize(&recs).unwrap();
        assert_eq!(s.count, 4);
        assert!(s.mean_abs_err_predicted.is_finite() && s.mean_abs_err_realized > 0.0);
        let full = evaluate_one(&m, 1.0, 0, None).unwrap();
        assert_eq!(full.steps_executed, 10);
        assert!(summarize(&[]).is_err());
    }
}
