//! Cost trajectories, suffix-minimum teacher labels and their cache file.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::{BudgetRange, EntropyBudget};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::rng::mix;
use crate::numerics::tensor::Tensor;
use crate::policy::sampler::run_chain;

/// Weights of distortion and compute in the per-step cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.002,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    /// `H_φ(x̂0)` in bits per pixel.
    pub entropy: f64,
    /// Mean squared error of `x̂0` against the full-run output.
    pub distortion: f64,
    /// Steps executed so far, counting this one.
    pub compute: usize,
    pub total: f64,
}

/// Steps in sampling order, from `t = T` down to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTrajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl CostTrajectory {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Runs the full sampler once and scores the estimate `x̂0` at every step.
pub fn record_trajectory(
    model: &Model,
    budget: &EntropyBudget,
    seed: u64,
    weights: CostWeights,
) -> Result<CostTrajectory> {
    let mut estimates = Vec::new();
    let (x_ref, _) = run_chain(model, budget.bpp, seed, |st| {
        estimates.push((st.t, st.x0_hat.clone()));
        Ok(false)
    })?;
    let mut entropies = Vec::with_capacity(estimates.len());
    for chunk in estimates.chunks(32) {
        let batch = Tensor::stack(
            &chunk
                .iter()
                .map(|(_, x)| x.clone().reshape(&x.shape()[1..]).unwrap())
                .collect::<Vec<_>>(),
        )?;
        entropies.extend(model.entropy.bpp(&model.params, &batch)?);
    }
    let steps = estimates
        .iter()
        .zip(entropies)
        .enumerate()
        .map(|(k, ((t, x0), entropy))| {
            let distortion = mse(x0, &x_ref);
            let compute = k + 1;
            TrajectoryStep {
                t: *t,
                entropy,
                distortion,
                compute,
                total: entropy + weights.beta * distortion + weights.gamma * compute as f64,
            }
        })
        .collect();
    Ok(CostTrajectory { steps })
}

/// `y_i = 1` iff `C(i) ≤ C(j)` for every later-or-equal entry `j`, in one
/// reverse pass.
pub fn teacher_labels(totals: &[f64]) -> Vec<u8> {
    let mut labels = vec![0; totals.len()];
    let mut suffix_min = f64::INFINITY;
    for i in (0..totals.len()).rev() {
        suffix_min = suffix_min.min(totals[i]);
        labels[i] = u8::from(totals[i] <= suffix_min);
    }
    labels
}

pub const LABEL_MAGIC: &[u8; 4] = b"BALB";

/// One cached trajectory: costs and labels in sampling order.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRecord {
    pub image_id: u32,
    pub target_milli_bpp: u16,
    pub costs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl TeacherRecord {
    pub fn budget(&self) -> f64 {
        self.target_milli_bpp as f64 / 1000.0
    }

    /// Label for timestep `t` of a `T = labels.len()` trajectory.
    pub fn label_at(&self, t: usize) -> Option<u8> {
        let steps = self.labels.len();
        (1..=steps).contains(&t).then(|| self.labels[steps - t])
    }

    fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(LABEL_MAGIC)?;
        w.write_all(&self.image_id.to_le_bytes())?;
        w.write_all(&self.target_milli_bpp.to_le_bytes())?;
        w.write_all(&(self.costs.len() as u32).to_le_bytes())?;
        for (c, y) in self.costs.iter().zip(&self.labels) {
            w.write_all(&c.to_le_bytes())?;
            w.write_all(&[*y])?;
        }
        Ok(())
    }
}

/// Every label trajectory, ordered by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelCache {
    pub records: Vec<TeacherRecord>,
}

impl LabelCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            r.write(&mut out).expect("writing to memory");
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut records = Vec::new();
        let fmt = |what: &str| Error::format(format!("label cache: {what}"));
        while !bytes.is_empty() {
            let mut head = [0u8; 14];
            bytes
                .read_exact(&mut head)
                .map_err(|_| fmt("truncated record header"))?;
            if &head[..4] != LABEL_MAGIC {
                return Err(fmt("bad magic"));
            }
            let image_id = u32::from_le_bytes(head[4..8].try_into().unwrap());
            let target_milli_bpp = u16::from_le_bytes(head[8..10].try_into().unwrap());
            let steps = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
            if bytes.len() < steps * 9 {
                return Err(fmt("truncated record body"));
            }
            let mut costs = Vec::with_capacity(steps);
            let mut labels = Vec::with_capacity(steps);
            for i in 0..steps {
                let e = &bytes[i * 9..(i + 1) * 9];
                costs.push(f64::from_le_bytes(e[..8].try_into().unwrap()));
                if e[8] > 1 {
                    return Err(fmt("label outside {0, 1}"));
                }
                labels.push(e[8]);
            }
            bytes = &bytes[steps * 9..];
            records.push(TeacherRecord {
                image_id,
                target_milli_bpp,
                costs,
                labels,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that labels exist for a `steps`-step schedule.
    pub fn check(&self, steps: usize) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::MissingLabels("label cache is empty".into()));
        }
        if let Some(r) = self.records.iter().find(|r| r.labels.len() != steps) {
            return Err(Error::MissingLabels(format!(
                "record {} has {} steps, schedule has {steps}",
                r.image_id,
                r.labels.len()
            )));
        }
        Ok(())
    }

    /// Mean label at step `t` over the `k` trajectories whose budgets are
    /// closest to `budget` (ties to the lower image id).
    pub fn soft_label(&self, budget: f64, t: usize, k: usize) -> Result<f64> {
        let mut order: Vec<&TeacherRecord> = self.records.iter().collect();
        if order.is_empty() {
            return Err(Error::MissingLabels("label cache is empty".into()));
        }
        order.sort_by(|a, b| {
            (a.budget() - budget)
                .abs()
                .total_cmp(&(b.budget() - budget).abs())
                .then(a.image_id.cmp(&b.image_id))
        });
        let k = k.clamp(1, order.len());
        let mut sum = 0.0;
        for r in &order[..k] {
            let y = r.label_at(t).ok_or_else(|| {
                Error::MissingLabels(format!("no label for t = {t} in record {}", r.image_id))
            })?;
            sum += y as f64;
        }
        Ok(sum / k as f64)
    }
}

/// Budget of label trajectory `j` of `count`: stratified over the range.
pub fn label_budget(range: &BudgetRange, j: usize, count: usize) -> f64 {
    range.min + (range.max - range.min) * (j as f64 + 0.5) / count as f64
}

/// Records `count` trajectories with stratified budgets and labels them.
pub fn generate_labels(
    model: &Model,
    count: usize,
    seed: u64,
    weights: CostWeights,
) -> Result<LabelCache> {
    let range = model.config.budget;
    let mut records = Vec::with_capacity(count);
    for j in 0..count {
        let budget = EntropyBudget::new(label_budget(&range, j, count), &range)?;
        let traj = record_trajectory(model, &budget, mix(seed, j as u64), weights)?;
        let costs = traj.totals();
        records.push(TeacherRecord {
            image_id: j as u32,
            target_milli_bpp: budget.milli_bpp(),
            labels: teacher_labels(&costs),
            costs,
        });
    }
    Ok(LabelCache { records })
}
