//! The training loop, its metrics log and on-disk outputs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::entropy::EntropyMode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::graph::Graph;
use crate::numerics::rng::mix;
use crate::numerics::tensor::Tensor;
use crate::policy::{full_sample, generate_labels, LabelCache};
use crate::training::adam::AdamState;
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::{draw_batch, total_loss, LossBreakdown, LossOptions};

pub const METRICS_HEADER: &str = "iter,L_total,L_den,L_ent,L_cal,L_stop,mean_H_pred,mean_H_target";

/// Budgets of the adherence probe.
pub const PROBE_BUDGETS: [f64; 4] = [0.3, 0.6, 1.0, 1.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based iteration number.
    pub iter: u64,
    pub loss: LossBreakdown,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, l.total, l.den, l.ent, l.cal, l.stop, l.mean_h_pred, l.mean_h_target
        )
    }
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: AdamState,
    pub labels: Option<LabelCache>,
    /// Completed iterations.
    pub iteration: u64,
    data: Vec<Tensor>,
}

fn check_data(config: &Config, data: &[Tensor]) -> Result<()> {
    let s = config.model.image_size;
    if data.is_empty() {
        return Err(Error::pre("training set is empty"));
    }
    if let Some(bad) = data.iter().find(|t| t.shape() != [1, s, s]) {
        return Err(Error::shape(format!(
            "training image {:?}, model expects [1, {s}, {s}]",
            bad.shape()
        )));
    }
    Ok(())
}

impl Trainer {
    /// Fresh run. Without labels and with a positive stop weight, labels are
    /// recorded from the initial model.
    pub fn new(config: Config, data: Vec<Tensor>, labels: Option<LabelCache>) -> Result<Self> {
        config.validate()?;
        check_data(&config, &data)?;
        let model = Model::new(config.model.clone())?;
        let t = &config.train;
        let adam = AdamState::new(&model.params, t.lr, t.beta1, t.beta2, t.eps, t.clip_norm);
        let mut tr = Self {
            config,
            model,
            adam,
            labels,
            iteration: 0,
            data,
        };
        if tr.labels.is_none() && tr.config.train.weights.lambda_stop > 0.0 {
            tr.labels = Some(tr.record_labels(0)?);
        }
        if let Some(l) = &tr.labels {
            l.check(tr.model.config.steps)?;
        }
        Ok(tr)
    }

    /// Continues from a checkpoint; the config is the one stored in it.
    pub fn resume(ck: &Checkpoint, data: Vec<Tensor>) -> Result<Self> {
        check_data(&ck.config, &data)?;
        let model = ck.model()?;
        if ck.config.train.weights.lambda_stop > 0.0 && ck.labels.is_none() {
            return Err(Error::MissingLabels(
                "checkpoint carries no label cache".into(),
            ));
        }
        Ok(Self {
            config: ck.config.clone(),
            model,
            adam: ck.adam.clone(),
            labels: ck.labels.clone(),
            iteration: ck.iteration,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.config.clone(),
            self.iteration,
            &self.model,
            self.adam.clone(),
            self.labels.clone(),
        )
    }

    fn record_labels(&self, iteration: u64) -> Result<LabelCache> {
        let p = &self.config.policy;
        generate_labels(
            &self.model,
            p.label_count,
            mix(p.label_seed, iteration),
            p.cost,
        )
    }

    fn refresh_due(&self) -> bool {
        let t = &self.config.train;
        let half = (t.iterations / 2) as u64;
        t.refresh_labels && t.weights.lambda_stop > 0.0 && half > 0 && self.iteration == half
    }

    /// Runs one iteration and returns its loss breakdown.
    pub fn step(&mut self) -> Result<MetricsRow> {
        if self.refresh_due() {
            self.labels = Some(self.record_labels(self.iteration)?);
        }
        let t = &self.config.train;
        let batch = draw_batch(
            &self.data,
            t.batch_size,
            self.model.config.steps,
            &self.model.config.budget,
            t.seed,
            self.iteration,
        )?;
        let opts = LossOptions {
            weights: t.weights,
            mode: EntropyMode::Hard,
            labels: self.labels.as_ref(),
            label_neighbors: self.config.policy.label_neighbors,
            calibration: None,
        };
        let mut g = Graph::new();
        let loss = total_loss(&mut g, &self.model, &self.model.params, &batch, &opts)?;
        let b = loss.breakdown;
        let values = [b.total, b.den, b.ent, b.cal, b.stop, b.mean_h_pred];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at iteration {}: total {} den {} ent {} cal {} stop {} H {}",
                self.iteration + 1,
                b.total,
                b.den,
                b.ent,
                b.cal,
                b.stop,
                b.mean_h_pred
            )));
        }
        self.model.params.zero_grads();
        g.backward(loss.total, &mut self.model.params)?;
        self.adam
            .step(&mut self.model.params)
            .map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} at iteration {}", self.iteration + 1))
                }
                e => e,
            })?;
        self.iteration += 1;
        Ok(MetricsRow {
            iter: self.iteration,
            loss: b,
        })
    }

    /// Mean `|H_φ(x̂0) − H|` of full-length samples over [`PROBE_BUDGETS`],
    /// `seeds` samples per budget.
    pub fn probe(&self, seeds: u64) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0.0;
        for &h in &PROBE_BUDGETS {
            let b = self.model.budget(h)?;
            for s in 0..seeds {
                let x = full_sample(&self.model, &b, s)?;
                let bpp = self.model.entropy.bpp(&self.model.params, &x)?[0];
                sum += (bpp - h).abs();
                n += 1.0;
            }
        }
        Ok(sum / n)
    }
}

/// Where [`train_to_dir`] writes.
pub struct TrainOutputs {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.bin")
}

/// Runs `trainer` to `train.iterations`, writing `metrics.csv`, periodic
/// checkpoints, `final.bin` and, with a probe cadence, `probe.csv` under
/// `dir`. A resumed trainer appends to existing logs.
pub fn train_to_dir(trainer: &mut Trainer, dir: &Path) -> Result<TrainOutputs> {
    std::fs::create_dir_all(dir)?;
    let fresh = trainer.iteration == 0;
    let open = |name: &str, header: &str| -> Result<File> {
        let path = dir.join(name);
        if fresh || !path.exists() {
            let mut f = File::create(&path)?;
            writeln!(f, "{header}")?;
            Ok(f)
        } else {
            Ok(OpenOptions::new().append(true).open(&path)?)
        }
    };
    let mut metrics = open("metrics.csv", METRICS_HEADER)?;
    let t = trainer.config.train.clone();
    let mut probe = if t.eval_every > 0 {
        Some(open("probe.csv", "iter,mean_abs_bpp_error")?)
    } else {
        None
    };
    let mut checkpoints = Vec::new();
    while trainer.iteration < t.iterations as u64 {
        let row = trainer.step()?;
        writeln!(metrics, "{}", row.csv_line())?;
        let i = trainer.iteration;
        if let Some(f) = probe.as_mut() {
            if i.is_multiple_of(t.eval_every as u64) {
                writeln!(f, "{i},{}", trainer.probe(1)?)?;
            }
        }
        if t.checkpoint_every > 0 && i.is_multiple_of(t.checkpoint_every as u64) {
            let path = dir.join(checkpoint_name(i));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
    }
    metrics.flush()?;
    let final_checkpoint = dir.join("final.bin");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutputs {
        metrics: dir.join("metrics.csv"),
        final_checkpoint,
        checkpoints,
    })
}
