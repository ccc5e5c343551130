//! Desk-scale training run with budget-adherence and stopping reports.
//!
//! `cargo run --release --example desk_run -- [key=value ...] [out=DIR]`

use std::path::PathBuf;
use std::time::Instant;

use badiff::config::Config;
use badiff::datasets::{generate, histogram_entropy, to_model_range};
use badiff::eval::{evaluate_one, summarize};
use badiff::policy::adaptive_sample;
use badiff::training::{train_to_dir, Trainer, PROBE_BUDGETS};

fn main() -> badiff::Result<()> {
    let mut c = Config::default();
    c.model.denoiser.levels = vec![8, 16];
    c.model.denoiser.attention = vec![false, false];
    c.model.denoiser.blocks_per_level = 1;
    c.model.denoiser.groups = 4;
    c.train.iterations = 200;
    c.train.weights.lambda_ent = 5.0;
    c.train.refresh_labels = true;
    let mut out = PathBuf::from("target/desk_run");
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "out" {
            out = PathBuf::from(v);
        } else {
            c.set(k, v)?;
        }
    }
    c.validate()?;
    let images = generate(&c.data)?;
    let mean_h = images.iter().map(histogram_entropy).sum::<f64>() / images.len() as f64;
    println!(
        "data: {} images, mean histogram entropy {mean_h:.3}",
        images.len()
    );
    let start = Instant::now();
    let mut tr = Trainer::new(c.clone(), images.iter().map(to_model_range).collect(), None)?;
    println!("labels recorded in {:.1}s", start.elapsed().as_secs_f64());
    let before = tr.probe(4)?;
    println!("probe before: {before:.4}");
    let start = Instant::now();
    train_to_dir(&mut tr, &out)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "trained {} its in {secs:.1}s ({:.3}s/it)",
        tr.iteration,
        secs / tr.iteration.max(1) as f64
    );
    let after = tr.probe(4)?;
    println!(
        "probe after: {after:.4} (reduction {:.1}%)",
        100.0 * (1.0 - after / before)
    );

    let th = c.policy.threshold;
    for (name, threshold) in [("full", None), ("adaptive", Some(th))] {
        let mut recs = Vec::new();
        for &h in &PROBE_BUDGETS {
            for s in 0..16 {
                recs.push(evaluate_one(&tr.model, h, 1000 + s, threshold)?);
            }
        }
        for &h in &PROBE_BUDGETS {
            let sub: Vec<_> = recs.iter().filter(|r| r.target == h).copied().collect();
            let s = summarize(&sub)?;
            println!(
                "{name} H={h}: mean H_phi {:.3} realized {:.3} steps {:.1}",
                sub.iter().map(|r| r.predicted_bpp).sum::<f64>() / sub.len() as f64,
                sub.iter().map(|r| r.realized_bpp).sum::<f64>() / sub.len() as f64,
                s.mean_steps
            );
        }
        let s = summarize(&recs)?;
        println!(
            "{name}: |err| {:.3} spearman realized {:.4} predicted {:.4}",
            s.mean_abs_err_predicted, s.spearman_realized, s.spearman_predicted
        );
    }

    for h in [0.3, 1.8] {
        let b = tr.model.budget(h)?;
        let mut steps = 0.0;
        for s in 0..64 {
            steps += adaptive_sample(&tr.model, &b, 5000 + s, th)?.steps_executed as f64;
        }
        println!("H={h}: mean steps executed {:.2}", steps / 64.0);
    }
    Ok(())
}
