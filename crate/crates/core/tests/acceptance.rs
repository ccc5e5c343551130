//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). `ACCEPTANCE_ONLY=2,5` limits
//! the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::Instant;

use badiff::codec::{decode, encode, pmf_to_cdf, quantized_code_length, Bitstream};
use badiff::config::Config;
use badiff::datasets::{generate, grid_of, image_of_grid, to_model_range, DatasetSpec};
use badiff::entropy::{cross_entropy_bits, pmf_all, EntropyMode, SymbolGrid, K, SIGMA_FLOOR};
use badiff::eval::{evaluate_one, summarize, EvalRecord};
use badiff::gradsuite::{run_scope, Scope, GRAD_TOLERANCE, SUITE_SEEDS};
use badiff::numerics::graph::Graph;
use badiff::numerics::param::ParamSet;
use badiff::numerics::rng::RngStream;
use badiff::numerics::tensor::Tensor;
use badiff::policy::{adaptive_sample, full_sample, teacher_labels};
use badiff::training::{
    draw_batch, total_loss, train_to_dir, Checkpoint, LossOptions, LossWeights, Trainer,
    PROBE_BUDGETS,
};
use badiff::{Model, ModelConfig, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Small system for the structural checks: 8×8 images, ten steps.
fn small_config() -> Config {
    let mut c = Config::default();
    c.data.size = 8;
    c.data.count = 8;
    let m = &mut c.model;
    m.image_size = 8;
    m.steps = 10;
    m.denoiser.levels = vec![4, 8];
    m.denoiser.blocks_per_level = 1;
    m.denoiser.time_embed_dim = 8;
    m.denoiser.entropy_embed_dim = 6;
    m.denoiser.groups = 2;
    m.denoiser.attention = vec![false, false];
    m.entropy.hyper_channels = 3;
    m.entropy.context_channels = 3;
    m.entropy.fusion_channels = 4;
    m.policy.hidden = vec![8, 4];
    c.policy.label_count = 2;
    c.train.batch_size = 4;
    c.train.iterations = 6;
    c
}

/// The desk-scale run: 16×16 synthetic images, batch 32. The hinge weight is
/// raised from the full-scale 0.1 because this denoiser is tiny and trains
/// for a few thousand steps.
fn desk_config() -> Config {
    let mut c = Config::default();
    c.model.denoiser.levels = vec![8, 16];
    c.model.denoiser.attention = vec![false, false];
    c.model.denoiser.blocks_per_level = 1;
    c.model.denoiser.groups = 4;
    c.train.iterations = 9000;
    c.train.batch_size = 32;
    c.train.weights.lambda_ent = 5.0;
    c.train.refresh_labels = true;
    c
}

fn data_tensors(spec: &DatasetSpec) -> Result<Vec<Tensor>> {
    Ok(generate(spec)?.iter().map(to_model_range).collect())
}

fn c1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut cases = 0;
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for scope in Scope::ALL {
        for r in run_scope(scope, SUITE_SEEDS)? {
            cases += 1;
            worst = worst.max(r.max_rel_err);
            if !r.passed() {
                failed.push(format!("{}/{} {:.2e}", r.scope, r.name, r.max_rel_err));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{cases} cases x {SUITE_SEEDS} seeds, worst rel err {worst:.2e} (tol {GRAD_TOLERANCE:e}), {secs:.1}s{}",
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failed.join("; "))
            }
        ),
    )
}

fn max_abs_grad(ps: &ParamSet) -> f64 {
    ps.iter()
        .flat_map(|(_, p)| p.grad.data().iter().copied())
        .fold(0.0, |a, g: f64| a.max(g.abs()))
}

fn c2_hinge() -> Result<Outcome> {
    let c = small_config();
    let mut model = Model::new(c.model.clone())?;
    let data = data_tensors(&c.data)?;
    let base = draw_batch(&data, 4, c.model.steps, &c.model.budget, 3, 0)?;
    let weights = LossWeights {
        lambda_stop: 0.0,
        ..LossWeights::default()
    };
    let mut zero_ok = true;
    let mut active_ok = true;
    let mut details = Vec::new();
    for (budget, want_zero) in [(40.0, true), (0.01, false), (25.0, true), (0.05, false)] {
        let mut batch = base.clone();
        batch.budgets = vec![budget; 4];
        let mut g = Graph::new();
        let opts = LossOptions {
            weights,
            mode: EntropyMode::Hard,
            labels: None,
            label_neighbors: 1,
            calibration: None,
        };
        let l = total_loss(&mut g, &model, &model.params, &batch, &opts)?;
        let h = model.entropy.bpp(&model.params, g.value(l.x0_hat))?;
        let below = h.iter().all(|&v| v < budget);
        let above = h.iter().all(|&v| v > budget);
        model.params.zero_grads();
        g.backward(l.ent, &mut model.params)?;
        let m = max_abs_grad(&model.params);
        if want_zero {
            zero_ok &= below && m == 0.0;
        } else {
            active_ok &= above && m > 0.0;
        }
        details.push(format!("H={budget}: max|grad| {m:.3e}"));
    }
    outcome(zero_ok && active_ok, details.join(", "))
}

fn c3_logistic() -> Result<Outcome> {
    let mut rng = RngStream::new(31);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mu = rng.uniform_range(-60.0, 60.0);
        // Log-uniform scale from the floor up to about 60 bins, plus a few
        // scales right at the floor.
        let sigma = if i % 50 == 0 {
            SIGMA_FLOOR
        } else {
            SIGMA_FLOOR * (rng.uniform() * (6e4f64).ln()).exp()
        };
        let s: f64 = pmf_all(mu, sigma).iter().sum();
        worst = worst.max((s - 1.0).abs());
    }
    let uniform = vec![[1.0 / K as f64; K]];
    let shannon: f64 = uniform[0].iter().map(|&p| -p * p.log2()).sum();
    let cross = cross_entropy_bits(&uniform, &uniform);
    let cdf = pmf_to_cdf(&uniform[0])?;
    let coded_max = (0..K).map(|s| cdf.bits(s)).fold(0.0, f64::max);
    let coded_min = (0..K).map(|s| cdf.bits(s)).fold(f64::INFINITY, f64::min);
    let exact = shannon == 6.0 && cross == 6.0 && coded_max == 6.0 && coded_min == 6.0;
    outcome(
        worst <= 1e-12 && exact,
        format!(
            "max |sum PMF - 1| = {worst:.2e} over 1000 (mu, sigma); uniform PMF: entropy {shannon}, cross-entropy {cross}, coded {coded_min}..{coded_max} bits/symbol"
        ),
    )
}

fn brute_labels(c: &[f64]) -> Vec<u8> {
    (0..c.len())
        .map(|i| u8::from((i..c.len()).all(|j| c[i] <= c[j])))
        .collect()
}

fn c4_labels() -> Result<Outcome> {
    let mut rng = RngStream::new(41);
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = 1 + rng.below(200) as usize;
        let c: Vec<f64> = match i % 5 {
            0 => (0..n).map(|_| rng.normal()).collect(),
            // Integer-valued: many ties.
            1 => (0..n).map(|_| rng.below(4) as f64).collect(),
            2 => (0..n).map(|j| j as f64 * rng.uniform()).collect::<Vec<_>>(),
            3 => {
                let mut v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
                v.sort_by(|a, b| b.total_cmp(a));
                v
            }
            _ => vec![rng.uniform(); n],
        };
        let c = if i % 5 == 2 {
            let mut v = c;
            v.sort_by(f64::total_cmp);
            v
        } else {
            c
        };
        if teacher_labels(&c) != brute_labels(&c) {
            mismatches += 1;
        }
    }
    // Pinned edge cases.
    let fixed = teacher_labels(&[3.0, 1.0, 2.0]) == [0, 1, 1]
        && teacher_labels(&[1.0, 1.0, 1.0]) == [1, 1, 1]
        && teacher_labels(&[1.0, 2.0, 3.0]) == [1, 1, 1]
        && teacher_labels(&[3.0, 2.0, 1.0]) == [0, 0, 1]
        && teacher_labels(&[]).is_empty();
    outcome(
        mismatches == 0 && fixed,
        format!(
            "{mismatches} mismatches over 1000 trajectories (random, tied, monotone, constant)"
        ),
    )
}

fn random_grid(rng: &mut RngStream, kind: u64, s: usize) -> SymbolGrid {
    let n = s * s;
    let symbols: Vec<u8> = match kind % 4 {
        0 => (0..n).map(|_| rng.below(K as u64) as u8).collect(),
        1 => vec![rng.below(K as u64) as u8; n],
        2 => {
            let a = rng.uniform_range(0.0, 3.0);
            let o = rng.uniform_range(0.0, 20.0);
            (0..n)
                .map(|i| ((o + a * ((i % s) + i / s) as f64) as usize).min(K - 1) as u8)
                .collect()
        }
        _ => {
            let c = rng.below(K as u64) as i64;
            (0..n)
                .map(|_| (c + rng.below(5) as i64 - 2).clamp(0, K as i64 - 1) as u8)
                .collect()
        }
    };
    SymbolGrid::new(s, s, symbols).expect("grid")
}

fn c5_codec() -> Result<Outcome> {
    let c = desk_config();
    let model = Model::new(c.model.clone())?;
    let (e, ps) = (&model.entropy, &model.params);
    let budget = model.budget(1.0)?;
    let mut rng = RngStream::new(51);
    let mut lossless = 0;
    let mut body_ok = 0;
    let mut worst_body: f64 = 0.0;
    let trials = 1000;
    for i in 0..trials {
        let s = if i % 2 == 0 { 8 } else { 16 };
        let grid = random_grid(&mut rng, i, s);
        let bs = encode(&grid, e, ps, &budget)?;
        let back = decode(&Bitstream::from_bytes(&bs.to_bytes())?, e, ps)?;
        lossless += usize::from(back == grid);
        let ideal = quantized_code_length(&grid, e, ps)?;
        let body = bs.body_bits() as f64;
        let slack = (body - ideal).abs() - (0.01 * ideal + 64.0);
        worst_body = worst_body.max((body - ideal).abs() / ideal.max(1.0));
        body_ok += usize::from(slack <= 0.0);
    }
    // End to end on generated images: dataset images and model samples.
    let mut e2e_ok = 0;
    let mut e2e_n = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut images: Vec<Tensor> = generate(&DatasetSpec {
        count: 16,
        ..c.data
    })?
    .iter()
    .map(|im| {
        let t = to_model_range(im);
        Tensor::new(&[1, 1, im.height, im.width], t.into_data()).expect("image")
    })
    .collect();
    for (i, &h) in PROBE_BUDGETS.iter().enumerate() {
        images.push(full_sample(&model, &model.budget(h)?, 500 + i as u64)?);
    }
    for x in &images {
        let h_phi = e.bpp(ps, x)?[0];
        let bs = encode(&grid_of(x)?, e, ps, &budget)?;
        let pixels = (bs.header.width as usize * bs.header.height as usize) as f64;
        let realized = bs.realized_bpp();
        let allowed = 0.05 * h_phi + bs.overhead_bits() as f64 / pixels;
        worst_gap = worst_gap.max((realized - h_phi).abs() - allowed);
        e2e_ok += usize::from((realized - h_phi).abs() <= allowed);
        e2e_n += 1;
    }
    outcome(
        lossless == trials as usize && body_ok == trials as usize && e2e_ok == e2e_n,
        format!(
            "lossless {lossless}/{trials}; body within 1%+64 bits {body_ok}/{trials} (worst rel gap {worst_body:.4}); end to end {e2e_ok}/{e2e_n} (worst margin {worst_gap:.4} bpp)"
        ),
    )
}

/// Adaptive samples (the sampler's stopping rule decides τ) at each probe
/// budget; returns mean |H_φ(x̂0) − H_target| and the records.
fn adherence(model: &Model, per_budget: u64, threshold: f64) -> Result<(f64, Vec<EvalRecord>)> {
    let mut recs = Vec::new();
    for &h in &PROBE_BUDGETS {
        for s in 0..per_budget {
            recs.push(evaluate_one(model, h, 9000 + s, Some(threshold))?);
        }
    }
    let s = summarize(&recs)?;
    Ok((s.mean_abs_err_predicted, recs))
}

/// Mean `L_ent` over the first and last `w` rows of a metrics CSV.
fn hinge_windows(path: &std::path::Path, w: usize) -> Result<(f64, f64)> {
    let text = std::fs::read_to_string(path)?;
    let mut header = text.lines().next().unwrap_or("").split(',');
    let col = header.position(|h| h == "L_ent").expect("L_ent column");
    let vals: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .expect("number")
        })
        .collect();
    let w = w.min(vals.len()).max(1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&vals[..w]), mean(&vals[vals.len() - w..])))
}

struct Trained {
    model: Model,
    records: Vec<EvalRecord>,
}

fn c6_budget(trained: &mut Option<Trained>) -> Result<Outcome> {
    let c = desk_config();
    let data = data_tensors(&c.data)?;
    let th = c.policy.threshold;
    let (before, _) = adherence(&Model::new(c.model.clone())?, 16, th)?;
    let start = Instant::now();
    let mut tr = Trainer::new(c.clone(), data, None)?;
    let dir = tempfile::tempdir()?;
    train_to_dir(&mut tr, dir.path())?;
    let train_secs = start.elapsed().as_secs_f64();
    let hinge = hinge_windows(&dir.path().join("metrics.csv"), 500)?;
    let (after, records) = adherence(&tr.model, 16, th)?;
    let s = summarize(&records)?;
    let reduction = 1.0 - after / before;
    let pass = reduction >= 0.4 && s.spearman_realized >= 0.9 && train_secs <= 1800.0;
    let mut per = Vec::new();
    for &h in &PROBE_BUDGETS {
        let sub: Vec<&EvalRecord> = records.iter().filter(|r| r.target == h).collect();
        let real = sub.iter().map(|r| r.realized_bpp).sum::<f64>() / sub.len() as f64;
        per.push(format!("{h}->{real:.2}"));
    }
    *trained = Some(Trained {
        model: tr.model,
        records,
    });
    outcome(
        pass,
        format!(
            "{} its in {train_secs:.0}s; hinge mean {:.3} first 500 -> {:.3} last 500; mean |H_phi - H| {before:.3} -> {after:.3} ({:.1}% lower); Spearman(target, realized) {:.3} over {} samples; mean realized bpp {}",
            c.train.iterations,
            hinge.0,
            hinge.1,
            100.0 * reduction,
            s.spearman_realized,
            s.count,
            per.join(" ")
        ),
    )
}

fn c7_stopping(trained: &Option<Trained>) -> Result<Outcome> {
    let Some(t) = trained else {
        return outcome(false, "needs the criterion 6 model".into());
    };
    let th = desk_config().policy.threshold;
    let mut means = Vec::new();
    for h in [0.3, 1.8] {
        let b = t.model.budget(h)?;
        let mut sum = 0.0;
        for s in 0..64 {
            sum += adaptive_sample(&t.model, &b, 7000 + s, th)?.steps_executed as f64;
        }
        means.push(sum / 64.0);
    }
    let (lo, hi) = (means[0], means[1]);
    outcome(
        lo < hi,
        format!(
            "mean steps executed {lo:.2} at H=0.3 vs {hi:.2} at H=1.8 of {}; low budget stops {:.1}% earlier",
            t.model.config.steps,
            100.0 * (1.0 - lo / hi)
        ),
    )
}

/// Plain DDPM written against the raw denoiser: forward corruption, ε-MSE,
/// Adam with global-norm clipping.
struct ReferenceDdpm {
    model: Model,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl ReferenceDdpm {
    fn train_step(&mut self, x0: &Tensor, ts: &[usize], eps: &Tensor, c: &Config) -> Result<f64> {
        let per = x0.len() / ts.len();
        let mut xt = Vec::with_capacity(x0.len());
        for (n, &t) in ts.iter().enumerate() {
            let ab: f64 = (1..=t).map(|s| 1.0 - self.model.schedule.beta(s)).product();
            for i in n * per..(n + 1) * per {
                xt.push(ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]);
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(x0.shape(), xt)?);
        let out = self
            .model
            .denoiser
            .forward(&mut g, &self.model.params, xv, ts, None)?;
        let target = g.constant(eps.clone());
        let d = g.sub(out.eps, target)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq);
        let ps = &mut self.model.params;
        ps.zero_grads();
        g.backward(loss, ps)?;
        let t = &c.train;
        let norm = ps
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g * g))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > t.clip_norm {
            t.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (t.beta1, t.beta2);
        for (i, p) in ps.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            for j in 0..p.value.len() {
                let gr = p.grad.data()[j] * scale;
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * gr;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * gr * gr;
                let mh = self.m[i][j] / (1.0 - b1.powi(self.step));
                let vh = self.v[i][j] / (1.0 - b2.powi(self.step));
                p.value.data_mut()[j] -= t.lr * mh / (vh.sqrt() + t.eps);
            }
        }
        Ok(g.value(loss).item())
    }
}

fn c8_degeneracy() -> Result<Outcome> {
    let mut c = small_config();
    c.train.weights = LossWeights::zero();
    c.train.iterations = 100;
    c.train.seed = 81;
    let data = data_tensors(&c.data)?;
    let mut tr = Trainer::new(c.clone(), data.clone(), None)?;
    for id in tr.model.denoiser.film_params() {
        let p = tr.model.params.get_mut(id);
        p.value.data_mut().fill(0.0);
        p.trainable = false;
    }
    let mut unc: ModelConfig = c.model.clone();
    unc.denoiser.conditioning = false;
    let mut reference = Model::new(unc)?;
    let mut copied = 0;
    for p in reference.params.iter_mut() {
        let src = tr
            .model
            .params
            .by_name(&p.name)
            .unwrap_or_else(|| panic!("reference parameter {} missing", p.name));
        p.value = src.value.clone();
        copied += 1;
    }
    let sizes: Vec<usize> = reference
        .params
        .iter()
        .map(|(_, p)| p.value.len())
        .collect();
    let mut r = ReferenceDdpm {
        model: reference,
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        step: 0,
    };
    let mut worst: f64 = 0.0;
    for it in 0..100u64 {
        let row = tr.step()?;
        let b = draw_batch(
            &data,
            c.train.batch_size,
            c.model.steps,
            &c.model.budget,
            c.train.seed,
            it,
        )?;
        let want = r.train_step(&b.x0, &b.ts, &b.eps, &c)?;
        worst = worst.max((row.loss.total - want).abs());
    }
    outcome(
        worst <= 1e-10,
        format!("max |L - L_ref| = {worst:.2e} over 100 steps ({copied} tensors shared by name)"),
    )
}

fn c9_determinism(trained: &Option<Trained>) -> Result<Outcome> {
    let c = small_config();
    let model = match trained {
        Some(t) => t.model.clone(),
        None => Model::new(c.model.clone())?,
    };
    let b = model.budget(0.8)?;
    let th = c.policy.threshold;
    let dir = tempfile::tempdir()?;
    let mut files = Vec::new();
    for run in 0..2 {
        let s = adaptive_sample(&model, &b, 7, th)?;
        let path = dir.path().join(format!("run{run}.pgm"));
        badiff::datasets::write_pgm(&image_of_grid(&grid_of(&s.image)?)?, &path)?;
        files.push(std::fs::read(path)?);
    }
    let sample_ok = files[0] == files[1];

    let data = data_tensors(&c.data)?;
    let mut cfg = c.clone();
    cfg.train.checkpoint_every = 3;
    cfg.train.refresh_labels = true;
    let mut whole = Trainer::new(cfg.clone(), data.clone(), None)?;
    let d1 = tempfile::tempdir()?;
    let out = train_to_dir(&mut whole, d1.path())?;
    let mid = Checkpoint::load(&out.checkpoints[0])?;
    let mid_bytes = std::fs::read(&out.checkpoints[0])?;
    let ckpt_ok = Checkpoint::from_bytes(&mid_bytes)?.to_bytes() == mid_bytes;
    let mut resumed = Trainer::resume(&mid, data)?;
    let d2 = tempfile::tempdir()?;
    let out2 = train_to_dir(&mut resumed, d2.path())?;
    let resume_ok = std::fs::read(out.final_checkpoint)? == std::fs::read(out2.final_checkpoint)?;
    outcome(
        sample_ok && ckpt_ok && resume_ok,
        format!("sample bytes equal: {sample_ok}; checkpoint round trip: {ckpt_ok}; resumed == uninterrupted: {resume_ok}"),
    )
}

fn c10_robustness(trained: &Option<Trained>) -> Result<Outcome> {
    let Some(t) = trained else {
        return outcome(false, "needs the criterion 6 eval set".into());
    };
    let recs = &t.records;
    let max_gap = recs
        .iter()
        .map(|r| (r.predicted_bpp - r.realized_bpp).abs())
        .fold(0.0, f64::max);
    let mut holds = 0;
    let mut tightest = f64::INFINITY;
    for r in recs {
        let lhs = (r.realized_bpp - r.target).abs();
        let rhs = (r.predicted_bpp - r.target).abs() + max_gap;
        holds += usize::from(lhs <= rhs);
        tightest = tightest.min(rhs - lhs);
    }
    outcome(
        holds == recs.len(),
        format!(
            "bound holds for {holds}/{} images; max |H_phi - H_oracle| {max_gap:.3}; smallest slack {tightest:.3}",
            recs.len()
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut trained = None;
    let mut failures = 0;
    let mut report = |n: u32, name: &str, r: Result<Outcome>| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {n:>2} {}: {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    };
    if want(1) {
        report(1, "gradient suite", c1_gradients());
    }
    if want(2) {
        report(2, "one-sided hinge", c2_hinge());
    }
    if want(3) {
        report(3, "logistic normalization", c3_logistic());
    }
    if want(4) {
        report(4, "teacher-label oracle", c4_labels());
    }
    if want(5) {
        report(5, "codec", c5_codec());
    }
    if want(6) || want(7) || want(10) {
        let r = c6_budget(&mut trained);
        if want(6) {
            report(6, "budget adherence", r);
        }
    }
    if want(7) {
        report(7, "adaptive stopping direction", c7_stopping(&trained));
    }
    if want(8) {
        report(8, "DDPM degeneracy", c8_degeneracy());
    }
    if want(9) {
        report(9, "determinism", c9_determinism(&trained));
    }
    if want(10) {
        report(10, "robustness bound", c10_robustness(&trained));
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
