//! `badiff` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use badiff::codec::{decode, encode, Bitstream};
use badiff::config::Config;
use badiff::datasets::{
    generate, grid_of, grid_of_image, image_of_grid, read_manifest, read_pgm, to_model_range,
    write_dataset, write_pgm,
};
use badiff::eval::{evaluate_one, summarize, EvalRecord, EVAL_HEADER};
use badiff::gradsuite::{run_scope, Scope, GRAD_TOLERANCE, SUITE_SEEDS};
use badiff::numerics::rng::mix;
use badiff::policy::{adaptive_sample, generate_labels, LabelCache};
use badiff::training::{train_to_dir, Checkpoint, Trainer};
use badiff::{Error, Model};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "badiff",
    version,
    about = "Budget-aware diffusion: train, sample, code"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic PGM dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Record a teacher-label cache offline.
    Labels {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model to record from; defaults to the initialization of the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train; writes metrics.csv, checkpoints and final.bin.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dataset manifest; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint (its stored config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adaptive sampling at one budget; writes PGMs and samples.csv.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bpp: f64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode a PGM into a bitstream; prints the realized bpp.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        bpp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream back into a PGM.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep budgets and report rate adherence and stopping statistics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated target budgets.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,1.0,1.5")]
        bpp_list: Vec<f64>,
        /// Samples per budget.
        #[arg(long, default_value_t = 16)]
        n: u64,
        /// Per-sample CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: u64,
    },
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Precondition(_) | Error::Unsupported(_) => 1,
        Error::NonFinite(_) => 3,
        Error::Shape(_)
        | Error::Format(_)
        | Error::Decode(_)
        | Error::Version(_)
        | Error::Integrity(_)
        | Error::MissingLabels(_)
        | Error::Io(_) => 2,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    let c = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    c.validate()?;
    Ok(c)
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model), Error> {
    let ck = Checkpoint::load(path)?;
    let m = ck.model()?;
    Ok((ck, m))
}

/// `BADIFF_THREADS`; unset or 0 means sequential.
fn threads() -> Result<usize, Error> {
    match std::env::var("BADIFF_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("BADIFF_THREADS: cannot parse {v:?}"))),
    }
}

/// Maps `f` over `items`, optionally on scoped threads; results keep input
/// order, so output does not depend on the thread count.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R, Error> + Sync,
) -> Result<Vec<R>, Error> {
    let n = threads()?;
    if n <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(n);
    let parts: Vec<Result<Vec<R>, Error>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>, Error>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { config, out_dir } => {
            let c = load_config(&config)?;
            let images = generate(&c.data)?;
            let manifest = write_dataset(&out_dir, &images)?;
            println!(
                "wrote {} images, manifest {}",
                images.len(),
                manifest.display()
            );
        }
        Cmd::Labels { config, ckpt, out } => {
            let c = load_config(&config)?;
            let model = match ckpt {
                Some(p) => load_model(&p)?.1,
                None => Model::new(c.model.clone())?,
            };
            let p = &c.policy;
            let cache = generate_labels(&model, p.label_count, mix(p.label_seed, 0), p.cost)?;
            cache.save(&out)?;
            println!(
                "wrote {} label records to {}",
                cache.records.len(),
                out.display()
            );
        }
        Cmd::Train {
            config,
            out_dir,
            data,
            resume,
        } => {
            let c = match &resume {
                Some(p) => Checkpoint::load(p)?.config,
                None => load_config(&config)?,
            };
            let images = match data {
                Some(m) => read_manifest(&m)?,
                None => generate(&c.data)?,
            };
            let tensors = images.iter().map(to_model_range).collect();
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&Checkpoint::load(&p)?, tensors)?,
                None => {
                    let labels = if c.train.labels.is_empty() {
                        None
                    } else {
                        Some(LabelCache::load(Path::new(&c.train.labels))?)
                    };
                    Trainer::new(c, tensors, labels)?
                }
            };
            let out = train_to_dir(&mut trainer, &out_dir)?;
            println!(
                "trained to iteration {}, final checkpoint {}",
                trainer.iteration,
                out.final_checkpoint.display()
            );
        }
        Cmd::Sample {
            ckpt,
            bpp,
            count,
            seed,
            out_dir,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let budget = model.budget(bpp)?;
            let threshold = ck.config.policy.threshold;
            fs::create_dir_all(&out_dir)?;
            let seeds: Vec<u64> = (0..count).map(|i| seed + i).collect();
            let rows = par_map(&seeds, |&s| {
                let smp = adaptive_sample(&model, &budget, s, threshold)?;
                let predicted = model.entropy.bpp(&model.params, &smp.image)?[0];
                let img = image_of_grid(&grid_of(&smp.image)?)?;
                write_pgm(&img, &out_dir.join(format!("sample_{s:06}.pgm")))?;
                Ok(format!(
                    "{s},{bpp},{predicted},{},{}",
                    smp.tau, smp.steps_executed
                ))
            })?;
            let mut f = fs::File::create(out_dir.join("samples.csv"))?;
            writeln!(f, "seed,target_bpp,predicted_bpp,tau,steps_executed")?;
            for r in rows {
                writeln!(f, "{r}")?;
            }
            println!("wrote {count} samples to {}", out_dir.display());
        }
        Cmd::Encode {
            ckpt,
            image,
            bpp,
            out,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let grid = grid_of_image(&read_pgm(&image)?)?;
            let bs = encode(&grid, &model.entropy, &model.params, &model.budget(bpp)?)?;
            let bytes = bs.to_bytes();
            if ck.config.codec.verify {
                let back = decode(
                    &Bitstream::from_bytes(&bytes)?,
                    &model.entropy,
                    &model.params,
                )?;
                if back != grid {
                    return Err(Error::Integrity(
                        "encoded stream does not decode to its input".into(),
                    )
                    .into());
                }
            }
            fs::write(&out, &bytes)?;
            println!("realized_bpp {:.6}", bs.realized_bpp());
        }
        Cmd::Decode { ckpt, input, out } => {
            let (_, model) = load_model(&ckpt)?;
            let bs = Bitstream::from_bytes(&fs::read(&input)?)?;
            let grid = decode(&bs, &model.entropy, &model.params)?;
            write_pgm(&image_of_grid(&grid)?, &out)?;
            println!(
                "decoded {}x{} to {}",
                grid.width,
                grid.height,
                out.display()
            );
        }
        Cmd::Eval {
            ckpt,
            bpp_list,
            n,
            out,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            if bpp_list.is_empty() || n == 0 {
                return Err(Error::Precondition("empty budget list or zero samples".into()).into());
            }
            let jobs: Vec<(f64, u64)> = bpp_list
                .iter()
                .flat_map(|&h| (0..n).map(move |s| (h, s)))
                .collect();
            let threshold = ck.config.policy.threshold;
            let records: Vec<EvalRecord> =
                par_map(&jobs, |&(h, s)| evaluate_one(&model, h, s, Some(threshold)))?;
            if let Some(path) = out {
                let mut f = fs::File::create(path)?;
                writeln!(f, "{EVAL_HEADER}")?;
                for r in &records {
                    writeln!(f, "{}", r.csv_line())?;
                }
            }
            println!("target_bpp,mean_abs_err_realized,mean_abs_err_predicted,mean_tau,mean_steps");
            for &h in &bpp_list {
                let sub: Vec<EvalRecord> =
                    records.iter().filter(|r| r.target == h).copied().collect();
                let s = summarize(&sub)?;
                println!(
                    "{h},{:.6},{:.6},{:.3},{:.3}",
                    s.mean_abs_err_realized, s.mean_abs_err_predicted, s.mean_tau, s.mean_steps
                );
            }
            let s = summarize(&records)?;
            println!("samples {}", s.count);
            println!("mean_abs_err_realized {:.6}", s.mean_abs_err_realized);
            println!("mean_abs_err_predicted {:.6}", s.mean_abs_err_predicted);
            println!("mean_tau {:.3}", s.mean_tau);
            println!("mean_steps {:.3}", s.mean_steps);
            println!("spearman_realized {:.4}", s.spearman_realized);
            println!("spearman_predicted {:.4}", s.spearman_predicted);
        }
        Cmd::GradCheck { scope, seeds } => {
            let scopes: Vec<Scope> = if scope == "all" {
                Scope::ALL.to_vec()
            } else {
                vec![scope.parse()?]
            };
            let mut failed = 0;
            for sc in scopes {
                for r in run_scope(sc, seeds)? {
                    let status = if r.passed() { "ok" } else { "FAIL" };
                    println!(
                        "{status} {}/{} seeds={} max_rel_err={:.3e}",
                        r.scope, r.name, r.seeds, r.max_rel_err
                    );
                    if !r.passed() {
                        failed += 1;
                        if let Some(w) = &r.worst {
                            println!("    worst: {w:?}");
                        }
                    }
                }
            }
            if failed > 0 {
                return Err(Failure::Check(format!(
                    "{failed} case(s) above tolerance {GRAD_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
