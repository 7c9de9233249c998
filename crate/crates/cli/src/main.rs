use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use trisprompt::checkpoint::Checkpoint;
use trisprompt::data::{load_dataset, save_dataset};
use trisprompt::error::{Error, EXIT_NUMERIC};
use trisprompt::experiment::{ablate, parse_config, parse_strict, run_experiment};
use trisprompt::gradcheck::{grad_check, GradcheckConfig};
use trisprompt::metrics::report;
use trisprompt::protocol::{apply_missing, case_histogram, empirical_missing_rate};
use trisprompt::recon::recon_cosine_eval;
use trisprompt::synth::{generate, SynthConfig};
use trisprompt::train::{fit, predict};
use trisprompt::{Ablation, Mode, TrainConfig};

/// Relative output paths are resolved under this directory when it is set.
const OUTPUT_ROOT_VAR: &str = "TRISPROMPT_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "trisprompt", version, about = "Incomplete-multimodal rumor classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "3")]
    Three,
    #[value(name = "2")]
    Two,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Three => Mode::Three,
            ModeArg::Two => Mode::Two,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fully observed synthetic feature file.
    Gen {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        sep: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, value_enum, default_value = "3")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the random missing protocol to a fully observed file.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its best checkpoint.
    Train {
        /// JSON training config; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test-set metrics of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for interface uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Latent reconstruction cosine per missing case.
    ReconEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the analytic gradients on a toy model.
    Gradcheck {
        #[arg(long, value_enum, default_value = "3")]
        mode: ModeArg,
        #[arg(long, default_value = "full")]
        ablation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Full pipeline over every seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// The experiment once per ablation variant, plus a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen {
            n,
            seed,
            sep,
            noise,
            mode,
            out,
        } => {
            if n == 0 || sep < 0.0 || noise < 0.0 || !sep.is_finite() || !noise.is_finite() {
                return Err(Error::Config("need n >= 1 and finite sep, noise >= 0".into()));
            }
            let data = generate(&SynthConfig {
                n,
                seed,
                separation: sep,
                noise,
                mode: mode.into(),
                ..Default::default()
            });
            let out = resolve(&out);
            ensure_parent(&out)?;
            save_dataset(&data, &out)?;
            println!("wrote {} records to {}", data.len(), out.display());
        }
        Command::Mask { input, rate, seed, out } => {
            let data = load_dataset(&input)?;
            let masked = apply_missing(&data, rate, seed)?;
            let out = resolve(&out);
            ensure_parent(&out)?;
            save_dataset(&masked, &out)?;
            println!("empirical missing rate {:.4}", empirical_missing_rate(&masked)?);
            for (case, count) in case_histogram(&masked) {
                println!("{:<8} {count}", case.label(masked.mode()));
            }
        }
        Command::Train {
            config,
            train,
            val,
            out,
            seed,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(path) => parse_strict(&fs::read_to_string(&path).map_err(io(&path))?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (train, val) = (load_dataset(&train)?, load_dataset(&val)?);
            let outcome = fit(&train, &val, &cfg)?;
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "best epoch {} of {}; val acc {:.4}",
                outcome.best_epoch,
                last.epoch,
                outcome.history[outcome.best_epoch - 1].val_acc
            );
            let out = resolve(&out);
            ensure_parent(&out)?;
            Checkpoint::from_outcome(outcome, cfg).save(&out)?;
        }
        Command::Eval { ckpt, test, out, .. } => {
            let ck = Checkpoint::load(&ckpt)?;
            let test = load_dataset(&test)?;
            let scores = predict(&ck.model, &test);
            let labels: Vec<u8> = test.records().iter().map(|r| r.label).collect();
            let masks: Vec<_> = test.records().iter().map(|r| r.mask).collect();
            let rep = report(&scores, &labels, &masks, test.mode())?;
            println!("acc {:.4} f1 {:.4} auc {:.4}", rep.acc, rep.f1, rep.auc);
            write_json(&rep, &resolve(&out))?;
        }
        Command::ReconEval { ckpt, full, out, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let data = load_dataset(&full)?;
            let rep = recon_cosine_eval(&ck.model, &data, seed)?;
            for c in &rep.cases {
                println!("{:<8} recon {:.4} random {:.4}", c.case, c.recon, c.random);
            }
            write_json(&rep, &resolve(&out))?;
        }
        Command::Gradcheck {
            mode,
            ablation,
            seed,
            tolerance,
        } => {
            let ablation = Ablation::ALL
                .into_iter()
                .find(|a| a.name() == ablation)
                .ok_or_else(|| Error::Config(format!("unknown ablation {ablation:?}")))?;
            let rep = grad_check(&GradcheckConfig {
                mode: mode.into(),
                ablation,
                seed,
                tolerance,
                ..Default::default()
            });
            for g in &rep.groups {
                println!("{:<28} {:.3e}", g.name, g.rel_error);
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", rep.max_rel_error, rep.tolerance);
            if !rep.passed() {
                let worst = rep.worst().expect("groups");
                return Err(Error::Numeric(format!("gradient check failed at {}", worst.name)));
            }
        }
        Command::Run { config, seed } => {
            let mut spec = parse_config(&config)?;
            if let Some(s) = seed {
                spec.base_seed = s;
            }
            spec.output_dir = resolve(&spec.output_dir);
            let summary = run_experiment(&spec)?;
            if let Some(agg) = &summary.aggregate {
                println!(
                    "acc {:.4}±{:.4} f1 {:.4}±{:.4} auc {:.4}±{:.4}",
                    agg.acc.mean, agg.acc.std, agg.f1.mean, agg.f1.std, agg.auc.mean, agg.auc.std
                );
            }
            println!("reports in {}", spec.output_dir.display());
        }
        Command::Ablate { config, seed } => {
            let mut spec = parse_config(&config)?;
            if let Some(s) = seed {
                spec.base_seed = s;
            }
            spec.output_dir = resolve(&spec.output_dir);
            let table = ablate(&spec)?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            debug_assert!((2..=EXIT_NUMERIC).contains(&code));
            ExitCode::from(code as u8)
        }
    }
}
