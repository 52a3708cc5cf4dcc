//! `infocal`: generate data, pretrain the language model, train, evaluate,
//! extract rationales and verify gradients.
//!
//! Failures print one line `error[<kind>]: <message>` on stderr and exit
//! with 2 (config), 3 (data), 4 (numeric) or 5 (verification).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use infocal::config::Preset;
use infocal::eval::TaskScore;
use infocal::pipeline::{self, full_model_gradcheck, GradCheckDims};
use infocal::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "infocal", version, about = "Rationale extraction with information calibration")]
struct Cli {
    /// JSON run configuration; the built-in toy setup when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Published loss weights: beer-regression or legal-classification.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Dotted override such as `hyper.lambda_ib=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for data, language model and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/dev/test splits and the vocabulary.
    GenData,
    /// Pretrain the language model on the training split.
    PretrainLm,
    /// Train the model, checkpointing after every epoch.
    Train,
    /// Score the checkpoint on the evaluation split.
    Eval,
    /// Write hard rationales for the evaluation split as JSONL.
    Extract,
    /// Finite-difference check of every model gradient.
    Gradcheck,
}

enum Failure {
    Config(String),
    Run(Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> (u8, &'static str) {
        match self {
            Failure::Config(_) => (2, "config"),
            Failure::Verification(_) => (5, "verification"),
            Failure::Run(e) => match e {
                Error::Config(_) => (2, "config"),
                Error::Numeric { .. } => (4, "numeric"),
                Error::Contract(_) | Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) => (3, "data"),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(m) | Failure::Verification(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::toy(),
    };
    if let Some(p) = cli.preset {
        cfg.apply_preset(p);
    }
    for s in &cli.sets {
        cfg.set(s).map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg)?;
            println!(
                "wrote {} train, {} dev, {} test instances and {} vocabulary entries to {}",
                s.train,
                s.dev,
                s.test,
                s.vocab_size,
                cfg.paths.data_dir.display()
            );
        }
        Command::PretrainLm => {
            let s = pipeline::pretrain_lm(&cfg)?;
            println!(
                "{} steps, loss {:.4} -> {:.4}, saved {}",
                s.steps,
                s.first_loss,
                s.last_loss,
                cfg.paths.lm.display()
            );
        }
        Command::Train => {
            pipeline::train_command(&cfg, |e| {
                let dev = e.dev.map_or(String::new(), |d| {
                    let acc = d.task.accuracy().map_or(String::new(), |a| format!(" acc {a:.3}"));
                    format!("  dev{acc} F1 {:.3} selected {}", d.rationale.f1, pct(d.rationale.selection_pct))
                });
                println!("epoch {:>3}  J {:.4}  selected {}{dev}", e.epoch, e.j_total, pct(e.sel_pct));
            })?;
            println!("saved {} and {}", cfg.paths.model.display(), cfg.paths.metrics.display());
        }
        Command::Eval => {
            let r = pipeline::eval_command(&cfg)?;
            let task = match r.task {
                TaskScore::Classification {
                    accuracy,
                    macro_precision,
                    macro_recall,
                    macro_f1,
                } => format!("accuracy {accuracy:.4}  macro P {macro_precision:.4} R {macro_recall:.4} F1 {macro_f1:.4}"),
                TaskScore::Regression { mse } => format!("mse {mse:.5}"),
            };
            let q = r.rationale;
            println!("{} ({} instances): {task}", r.split.name(), r.instances);
            println!(
                "rationale P {} R {} F1 {} selected {}",
                pct(q.precision),
                pct(q.recall),
                pct(q.f1),
                pct(q.selection_pct)
            );
            println!("report {}", cfg.paths.report.display());
        }
        Command::Extract => {
            let n = pipeline::extract_command(&cfg)?;
            println!("wrote {n} rationales to {}", cfg.paths.extract.display());
        }
        Command::Gradcheck => {
            let r = full_model_gradcheck(GradCheckDims::default(), cfg.hyper.seed)?;
            let line = format!(
                "{} entries, max relative error {:.3e} (tolerance {:.0e}), worst {:?}",
                r.checked, r.max_rel_error, r.tolerance, r.worst
            );
            if !r.passed {
                return Err(Failure::Verification(line));
            }
            println!("gradcheck passed: {line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind) = f.code();
            eprintln!("error[{kind}]: {}", f.message().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
