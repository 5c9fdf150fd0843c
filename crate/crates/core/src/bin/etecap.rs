use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use etecap::commands::{self, StageSelection};
use etecap::config::RunConfig;
use etecap::data::{Split, SynthSpec};
use etecap::{Error, Result};

#[derive(Parser)]
#[command(name = "etecap", version, about = "End-to-end video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one or both stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Caption every clip of a manifest with beam search (JSONL to stdout).
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score candidates against references; prints the metric JSON.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic shape-motion dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON object with synthetic-data settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write `references_<split>.jsonl` for each split.
        #[arg(long)]
        references: bool,
    },
    /// Finite-difference gradient checks of the loss.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        encoder: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = etecap::gradcheck::REFERENCE_EPS)]
        eps: f64,
    },
}

fn write_out(path: Option<&PathBuf>, body: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => std::io::stdout().write_all(body).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            stage,
            resume,
            manifest,
            output_dir,
            seed,
        } => {
            let mut cfg = RunConfig::read(&config)?;
            cfg.apply_env()?;
            if let Some(m) = manifest {
                cfg.data.manifest = m;
            }
            if let Some(o) = output_dir {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let stages = match stage {
                StageArg::One => StageSelection::One,
                StageArg::Two => StageSelection::Two,
                StageArg::Both => StageSelection::Both,
            };
            let report = commands::cmd_train(&cfg, stages, resume.as_deref())?;
            for (name, r) in [("stage 1", &report.stage1), ("stage 2", &report.stage2)] {
                if let Some(r) = r {
                    eprintln!(
                        "{name}: {} updates, {} epochs, best val nll {:?}",
                        r.updates.len(),
                        r.epochs_run,
                        r.best_val_nll
                    );
                }
            }
            Ok(true)
        }
        Command::Caption {
            checkpoint,
            manifest,
            beam,
            max_len,
            split,
            out,
        } => {
            let lines = commands::cmd_caption(&checkpoint, &manifest, beam, max_len, split.map(Into::into))?;
            let mut body = Vec::new();
            commands::write_jsonl(&mut body, &lines)?;
            write_out(out.as_ref(), &body)?;
            Ok(true)
        }
        Command::Score {
            candidates,
            references,
            out,
        } => {
            let report = commands::cmd_score(&candidates, &references)?;
            let body = serde_json::to_string(&report)? + "\n";
            std::io::stdout().write_all(body.as_bytes()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
            if let Some(p) = out {
                write_out(Some(&p), body.as_bytes())?;
            }
            Ok(true)
        }
        Command::GenData {
            out,
            spec,
            seed,
            references,
        } => {
            let mut s: SynthSpec = match spec {
                Some(p) => {
                    let body = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?;
                    serde_json::from_str(&body).map_err(|e| Error::Config {
                        field: "synth".into(),
                        reason: e.to_string(),
                    })?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let manifest = commands::cmd_gen_data(&s, &out)?;
            if references {
                for split in [Split::Train, Split::Val, Split::Test] {
                    let rows = commands::references_jsonl(&manifest, Some(split))?;
                    let mut body = Vec::new();
                    commands::write_jsonl(&mut body, &rows)?;
                    write_out(Some(&out.join(format!("references_{split}.jsonl"))), &body)?;
                }
            }
            println!("{}", manifest.display());
            Ok(true)
        }
        Command::CheckGrads {
            seed,
            encoder,
            tolerance,
            eps,
        } => {
            let reports = commands::check_grads(seed, encoder, eps)?;
            let mut ok = true;
            for (name, r) in &reports {
                let pass = r.max_relative_error < tolerance;
                ok &= pass;
                println!(
                    "{} {name}: max relative error {:.3e} over {} coordinates",
                    if pass { "PASS" } else { "FAIL" },
                    r.max_relative_error,
                    r.coordinates
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
