//! `moka` command-line harness.
//!
//! Exit codes: 0 on success, 1 when an invariant or check fails, 2 on
//! usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moka_core::harness::{self, RunConfig, MIN_TIMED_PASSES, SWEEP_RANKS};
use moka_core::training::GradcheckConfig;
use moka_core::{CrossMode, Error, Precision, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "moka",
    version,
    about = "Multimodal low-rank adaptation experiments at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// none, task_centric, reversed_query, naive, projected or extra_pair:<query>[:<key>].
    #[arg(long, global = true)]
    cross_mode: Option<CrossMode>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration over its seeds.
    Train,
    /// Evaluate a checkpoint on the held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate with only some modalities routed through the adapters.
    PartialInfer {
        /// Checkpoint to evaluate; trains one seed first when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset, repeatable; `none` selects no modality.
        #[arg(long)]
        modalities: Vec<String>,
    },
    /// LoRA, Multiple LoRA, MokA without and with cross-attention.
    Ablate,
    /// Cross-modal interaction variants.
    Variants {
        /// Also run projected and extra-pair attention.
        #[arg(long)]
        extended: bool,
    },
    /// LoRA and MokA at several ranks.
    RankSweep {
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_RANKS)]
        ranks: Vec<usize>,
    },
    /// Parameters, matrix counts, FLOPs and forward time against LoRA.
    Efficiency {
        #[arg(long, default_value_t = MIN_TIMED_PASSES)]
        passes: usize,
        /// Also count adapter FLOPs at a 4096-wide layer.
        #[arg(long)]
        full_scale: bool,
    },
    /// Write attention weights of one held-out sample as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare backward gradients with central differences for every adapter.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
}

fn load_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig, Error> {
    let sibling = checkpoint.and_then(Path::parent).map(|d| d.join("config.json"));
    let mut cfg = match (&common.config, sibling) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(v) = common.variant {
        cfg.variant = v;
        if common.cross_mode.is_none() {
            cfg.cross_mode = None;
        }
    }
    if let Some(m) = &common.cross_mode {
        cfg.cross_mode = Some(m.clone());
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_subsets(raw: &[String]) -> Vec<Vec<String>> {
    raw.iter()
        .map(|s| {
            if s.trim() == "none" {
                Vec::new()
            } else {
                s.split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect()
            }
        })
        .collect()
}

fn csv_out<R: serde::Serialize>(rows: &[R]) -> Result<(), Error> {
    print!("{}", harness::csv_string(rows)?);
    Ok(())
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Spec(_) | Error::UnknownModality(_) | Error::Layout(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Check(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Train => {
            let cfg = load_config(common, None)?;
            let report = harness::run_train(&cfg, Some(&cfg.out_dir))?;
            csv_out(&report.seeds)?;
            eprintln!(
                "{}: mean accuracy {:.4} +- {:.4} over {} seeds",
                cfg.run_name(),
                report.mean_accuracy,
                report.stderr_accuracy,
                report.seeds.len()
            );
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(common, Some(checkpoint))?;
            let e = harness::eval_checkpoint(&cfg, checkpoint)?;
            println!("{}", serde_json::to_string(&e).map_err(Error::from)?);
        }
        Command::PartialInfer { checkpoint, modalities } => {
            let cfg = load_config(common, checkpoint.as_deref())?;
            let subsets = parse_subsets(modalities);
            let rows = harness::partial_infer(&cfg, checkpoint.as_deref(), cfg.seeds[0], &subsets)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
            harness::write_csv(&cfg.out_dir.join("partial.csv"), &rows)?;
            csv_out(&rows)?;
        }
        Command::Ablate => {
            let cfg = load_config(common, None)?;
            let report = harness::run_protocol("ablate", &harness::ablation_configs(&cfg), Some(&cfg.out_dir))?;
            csv_out(&report.rows)?;
        }
        Command::Variants { extended } => {
            let cfg = load_config(common, None)?;
            let configs = harness::variant_configs(&cfg, *extended)?;
            let report = harness::run_protocol("variants", &configs, Some(&cfg.out_dir))?;
            csv_out(&report.rows)?;
        }
        Command::RankSweep { ranks } => {
            let cfg = load_config(common, None)?;
            let configs = harness::rank_sweep_configs(&cfg, ranks);
            for c in &configs {
                c.validate()?;
            }
            let report = harness::run_protocol("rank-sweep", &configs, Some(&cfg.out_dir))?;
            csv_out(&report.rows)?;
        }
        Command::Efficiency { passes, full_scale } => {
            let cfg = load_config(common, None)?;
            let report = harness::efficiency(&cfg, *passes, *full_scale, Some(&cfg.out_dir))?;
            csv_out(&report.rows)?;
            if !report.scale.is_empty() {
                csv_out(&report.scale)?;
            }
        }
        Command::DumpAttention { checkpoint } => {
            let cfg = load_config(common, checkpoint.as_deref())?;
            let dir = cfg.out_dir.join("attention");
            let dumps = harness::dump_attention(&cfg, checkpoint.as_deref(), cfg.seeds[0], &dir)?;
            csv_out(&dumps)?;
        }
        Command::Gradcheck { threshold } => {
            let gc = GradcheckConfig {
                threshold: *threshold,
                seed: common.seed.unwrap_or(0),
                ..GradcheckConfig::default()
            };
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let rows = harness::run_gradcheck(&gc, Some(&out))?;
            csv_out(&rows)?;
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} of {} gradients disagree", rows.len())));
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
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
