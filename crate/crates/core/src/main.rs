use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attnloc::backend::BackendKind;
use attnloc::corpus;
use attnloc::pipeline::{self, PipelineConfig, PipelineError, Strategy};
use attnloc::synthetic::{self, SyntheticConfig};

#[derive(Parser)]
#[command(name = "attnloc", version, about = "Line-level vulnerability localization from attention shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Toy,
    Dump,
    Http,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset JSONL, overriding the config
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Directory of attention dumps for the dump backend
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// lova, lova-c, lova-a or lova-v
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    folds: Option<usize>,
    /// Seed for folds, classifier and toy model
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct FoldSelect {
    /// folds.json written by `run`
    #[arg(long, requires = "fold")]
    folds_file: Option<PathBuf>,
    #[arg(long, requires = "folds_file")]
    fold: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated end-to-end run
    Run(Common),
    /// Render base and highlighted prompts to prompts.jsonl
    Prompt(Common),
    /// Extract attention and write per-line features
    Reduce(Common),
    /// Train one model per language from features.jsonl
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        /// Train on every fold except the selected one
        #[command(flatten)]
        select: FoldSelect,
    },
    /// Score features with trained models
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Score only the selected fold
        #[command(flatten)]
        select: FoldSelect,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Metrics for a reports file against the dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reports: PathBuf,
    },
    /// Score recorded LLM answers with the repeated-output baseline
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: PathBuf,
    },
    /// Run several method variants side by side
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (default: all)
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
        variants: Vec<Strategy>,
    },
    /// Generate a synthetic dataset with planted attention dumps
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 3.0)]
        delta_multiplier: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy {s:?} (expected lova, lova-c, lova-a, lova-v)"))
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &common.dataset {
        config.dataset = d.clone();
    }
    if let Some(b) = common.backend {
        config.backend.kind = match b {
            BackendArg::Toy => BackendKind::Toy,
            BackendArg::Dump => BackendKind::Dump,
            BackendArg::Http => BackendKind::Http,
        };
    }
    if let Some(d) = &common.dump_dir {
        config.backend.dump_dir = Some(d.clone());
    }
    if let Some(s) = common.strategy {
        s.apply(&mut config);
    }
    if let Some(k) = common.folds {
        config.folds.k = k;
    }
    if let Some(seed) = common.seed {
        config.folds.seed = seed;
        config.classifier.seed = seed;
        config.backend.toy.seed = seed;
    }
    if let Some(o) = &common.out {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn fold_select(select: &FoldSelect) -> Result<Option<(corpus::FoldAssignment, usize)>, PipelineError> {
    match (&select.folds_file, select.fold) {
        (Some(path), Some(k)) => {
            let folds = corpus::read_folds(path)?;
            if k >= folds.k {
                return Err(PipelineError::Config(format!("fold {k} outside 0..{}", folds.k)));
            }
            Ok(Some((folds, k)))
        }
        _ => Ok(None),
    }
}

fn print_path(p: &Path) {
    println!("{}", p.display());
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run(common) => {
            let config = load_config(&common)?;
            let result = pipeline::run(&config)?;
            print!("{}", result.evaluation.metrics.to_table());
        }
        Command::Prompt(common) => print_path(&pipeline::cmd_prompt(&load_config(&common)?)?),
        Command::Reduce(common) => print_path(&pipeline::cmd_reduce(&load_config(&common)?)?),
        Command::Train {
            common,
            features,
            select,
        } => {
            let config = load_config(&common)?;
            let select = fold_select(&select)?;
            let dir = config.out_dir.join("models");
            pipeline::cmd_train(&features, select.as_ref().map(|(f, k)| (f, *k)), &config.classifier, &dir)?;
            print_path(&dir);
        }
        Command::Localize {
            common,
            features,
            models,
            select,
            threshold,
        } => {
            let config = load_config(&common)?;
            let select = fold_select(&select)?;
            std::fs::create_dir_all(&config.out_dir)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", config.out_dir.display())))?;
            let out = config.out_dir.join("reports.jsonl");
            pipeline::cmd_localize(
                &features,
                &models,
                select.as_ref().map(|(f, k)| (f, *k)),
                threshold.unwrap_or(config.metrics.threshold),
                &out,
            )?;
            print_path(&out);
        }
        Command::Eval { common, reports } => {
            let eval = pipeline::cmd_eval(&reports, &load_config(&common)?)?;
            print!("{}", eval.metrics.to_table());
        }
        Command::Baseline { common, runs } => print_path(&pipeline::cmd_baseline(&runs, &load_config(&common)?)?),
        Command::Ablate { common, variants } => {
            let config = load_config(&common)?;
            let variants = if variants.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                variants
            };
            for row in pipeline::ablate(&config, &variants)? {
                println!(
                    "{}: f1 {:.2}, top-1 {:.2}",
                    row.strategy.name(),
                    row.metrics.f1,
                    row.metrics.top_n.get(&1).copied().unwrap_or(0.0)
                );
            }
        }
        Command::Synth {
            out,
            samples,
            delta_multiplier,
            seed,
        } => {
            let config = SyntheticConfig {
                num_samples: samples,
                delta_multiplier,
                seed,
                ..Default::default()
            };
            let set = synthetic::generate(&config, &out)?;
            println!(
                "{} samples, feature std {:.6}, delta {:.6}",
                set.samples.len(),
                set.feature_std,
                set.delta
            );
            print_path(&set.dataset_path);
            print_path(&set.dump_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(pipeline::report_error(&e, std::io::stderr()) as u8),
    }
}
