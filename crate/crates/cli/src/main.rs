use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcd_core::experiment::{self, ExperimentConfig, Method, StageOutput};
use dcd_core::Error;

/// Environment variable that overrides the configured output root.
const OUT_ENV: &str = "DCD_LAB_OUT";

#[derive(Debug, Parser)]
#[command(name = "dcd-lab", version, about = "Decoupled contrastive decoding experiments on a toy multimodal model")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides the output root (also settable through DCD_LAB_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Comma-separated methods for `eval`.
    #[arg(long, global = true, value_name = "LIST")]
    methods: Option<String>,

    /// Worker threads for training and evaluation.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the dataset and print its manifest hash.
    GenData,
    /// Supervised fine-tuning of the model and its projection.
    TrainSft,
    /// DPO from the SFT checkpoint.
    TrainDpo,
    /// Decoupled positive/negative projection training from the SFT checkpoint.
    TrainDcd,
    /// Score the selected methods and print the comparison table.
    Eval,
    /// Print the stored report with training-trace summaries.
    Report,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format { .. } | Error::Json(_) => 2,
        Error::MissingDependency(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut overrides = toml::Table::new();
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("--seed must fit in a signed 64-bit integer".into()))?;
        overrides.insert("seed".into(), toml::Value::Integer(seed));
    }
    let out = cli.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from));
    if let Some(out) = out {
        overrides.insert("out_dir".into(), toml::Value::String(out.display().to_string()));
    }
    ExperimentConfig::load_with(path, overrides)
}

fn print_stage(stage: &str, out: &StageOutput) {
    println!("{stage} checkpoint: {}", out.checkpoint.display());
    println!("checkpoint sha256: {}", out.checkpoint_hash);
    println!("trace: {} ({} rows)", out.trace.display(), out.trace_rows);
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let methods = cli.methods.as_deref().map(Method::parse_list).transpose()?;
    let config = load_config(cli)?;
    match cli.command {
        Command::GenData => {
            let manifest = experiment::gen_data(&config)?;
            for (split, n) in &manifest.counts {
                println!("{split}: {n} samples");
            }
            println!("manifest sha256: {}", manifest.hash()?);
        }
        Command::TrainSft => print_stage("sft", &experiment::train_sft::<f64>(&config)?),
        Command::TrainDpo => print_stage("dpo", &experiment::train_dpo_stage::<f64>(&config)?),
        Command::TrainDcd => print_stage("dcd", &experiment::train_dcd_stage::<f64>(&config)?),
        Command::Eval => {
            let methods = methods.unwrap_or_else(|| config.eval.methods.clone());
            let report = experiment::evaluate::<f64>(&config, &methods)?;
            print!("{}", report.to_table());
        }
        Command::Report => print!("{}", experiment::report(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
