//! Command-line driver: dataset generation, training, evaluation, the method
//! grid and the two ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use segcl::experiment::{
    ablation_plot, ablation_to_csv, evaluate_checkpoint, generate_dataset, load_dataset, run_grid,
    run_labeled_fraction_ablation, run_lambda_ablation, write_dataset, write_log, AblationRow, ExperimentConfig,
};
use segcl::metrics::{self, format_table, reports_to_csv, Report};
use segcl::phantom::DomainTag;
use segcl::trainer::{self, Checkpoint, RunOptions, TrainData};

/// Overrides `output_dir` from the config file.
const OUTPUT_DIR_ENV: &str = "SEGCL_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "segcl",
    version,
    about = "Contrastive domain adaptation for slice segmentation on phantom volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom volumes and the split manifest.
    Generate(Common),
    /// Train the configured regime and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one test domain.
    Eval(EvalArgs),
    /// Train and evaluate the whole method grid.
    Reproduce(ReproduceArgs),
    /// Joint training across the configured λ values.
    AblateLambda(AblationArgs),
    /// Baseline and joint training across labeled fractions.
    AblateFraction(AblationArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from the saved end-of-epoch state.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs, leaving a resumable state.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Source,
    Target,
}

impl From<Split> for DomainTag {
    fn from(s: Split) -> Self {
        match s {
            Split::Source => DomainTag::Source,
            Split::Target => DomainTag::Target,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Checkpoint whose scores fill the relative columns.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Split,
}

#[derive(Args)]
struct ReproduceArgs {
    #[command(flatten)]
    common: Common,
    /// Also run the λ and labeled-fraction ablations.
    #[arg(long)]
    ablations: bool,
    /// Write SVG plots of the ablation curves.
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    plots: bool,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = dir.into();
    }
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

fn load_data(cfg: &ExperimentConfig) -> Result<(segcl::phantom::Corpus, segcl::phantom::DatasetSplit)> {
    let dir = data_dir(cfg);
    load_dataset(&dir).with_context(|| format!("loading dataset from {} (run `segcl generate` first)", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(args: &Common) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let (corpus, split) = generate_dataset(&cfg)?;
    let dir = data_dir(&cfg);
    write_dataset(&dir, &corpus, &split)?;
    println!(
        "wrote {} volumes to {} ({} labeled train, {} val, {} source test, {} target test slices)",
        corpus.volumes.len(),
        dir.display(),
        split.labeled_train.len(),
        split.labeled_val.len(),
        split.test_source.len(),
        split.test_target.len()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common.config)?;
    let (corpus, split) = load_data(&cfg)?;
    let dir = cfg.output_dir.join("train");
    let opts = RunOptions {
        state_path: Some(dir.join("state.ckpt")),
        resume: args.resume,
        stop_after_epochs: args.stop_after,
    };
    let data = TrainData::new(&corpus, &split);
    let out = trainer::train(&cfg.model, &cfg.train, &data, &opts).context("training")?;
    write_log(&dir.join("metrics.jsonl"), &out.log)?;
    if !out.completed {
        println!("stopped early; resume with --resume");
        return Ok(());
    }
    let path = dir.join("best.ckpt");
    out.checkpoint.save(&path)?;
    println!(
        "best epoch {} mean val Dice {:.4}; checkpoint {}",
        out.checkpoint.epoch,
        out.checkpoint.mean_val_dice,
        path.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common.config)?;
    let (corpus, split) = load_data(&cfg)?;
    let domain = DomainTag::from(args.split);
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let name = method_name(&args.checkpoint);
    let records = evaluate_checkpoint(&ckpt, &name, &corpus, &split, domain)?;
    let rows = match &args.baseline {
        Some(b) => {
            let base = Checkpoint::load(b).with_context(|| format!("loading baseline {}", b.display()))?;
            let base_records = evaluate_checkpoint(&base, &method_name(b), &corpus, &split, domain)?;
            metrics::relativize(&records, &base_records)?
        }
        None => metrics::summarize(&records)?,
    };
    let reports = [Report {
        method: name,
        domain,
        rows,
    }];
    emit_reports(&cfg.output_dir.join("eval"), &domain.to_string(), &reports)
}

fn method_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn emit_reports(dir: &Path, stem: &str, reports: &[Report]) -> Result<()> {
    let table = format_table(reports);
    write_text(&dir.join(format!("{stem}.csv")), &reports_to_csv(reports)?)?;
    write_text(&dir.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

/// File-name-safe version of a method name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn reproduce(args: &ReproduceArgs) -> Result<()> {
    let cfg = load_config(&args.common.config)?;
    let (corpus, split) = load_data(&cfg)?;
    let dir = cfg.output_dir.join("reproduce");
    let grid = run_grid(&cfg.grid(), &cfg.model, &cfg.train, &corpus, &split)?;
    for run in &grid.runs {
        let s = slug(&run.spec.name);
        run.outcome
            .checkpoint
            .save(&dir.join("checkpoints").join(format!("{s}.ckpt")))?;
        write_log(&dir.join("logs").join(format!("{s}.jsonl")), &run.outcome.log)?;
    }
    emit_reports(&dir, "report", &grid.reports)?;
    let summary = grid.summary_table();
    write_text(&dir.join("summary.txt"), &summary)?;
    print!("\n{summary}");
    if args.ablations {
        lambda_ablation(&cfg, &corpus, &split, args.plots)?;
        fraction_ablation(&cfg, &corpus, &split, args.plots)?;
    }
    Ok(())
}

fn emit_ablation(dir: &Path, setting: &str, rows: &[AblationRow], plot: Option<(&str, bool)>) -> Result<()> {
    let text = ablation_to_csv(setting, rows)?;
    write_text(&dir.join("ablation.csv"), &text)?;
    print!("{text}");
    if let Some((title, log_x)) = plot {
        ablation_plot(&dir.join("ablation.svg"), title, setting, rows, log_x)?;
    }
    Ok(())
}

fn lambda_ablation(
    cfg: &ExperimentConfig,
    corpus: &segcl::phantom::Corpus,
    split: &segcl::phantom::DatasetSplit,
    plots: bool,
) -> Result<()> {
    let rows = run_lambda_ablation(&cfg.model, &cfg.train, &cfg.ablation.lambdas, corpus, split)?;
    let plot = plots.then_some(("Dice relative to λ = 20", true));
    emit_ablation(&cfg.output_dir.join("ablate-lambda"), "lambda", &rows, plot)
}

fn fraction_ablation(
    cfg: &ExperimentConfig,
    corpus: &segcl::phantom::Corpus,
    split: &segcl::phantom::DatasetSplit,
    plots: bool,
) -> Result<()> {
    let rows = run_labeled_fraction_ablation(&cfg.model, &cfg.train, &cfg.ablation.fractions, corpus, split)?;
    let plot = plots.then_some(("Joint minus baseline Dice by labeled fraction", false));
    emit_ablation(&cfg.output_dir.join("ablate-fraction"), "fraction", &rows, plot)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Reproduce(a) => reproduce(a),
        Command::AblateLambda(a) => {
            let cfg = load_config(&a.common.config)?;
            let (corpus, split) = load_data(&cfg)?;
            lambda_ablation(&cfg, &corpus, &split, a.plots)
        }
        Command::AblateFraction(a) => {
            let cfg = load_config(&a.common.config)?;
            let (corpus, split) = load_data(&cfg)?;
            if cfg.ablation.fractions.is_empty() {
                bail!(segcl::Error::Config("ablation.fractions is empty".into()));
            }
            fraction_ablation(&cfg, &corpus, &split, a.plots)
        }
    }
}

/// Category of the first library error in the chain; anything else is io.
fn category(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<segcl::Error>())
        .map_or("io", segcl::Error::category)
}

/// The error chain joined by ": ", skipping causes a parent already printed.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for e in err.chain() {
        let s = e.to_string();
        if !out.ends_with(&s) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&s);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"category": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", json!({"category": category(&e), "message": message(&e)}));
            ExitCode::FAILURE
        }
    }
}
