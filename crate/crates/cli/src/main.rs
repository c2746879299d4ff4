use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use oct_stroke::labeling::Task;
use oct_stroke::records::Modality;
use oct_stroke_cli::config::{Overrides, RunConfig};
use oct_stroke_cli::error::{CliError, CliResult, ExitCode};
use oct_stroke_cli::pipeline::{Run, Stage};

/// Default run directory when `--out` is not given.
const OUT_ENV: &str = "OCT_STROKE_OUT";

#[derive(Parser)]
#[command(name = "oct-stroke", version, about = "Stroke prediction from retinal imaging and EHR features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population.
    Synth(Common),
    /// Apply the stroke and imaging cohort rules.
    Cohort(Common),
    /// Assign window labels, filter by task and split by patient.
    Label(Common),
    /// Extract clinical feature vectors.
    Features(Common),
    /// Contrastive pretraining of the visual encoders.
    Pretrain(Common),
    /// Hyperparameter search with patient-level cross-validation.
    Search(Common),
    /// Retrain the best configuration on the whole training split.
    Finetune(Common),
    /// Score the held-out test split.
    Evaluate(Common),
    /// Build metric tables and figures.
    Report(Common),
    /// Every stage in order.
    FullRun(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, env = OUT_ENV, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, value_parser = ["overall", "risk", "lasting"])]
    task: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    horizon: Option<u32>,
    #[arg(long, value_parser = ["oct", "infrared"])]
    modality: Option<String>,
    /// Shrink budgets to desk scale.
    #[arg(long)]
    desk_scale: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn execute(cli: Cli) -> CliResult<()> {
    let (stage, common) = match cli.command {
        Command::Synth(c) => (Some(Stage::Synth), c),
        Command::Cohort(c) => (Some(Stage::Cohort), c),
        Command::Label(c) => (Some(Stage::Label), c),
        Command::Features(c) => (Some(Stage::Features), c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::Search(c) => (Some(Stage::Search), c),
        Command::Finetune(c) => (Some(Stage::Finetune), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::FullRun(c) => (None, c),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build_global()
        .map_err(|e| oct_stroke::Error::config(format!("--jobs: {e}")))?;
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: common.seed,
        task: common.task.as_deref().map(str::parse::<Task>).transpose()?,
        horizon_days: common.horizon,
        modality: common.modality.as_deref().map(str::parse::<Modality>).transpose()?,
        desk_scale: common.desk_scale,
    };
    let cfg = base.apply(&overrides)?;
    let mut run = Run::open(cfg, &common.out)?;
    match stage {
        Some(s) => run.run(s)?,
        None => run.full_run()?,
    }
    println!("{}", common.out.join(oct_stroke_cli::manifest::MANIFEST_FILE).display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        let code = e.exit_code();
        eprintln!("error: {e}");
        if let CliError::Core(oct_stroke::Error::Numeric { .. }) = e {
            eprintln!("hint: lower the learning rate or check the inputs for non-finite values");
        }
        std::process::exit(code as i32);
    }
    std::process::exit(ExitCode::Ok as i32);
}
