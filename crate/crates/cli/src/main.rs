//! `wmguard`: run experiment stages from one config file.
//!
//! Exit status: 0 on success, 2 for schema or usage errors, 3 when an upstream
//! stage has not been run, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wmguard::harness::{
    emit_report, load_reports, report, ExperimentConfig, Pipeline, Provenance, ReportFormat, Stage,
};
use wmguard::Error;

#[derive(Parser)]
#[command(
    name = "wmguard",
    version,
    about = "Backdoor watermarking and trigger-blocking wrappers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and subsample datasets; record their hashes.
    Data(StageArgs),
    /// Generate the trigger set and verification key.
    Trigger(StageArgs),
    /// Train the watermarked model.
    Mark(StageArgs),
    /// Train the configured wrapper.
    Defend(StageArgs),
    /// Evaluate marked and wrapped models and write the report.
    Eval(StageArgs),
    /// Render persisted reports as a table, CSV or plot bundle.
    Report(ReportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Rerun this stage even when a cached result exists.
    #[arg(long)]
    force: bool,
    /// Replace the seed this stage consumes.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; replaces `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config overrides as dotted.key=value.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    TableText,
    Csv,
    PlotBundle,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::TableText => ReportFormat::TableText,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::PlotBundle => ReportFormat::PlotBundle,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value = "table-text")]
    format: FormatArg,
    /// Directory for the emitted files.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// `report.json` files or eval stage directories.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn seed_key(stage: Stage) -> &'static str {
    match stage {
        Stage::Data => "seeds.data",
        Stage::Trigger => "seeds.trigger",
        Stage::Mark | Stage::Defend => "seeds.model",
        Stage::Eval => "seeds.denial",
    }
}

fn run_stage(stage: Stage, args: StageArgs) -> Result<(), Error> {
    let mut overrides = args.overrides;
    if let Some(n) = args.seed {
        overrides.push(format!("{}={n}", seed_key(stage)));
    }
    if let Some(out) = &args.out {
        overrides.push(format!(
            "out_dir={}",
            serde_json::Value::String(out.display().to_string())
        ));
    }
    let cfg = ExperimentConfig::load(&args.config, &overrides)?;
    let mut prov = Provenance::stage(&cfg, stage, &overrides, args.force)?;
    let result = Pipeline::new(cfg.clone(), false).run_stage(stage, args.force);
    match &result {
        Ok(rec) => prov.stage_key = Some(rec.key.clone()),
        Err(e) => prov.error = Some(e.to_string()),
    }
    prov.write(&cfg.out_dir)?;
    let rec = result?;
    let dir = Pipeline::new(cfg, false).stage_dir(stage, &rec.key);
    if stage == Stage::Eval {
        let reports = load_reports(std::slice::from_ref(&dir))?;
        print!("{}", report::table_text(&reports)?);
    }
    println!("{stage}: {}", dir.display());
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<(), Error> {
    let format = ReportFormat::from(args.format);
    let reports = load_reports(&args.reports)?;
    let files = emit_report(&reports, format, &args.out)?;
    Provenance::report(&args.reports, format, &args.out).write(&args.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Schema { .. } => 2,
        Error::MissingArtifact { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Data(a) => run_stage(Stage::Data, a),
        Command::Trigger(a) => run_stage(Stage::Trigger, a),
        Command::Mark(a) => run_stage(Stage::Mark, a),
        Command::Defend(a) => run_stage(Stage::Defend, a),
        Command::Eval(a) => run_stage(Stage::Eval, a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
