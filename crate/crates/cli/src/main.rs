//! `reworld`: runs the alignment pipeline stage by stage.
//!
//! Every command reads one TOML run configuration (`--config`), with
//! `REWORLD__SECTION__KEY` environment overrides, and works inside the run
//! directory (`--out`). Summaries go to stdout as JSON, progress to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reworld::config::RunConfig;
use reworld::fsutil;
use reworld::pipeline::{self, RunDir, RunLock};

#[derive(Parser, Debug)]
#[command(name = "reworld", version, about = "Preference alignment of a flow world model on a synthetic micro-world")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate, corrupt and annotate rollouts; build preference pairs and splits.
    GenData,
    /// Pretrain the flow policy on clean rollouts.
    Sft,
    /// Train the hierarchical reward model and evaluate it on the test split.
    TrainRm,
    /// Fine-tune the pretrained policy against the frozen reward model.
    Align {
        /// Continue from the last saved iteration.
        #[arg(long)]
        resume: bool,
    },
    /// Benchmark a policy checkpoint on the held-out suite.
    Eval {
        /// Policy checkpoint; defaults to the aligned checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Name of the report inside `eval/`.
        #[arg(long, default_value = "aligned")]
        label: String,
    },
    /// Merge the benchmark reports of several runs into one table.
    Report {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Compare the loss proxy with the exact likelihood on a 2D flow.
    ValidateProxy,
    /// Every stage in order, ending with both benchmark reports.
    Run,
}

fn load_config(cli: &Cli) -> reworld::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> reworld::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> reworld::Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Report { runs } = &cli.command {
        let table = pipeline::report(runs, cfg.seed)?;
        let dir = RunDir::new(&cfg.out_dir);
        fsutil::write_atomic(&dir.path("report.csv"), table.csv.as_bytes())?;
        fsutil::write_atomic(&dir.path("report.md"), table.markdown.as_bytes())?;
        fsutil::write_json(&dir.path("report.json"), &table.comparisons)?;
        print!("{}", table.markdown);
        return Ok(());
    }
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    match &cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg)?;
            eprintln!(
                "pairs: phys {} embod {} task {} vis {} (total {})",
                s.counts[0], s.counts[1], s.counts[2], s.counts[3], s.n_pairs
            );
            print_json(&s)
        }
        Command::Sft => print_json(&pipeline::sft(&cfg)?),
        Command::TrainRm => print_json(&pipeline::train_rm(&cfg)?),
        Command::Align { resume } => print_json(&pipeline::align(&cfg, *resume)?),
        Command::Eval { checkpoint, label } => {
            let dir = RunDir::new(&cfg.out_dir);
            let ck = checkpoint.clone().unwrap_or_else(|| dir.aligned_checkpoint());
            let r = pipeline::eval(&cfg, &ck, label)?;
            println!("{}\n{}", reworld::bench::BenchReport::CSV_HEADER, r.csv_row());
            Ok(())
        }
        Command::ValidateProxy => {
            let r = pipeline::validate_proxy(&cfg)?;
            print_json(&serde_json::json!({
                "spearman": r.spearman,
                "kendall": r.kendall,
                "n_points": r.n_points,
                "n_draws": r.n_draws,
            }))
        }
        Command::Run => {
            let s = pipeline::run_all(&cfg)?;
            print_json(&serde_json::json!({
                "sft_s_o": s.sft_report.s_o,
                "aligned_s_o": s.aligned_report.s_o,
                "comparison": s.comparison,
            }))
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
