//! `motionpose`: dataset generation, motion features, training, inference,
//! evaluation, benchmarking and gradient audits from one executable.

mod data;
mod manifest;
mod model;
mod par;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use manifest::{exit, with_out, CmdResult, Failure, RunManifest};

#[derive(Parser, Debug)]
#[command(
    name = "motionpose",
    version,
    about = "Pose detection from appearance and motion features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic moving-figure dataset.
    Datagen(data::DatagenArgs),
    /// Compute feature stacks for every clip of a dataset.
    Features(data::FeaturesArgs),
    /// Train a network on a feature directory.
    Train(model::TrainArgs),
    /// Predict joints for one split of a dataset.
    Infer(model::InferArgs),
    /// Detection-rate curves for one or more prediction files.
    Eval(report::EvalArgs),
    /// Time one-shot against patchwise evaluation and check they agree.
    Bench(report::BenchArgs),
    /// Finite-difference audit of every gradient.
    Gradcheck(report::GradcheckArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
    /// Run a JSON list of commands in order.
    Batch(BatchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A `manifest.json` written by an earlier run.
    manifest: PathBuf,
    /// Output directory for the rerun; defaults to the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// JSON array of argument lists, e.g. `[["features", "--kind", "diff", ...], ...]`.
    list: PathBuf,
}

/// Refuses to write into (or over) an input directory.
pub fn ensure_disjoint(out: &Path, input: &Path) -> CmdResult {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let (Some(o), Some(i)) = (canon(out), canon(input)) {
        if o == i || i.starts_with(&o) {
            return Err(Failure::usage(format!(
                "--out {} would overwrite input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn dispatch(argv: &[String]) -> CmdResult {
    let cli =
        Cli::try_parse_from(std::iter::once("motionpose".to_string()).chain(argv.iter().cloned()))
            .map_err(|e| {
                let code = if e.use_stderr() { exit::USAGE } else { 0 };
                let _ = e.print();
                Failure::new(code, "")
            })?;
    match &cli.command {
        Command::Datagen(a) => data::datagen(a, argv),
        Command::Features(a) => data::features(a, argv),
        Command::Train(a) => model::train_cmd(a, argv),
        Command::Infer(a) => model::infer_cmd(a, argv),
        Command::Eval(a) => report::eval_cmd(a, argv),
        Command::Bench(a) => report::bench_cmd(a, argv),
        Command::Gradcheck(a) => report::gradcheck_cmd(a, argv),
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            let args = match &a.out {
                Some(o) => with_out(&m.argv, o)?,
                None => m.argv,
            };
            log::info!("replaying {}", args.join(" "));
            dispatch(&args)
        }
        Command::Batch(a) => {
            let text = std::fs::read_to_string(&a.list)
                .map_err(|e| Failure::usage(format!("{}: {e}", a.list.display())))?;
            let list: Vec<Vec<String>> = serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", a.list.display())))?;
            for (i, args) in list.iter().enumerate() {
                if matches!(args.first().map(String::as_str), Some("batch")) {
                    return Err(Failure::usage("batch lists cannot nest"));
                }
                println!("[{}/{}] {}", i + 1, list.len(), args.join(" "));
                dispatch(args)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code.clamp(0, 255) as u8)
        }
    }
}
