mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Settings};

#[derive(Parser, Debug)]
#[command(name = "voxelnext", version, about = "Volumetric segmentation: data, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (must be absent or empty unless --force).
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (0 = all cores; 1 = fully serial).
    #[arg(long)]
    threads: Option<usize>,
    /// Patch size for training and inference: N or DxHxW.
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["base", "width_x2"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    grn: Option<String>,
    #[arg(long = "grn-divisor", value_parser = ["sum", "mean"])]
    grn_divisor: Option<String>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// organ | multi | lesion | context
        #[arg(long)]
        task: Option<String>,
        /// Number of training cases.
        #[arg(long)]
        cases: Option<usize>,
        /// Number of held-out test cases.
        #[arg(long = "test-cases")]
        test_cases: Option<usize>,
    },
    /// Train from scratch on the `train` split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the `train` split (heads re-initialize if
    /// the class count differs).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sliding-window prediction for one split of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to predict (`all` for every case).
        #[arg(long)]
        split: Option<String>,
    },
    /// DSC/NSD of predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `infer`.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// K-fold cross-validation on the `train` split.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dead/saturated activation statistics and activation grids.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated layer names, or `all`.
        #[arg(long)]
        layer: Option<String>,
    },
    /// Merge per-case metric CSVs into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// NAME=metrics.csv, repeatable.
        #[arg(long = "input", value_name = "NAME=CSV")]
        inputs: Vec<String>,
    },
}

/// Resolved run: settings plus output location.
pub struct Run {
    pub settings: Settings,
    pub out: PathBuf,
}

fn resolve(name: &str, common: &Common, extra: &[(&str, Option<String>)]) -> Result<Run, ConfigError> {
    let mut s = Settings::defaults();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("threads", common.threads.map(|v| v.to_string())),
        ("train.patch", common.patch.clone()),
        ("infer.patch", common.patch.clone()),
        ("train.epochs", common.epochs.map(|v| v.to_string())),
        ("model.variant", common.variant.clone()),
        ("model.grn", common.grn.clone()),
        ("model.grn_divisor", common.grn_divisor.clone()),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    for kv in &common.set {
        s.apply_assignment(kv)?;
    }
    s.set("run.command", name)?;
    if std::env::var("VOXELNEXT_DETERMINISTIC").is_ok_and(|v| v == "1") {
        s.set("threads", "1")?;
    }
    Ok(Run {
        settings: s,
        out: common.out.clone(),
    })
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            common,
            task,
            cases,
            test_cases,
        } => {
            let run = resolve(
                "gen-data",
                &common,
                &[
                    ("data.task", task),
                    ("data.cases", cases.map(|v| v.to_string())),
                    ("data.test_cases", test_cases.map(|v| v.to_string())),
                ],
            )?;
            commands::gen_data(run, common.force)
        }
        Command::Pretrain { common, data } => {
            let run = resolve("pretrain", &common, &[("run.data", path(&data))])?;
            commands::pretrain(run, common.force)
        }
        Command::Finetune {
            common,
            data,
            checkpoint,
        } => {
            let run = resolve(
                "finetune",
                &common,
                &[("run.data", path(&data)), ("run.checkpoint", path(&checkpoint))],
            )?;
            commands::finetune(run, common.force)
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            split,
        } => {
            let run = resolve(
                "infer",
                &common,
                &[
                    ("run.data", path(&data)),
                    ("run.checkpoint", path(&checkpoint)),
                    ("run.split", split),
                ],
            )?;
            commands::infer(run, common.force)
        }
        Command::Eval { common, pred, data } => {
            let run = resolve(
                "eval",
                &common,
                &[("run.data", path(&data)), ("run.pred", path(&pred))],
            )?;
            commands::eval(run, common.force)
        }
        Command::Cv { common, data } => {
            let run = resolve("cv", &common, &[("run.data", path(&data))])?;
            commands::cv(run, common.force)
        }
        Command::Probe {
            common,
            checkpoint,
            data,
            split,
            layer,
        } => {
            let run = resolve(
                "probe",
                &common,
                &[
                    ("run.data", path(&data)),
                    ("run.checkpoint", path(&checkpoint)),
                    ("run.split", split),
                    ("probe.layer", layer),
                ],
            )?;
            commands::probe(run, common.force)
        }
        Command::Report { common, inputs } => {
            let joined = (!inputs.is_empty()).then(|| inputs.join(";"));
            let run = resolve("report", &common, &[("run.inputs", joined)])?;
            commands::report(run, common.force)
        }
    }
}

/// Exit status and category of a failure: 2 config, 3 invariant, 1 runtime.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    if e.downcast_ref::<ConfigError>().is_some() {
        return (2, "config");
    }
    match e.downcast_ref::<voxelnext::Error>() {
        Some(voxelnext::Error::Config { .. }) => (2, "config"),
        Some(voxelnext::Error::Contract(_) | voxelnext::Error::Structural(_)) => (3, "invariant"),
        _ => (1, "runtime"),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("voxelnext: config error: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("voxelnext: {kind} error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(code)
        }
    }
}
