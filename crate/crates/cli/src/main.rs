use std::path::PathBuf;
use std::process::ExitCode;

use ccreid_core::config::RunConfig;
use ccreid_core::pipeline::{cmd_augment, cmd_eval, cmd_probe, cmd_train, with_threads, EvalOptions, ProbeTarget};
use ccreid_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccreid", version, about = "Cloth-changing person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dotted `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write originals plus hairstyle-augmented samples as a directory dataset.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Train, evaluating every `eval.every` epochs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoints/last.safetensors` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint under both protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One grayscale attention PNG per query under `<out>/dumps/attention`.
        #[arg(long)]
        dump_attention: bool,
        /// Top-10 retrieval lists per query as CSV.
        #[arg(long)]
        dump_topk: bool,
    },
    /// Linear probe of hairstyle or clothes decodability.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "hairstyle")]
        target: ProbeTarget,
        /// Shuffle labels first (null control).
        #[arg(long)]
        shuffle_labels: bool,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    let cfg = match &cli.command {
        Command::Augment { common }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Probe { common, .. } => common.load()?,
    };
    with_threads(&cfg, || dispatch(cli, cfg.clone()))
}

fn dispatch(cli: Cli, cfg: RunConfig) -> Result<serde_json::Value, Error> {
    Ok(match cli.command {
        Command::Augment { common } => serde_json::to_value(cmd_augment(&cfg, &common.out)?)?,
        Command::Train { common, resume } => serde_json::to_value(cmd_train(&cfg, &common.out, resume)?)?,
        Command::Eval {
            common,
            checkpoint,
            dump_attention,
            dump_topk,
        } => {
            let opts = EvalOptions {
                dump_attention,
                top_k_csv: dump_topk,
            };
            serde_json::to_value(cmd_eval(&cfg, &checkpoint, &common.out, opts)?)?
        }
        Command::Probe {
            common,
            checkpoint,
            target,
            shuffle_labels,
        } => serde_json::to_value(cmd_probe(&cfg, &checkpoint, &common.out, target, shuffle_labels)?)?,
    })
}

/// Drops per-query arrays; the full reports are on disk.
fn compact(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("average_precisions");
            map.remove("cmc");
            map.values_mut().for_each(compact);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(compact),
        _ => {}
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(mut summary) => {
            compact(&mut summary);
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
