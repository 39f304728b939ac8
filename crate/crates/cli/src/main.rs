// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgg_cli::commands::{eval_cmd, export_cmd, gen_data, train_cmd};
use sgg_cli::eval::{parse_ks, LayerSel};
use sgg_cli::{Result, RunConfig};
use sgg_core::metrics::format_table;

#[derive(Parser)]
#[command(name = "sgg", about = "Iterative scene-graph generation on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate dataset shards and manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint, a JSONL log and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print a recall table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all` or a 1-based layer index.
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 1)]
        top_m: usize,
        #[arg(long, default_value = "10,20,50")]
        k: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write DOT and JSON graphs per scene and layer.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scene ids.
        #[arg(long)]
        scenes: String,
        /// Comma-separated 1-based layers.
        #[arg(long)]
        layers: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let (path, sha) = gen_data(&cfg, &out)?;
            println!("{}  {}", sha, path.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = RunConfig::from_file(&config)?.with_env_seed()?;
            let o = train_cmd(&cfg, &data, &out)?;
            for r in &o.records {
                let hr = r.val.last().map_or(0.0, |v| v.hr);
                println!("epoch {:>3}  loss {:>10.4}  val hR {:>5.1}{}", r.epoch, r.loss, 100.0 * hr, if r.selected { "  *" } else { "" });
            }
            println!("checkpoint {}", o.summary.checkpoint.display());
        }
        Cmd::Eval { ckpt, data, layer, top_m, k, split, out } => {
            let ks = parse_ks(&k)?;
            let reports = eval_cmd(&ckpt, &data, &split, layer.parse::<LayerSel>()?, top_m, &ks)?;
            print!("{}", format_table(&reports));
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&reports)?).map_err(|e| sgg_cli::CliError::io(&path, e))?;
            }
        }
        Cmd::Export { ckpt, data, scenes, layers, out } => {
            let layers = split_list(&layers)
                .iter()
                .map(|l| l.parse::<usize>().map_err(|_| sgg_cli::CliError::Arg(format!("bad layer {l:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let files = export_cmd(&ckpt, &data, &split_list(&scenes), &layers, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
