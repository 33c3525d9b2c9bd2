//! Command implementations behind the `scfreg` binary.
//!
//! Each command writes `run.json` (command, configuration, seed, version,
//! paths, wall-clock seconds) next to its file outputs.

pub mod args;
pub mod commands;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;

use args::{Cli, Command};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
}

/// Manifest location: `<dir>/run.json` for directory outputs,
/// `<file>.run.json` for single-file outputs.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

struct Run {
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let run = match &cli.command {
        Command::Synth(a) => {
            let manifest = commands::synth(a)?;
            Run {
                command: "synth",
                config: serde_json::to_value(&manifest.config)?,
                seed: Some(a.seed),
                inputs: vec![],
                outputs: vec![a.out.clone()],
                manifest: Some(manifest_path(&a.out, true)),
            }
        }
        Command::Train(a) => {
            let outcome = commands::train(a)?;
            if let Some(d) = outcome.final_val_dice {
                log::info!(
                    "validation dice {:.4} (unregistered {:.4})",
                    d,
                    outcome.initial_val_dice.unwrap_or(f64::NAN)
                );
            }
            let mut inputs = vec![a.data.clone()];
            inputs.extend(a.embeddings.clone());
            Run {
                command: "train",
                config: serde_json::json!({
                    "model": commands::model_config(a),
                    "lambda": a.lambda,
                    "lr0": a.lr,
                    "epochs": a.epochs,
                    "val_pairs": a.val_pairs,
                    "one_hot": a.one_hot,
                    "initial_val_dice": outcome.initial_val_dice,
                    "final_val_dice": outcome.final_val_dice,
                }),
                seed: Some(a.seed),
                inputs,
                outputs: vec![a.out.join("checkpoint"), a.out.join("history.csv")],
                manifest: Some(manifest_path(&a.out, true)),
            }
        }
        Command::Register(a) => {
            let outputs = commands::register(a)?;
            let mut inputs = vec![a.ckpt.clone(), a.moving.clone(), a.fixed.clone(), a.fixed_seg.clone()];
            inputs.extend(a.fixed_probs.clone());
            inputs.extend(a.moving_seg.clone());
            Run {
                command: "register",
                config: serde_json::to_value(a)?,
                seed: None,
                inputs,
                outputs,
                manifest: Some(manifest_path(&a.out, true)),
            }
        }
        Command::Eval(a) => {
            commands::eval(a)?;
            Run {
                command: "eval",
                config: serde_json::to_value(a)?,
                seed: None,
                inputs: vec![a.field.clone(), a.fixed_seg.clone(), a.moving_seg.clone()],
                outputs: a.out.iter().cloned().collect(),
                manifest: a.out.as_deref().map(|p| manifest_path(p, false)),
            }
        }
        Command::SweepCorrelation(a) => {
            let outcome = commands::sweep_correlation(a)?;
            log::info!("pearson r = {:.4} over {} fields", outcome.fit.pearson_r, outcome.n_fields);
            Run {
                command: "sweep-correlation",
                config: serde_json::to_value(a)?,
                seed: Some(a.seed),
                inputs: a.fields.iter().cloned().collect(),
                outputs: vec![a.out.join("sweep.csv"), a.out.join("fit.json")],
                manifest: Some(manifest_path(&a.out, true)),
            }
        }
        Command::BackgroundVector(a) => {
            commands::background_vector(a)?;
            Run {
                command: "background-vector",
                config: serde_json::to_value(a)?,
                seed: None,
                inputs: vec![a.embeddings.clone()],
                outputs: vec![a.out.clone()],
                manifest: Some(manifest_path(&a.out, false)),
            }
        }
        Command::Complexity(a) => {
            commands::complexity_of(a)?;
            Run {
                command: "complexity",
                config: serde_json::to_value(a)?,
                seed: None,
                inputs: vec![],
                outputs: a.out.iter().cloned().collect(),
                manifest: a.out.as_deref().map(|p| manifest_path(p, false)),
            }
        }
    };
    if let Some(path) = &run.manifest {
        let m = RunManifest {
            command: run.command.into(),
            config: run.config,
            seed: run.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: run.inputs,
            outputs: run.outputs,
            started_unix_s: started,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        std::fs::write(path, text)?;
    }
    Ok(())
}
