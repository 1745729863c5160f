//! Experiment orchestration for the `unibev` binary: configuration, synthetic
//! data, training, evaluation, failure tests and resolution sweeps.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, TrainArgs};
use crate::config::{parse_override, ExperimentConfig, RoiChoice};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "unibev", version, about = "Radar-camera BEV fusion experiments")]
pub struct Cli {
    /// Experiment config (TOML), layered over its preset.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Named preset: toy, vod or tj4d. Defaults to the file's, else toy.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Radar schema: vod or tj4d.
    #[arg(long, global = true)]
    pub schema: Option<String>,
    /// Override any config value, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, toml::Value)>,
    /// Output directory; relative paths go under $UNIBEV_OUTPUT_ROOT when set.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Give up bit-reproducibility for speed.
    #[arg(long, global = true)]
    pub fast: bool,
    /// Export fusion-weight and depth heatmaps.
    #[arg(long, global = true)]
    pub debug: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus the per-step loss curve.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero the extra radar channels fed to depth prediction.
        #[arg(long)]
        ablate_rdl: bool,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Per-class AP and mAP of a checkpoint.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        roi: Option<RoiChoice>,
        #[arg(long)]
        ablate_rdl: bool,
        /// Also write every frame's detections.
        #[arg(long)]
        save_detections: bool,
    },
    /// Failure test: mAP under camera noise, averaged over seeded runs.
    Ft {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noise levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        rho: Vec<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        roi: Option<RoiChoice>,
        #[arg(long)]
        ablate_rdl: bool,
    },
    /// Image-resolution sweep with RDL on/off pairs.
    SweepRes {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Held-out frames; defaults to the training data.
        #[arg(long, value_name = "DIR")]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
        /// Training steps per model.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn push<T: Into<toml::Value>>(o: &mut Vec<(String, toml::Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.into()));
    }
}

fn int(v: Option<u64>) -> Option<i64> {
    v.map(|x| x as i64)
}

fn roi_value(r: Option<RoiChoice>) -> Option<String> {
    r.map(|r| match r {
        RoiChoice::None => "none".into(),
        RoiChoice::VodCorridor => "vod-corridor".into(),
    })
}

impl Cli {
    /// Config overrides implied by the subcommand flags, applied after `--set`.
    fn flag_overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        let mut o = self.overrides.clone();
        if self.fast {
            o.push(("deterministic".into(), false.into()));
        }
        let too_big = |v: Option<u64>| matches!(v, Some(x) if x > i64::MAX as u64);
        match &self.command {
            Command::Config => {}
            Command::Synth { frames, seed } => {
                push(&mut o, "synth.frames", frames.map(|f| f as i64));
                if too_big(*seed) {
                    return Err(CliError::Usage("seed must fit in 63 bits".into()));
                }
                push(&mut o, "seed", int(*seed));
            }
            Command::Train { steps, batch_size, lr, seed, ablate_rdl, .. } => {
                push(&mut o, "train.steps", int(*steps));
                push(&mut o, "train.batch_size", batch_size.map(|b| b as i64));
                push(&mut o, "train.lr", *lr);
                push(&mut o, "seed", int(*seed));
                if *ablate_rdl {
                    o.push(("model.rdl.ablate_extras".into(), true.into()));
                }
            }
            Command::Eval { roi, ablate_rdl, .. } => {
                push(&mut o, "eval.roi", roi_value(*roi));
                if *ablate_rdl {
                    o.push(("model.rdl.ablate_extras".into(), true.into()));
                }
            }
            Command::Ft { rho, runs, sigma, seed, roi, ablate_rdl, .. } => {
                if !rho.is_empty() {
                    o.push(("ft.rhos".into(), toml::Value::Array(rho.iter().map(|r| (*r).into()).collect())));
                }
                push(&mut o, "ft.runs", runs.map(|r| r as i64));
                push(&mut o, "ft.sigma", *sigma);
                push(&mut o, "ft.seed", int(*seed));
                push(&mut o, "eval.roi", roi_value(*roi));
                if *ablate_rdl {
                    o.push(("model.rdl.ablate_extras".into(), true.into()));
                }
            }
            Command::SweepRes { scales, steps, seed, .. } => {
                if !scales.is_empty() {
                    o.push(("sweep.scales".into(), toml::Value::Array(scales.iter().map(|s| (*s).into()).collect())));
                }
                push(&mut o, "sweep.steps", int(*steps));
                push(&mut o, "seed", int(*seed));
            }
        }
        Ok(o)
    }

    pub fn resolve_config(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), self.preset.as_deref(), self.schema.as_deref(), &self.flag_overrides()?)
    }
}

fn fmt_map(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Execute a parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Synth { .. } => {
            let out = commands::out_dir(cli.out, &cfg, Some("data"));
            let s = commands::synth(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Train { data, resume, .. } => {
            let out = commands::out_dir(cli.out, &cfg, None);
            let s = commands::train(&cfg, TrainArgs { data, resume }, &out, cli.debug)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            println!("checkpoint: {}", out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Eval { data, checkpoint, save_detections, .. } => {
            let out = commands::out_dir(cli.out, &cfg, Some("eval"));
            let r = commands::eval(&cfg, EvalArgs { data, checkpoint, save_detections }, &out, cli.debug)?;
            println!("all-area  mAP3D {}  mAPBEV {}", fmt_map(r.all_area.map_3d), fmt_map(r.all_area.map_bev));
            if let Some(m) = &r.roi {
                println!("roi       mAP3D {}  mAPBEV {}", fmt_map(m.map_3d), fmt_map(m.map_bev));
            }
            println!("metrics: {}", out.join("metrics.json").display());
        }
        Command::Ft { data, checkpoint, .. } => {
            let out = commands::out_dir(cli.out, &cfg, Some("ft"));
            let r = commands::ft(&cfg, data, &checkpoint, &out)?;
            for row in &r.report.rows {
                println!("rho {:<4}  mAP3D {:.4} ± {:.4}  mAPBEV {:.4} ± {:.4}", row.rho, row.map_3d_mean, row.map_3d_std, row.map_bev_mean, row.map_bev_std);
            }
            println!("report: {}", out.join("ft.json").display());
        }
        Command::SweepRes { data, eval_data, .. } => {
            let out = commands::out_dir(cli.out, &cfg, Some("sweep"));
            let r = commands::sweep_res(&cfg, data, eval_data, &out)?;
            for row in &r.rows {
                println!(
                    "scale {:.2} {}x{} rdl {:<3}  3D {:.4} ({:+.2}%)  BEV {:.4} ({:+.2}%)",
                    row.scale,
                    row.image_size.0,
                    row.image_size.1,
                    if row.rdl { "on" } else { "off" },
                    row.map_3d,
                    row.delta_3d_pct,
                    row.map_bev,
                    row.delta_bev_pct
                );
            }
            println!("sweep: {}", out.join("sweep.csv").display());
        }
    }
    Ok(())
}
