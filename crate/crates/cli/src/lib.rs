//! Command-line pipeline: extract, synth, rasterize, train, infer, eval.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use facseg::Error;

pub mod commands;
pub mod config;
pub mod record;

use commands::*;
use config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "facseg", version, about = "Multi-label facade segmentation pipeline")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render rectified facade images from footprints and photospheres.
    Extract(ExtractArgs),
    /// Generate procedural facades with annotations.
    Synth(SynthArgs),
    /// Turn annotations into NEG/UNK/POS/EDG masks and class weights.
    Rasterize(RasterizeArgs),
    /// Train a network on images and masks.
    Train(TrainArgs),
    /// Predict probability maps for full-size images.
    Infer(InferArgs),
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Extract(a) => {
            let log = cmd_extract(&cfg, a)?;
            println!("{} images from {} walls and {} photospheres", log.images, log.quads, log.spheres);
        }
        Command::Synth(a) => {
            let n = cmd_synth(&cfg, a)?;
            println!("{n} facades");
        }
        Command::Rasterize(a) => {
            let n = cmd_rasterize(&cfg, a)?;
            println!("{n} masks");
        }
        Command::Train(a) => {
            let s = cmd_train(&cfg, a)?;
            match s.final_loss {
                Some(l) => println!("{} iterations, final loss {l:.5}: {}", s.iterations, s.checkpoint.display()),
                None => println!("0 iterations: {}", s.checkpoint.display()),
            }
        }
        Command::Infer(a) => {
            let n = cmd_infer(&cfg, a)?;
            println!("{n} images");
        }
        Command::Eval(a) => {
            let r = cmd_eval(&cfg, a)?;
            print!("{}", r.to_csv());
        }
    }
    Ok(())
}
