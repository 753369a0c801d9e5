//! `fusionnet` command line.
//!
//! Exit codes: 0 success, 1 failed check or aborted run, 2 usage error
//! (bad flags, missing input files).

mod ablate;
mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fusionnet", version, about = "Multi-spectral scene classification with trainable signal-processing layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic chip dataset plus manifest.
    Synth {
        /// Number of cement sites.
        #[arg(long)]
        cement: usize,
        /// Number of landcover sites.
        #[arg(long)]
        landcover: usize,
        /// Band to generate, or `all` for the five-band fused set.
        #[arg(long)]
        band: String,
        /// Chip edge length in pixels.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["32", "256"]))]
        size: String,
        /// Master seed; everything derives from it.
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Signal-to-noise preset.
        #[arg(long, default_value = "separable", value_parser = clap::builder::PossibleValuesParser::new(["separable", "hard"]))]
        preset: String,
        /// Number of split repetitions stored in the manifest.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split, or compute metrics
    /// from raw confusion-matrix counts.
    Eval {
        #[arg(long, required_unless_present = "from_counts")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "from_counts")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 1)]
        rep: usize,
        /// Metrics-from-counts mode: four comma-separated confusion
        /// entries, cement row first (tp,fn,fp,tn as cc,cl,lc,ll).
        #[arg(long)]
        from_counts: Option<String>,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation suite described by a JSON file and emit the
    /// variant-by-band mean-accuracy table.
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        /// Overrides the output directory from the suite file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a class activation map for one chip as 16-bit PGM plus a
    /// raw f32 sidecar.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One chip for backbone checkpoints; five (band order
        /// b11,b10,b7,b6,b76) for fusion checkpoints with --branch.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        chip: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fusion branch index (0..5) for the attention-weighted branch map.
        #[arg(long)]
        branch: Option<usize>,
    },
    /// Finite-difference gradient checks; exits 1 if any op fails.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = fusionnet_core::util::thread_cap();
    let result = match cli.command {
        Command::Synth {
            cement,
            landcover,
            band,
            size,
            seed,
            out,
            preset,
            reps,
        } => commands::synth(cement, landcover, &band, &size, seed, &out, &preset, reps, threads),
        Command::Train { config, out } => commands::train(&config, out.as_deref(), threads),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            rep,
            from_counts,
            out,
        } => commands::eval(
            checkpoint.as_deref(),
            manifest.as_deref(),
            &split,
            rep,
            from_counts.as_deref(),
            out.as_deref(),
            threads,
        ),
        Command::Ablate { suite, out } => ablate::run(&suite, out.as_deref(), threads),
        Command::Cam {
            checkpoint,
            chip,
            out,
            branch,
        } => commands::cam(&checkpoint, &chip, &out, branch),
        Command::Gradcheck { module } => commands::gradcheck(&module),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
