//! `quad`: calibrate, score, distill, compile, pack, run and benchmark
//! shared-graph multi-adapter models.
//!
//! Exit codes: 0 on success, 1 when a pipeline stage fails, 2 for usage or
//! input errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "quad", version, about = "Shared-graph multi-LoRA quantization and deployment")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for data generation, shuffling and artifact metadata [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// w8a16, w8a8 or mixed:<percent> [default: w8a16].
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Bit width of packed adapter factors [default: 8].
    #[arg(long = "lora-bits", global = true, value_parser = ["8", "16"])]
    pub lora_bits: Option<String>,
    /// Relative QSS spread below which adapters count as equally sensitive [default: 0.05].
    #[arg(long = "tie-eps", global = true)]
    pub tie_eps: Option<f64>,
    /// Optional `key = value` file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Model definition, sample directory and adapter directory.
#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Model definition (.qdef).
    #[arg(long)]
    pub def: Option<PathBuf>,
    /// Directory of sample files (.qds).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of adapter files (.qla); defaults to the adapters declared in the definition.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DistillOpts {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Weight of the task loss; needs samples with targets [default: 0].
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Write seeded samples and the definition's adapters to a directory.
    Init {
        #[arg(long)]
        def: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Calibrate one profile per adapter plus the unified profile.
    Calibrate {
        #[command(flatten)]
        inputs: Inputs,
        /// Output directory for `<adapter>.profile` and `unified.profile`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score adapters, pick the anchor and write the shared profile.
    Qss {
        #[command(flatten)]
        inputs: Inputs,
        /// Directory written by `calibrate`.
        #[arg(long)]
        profiles: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
        /// Shared profile file [default: shared.profile next to the report].
        #[arg(long)]
        shared: Option<PathBuf>,
    },
    /// Align every non-anchor adapter to the shared profile.
    Distill {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        profile: PathBuf,
        /// QSS report; its anchor adapter is copied through untouched.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: DistillOpts,
    },
    /// Compile the definition under a shared profile into a .quadm file.
    Compile {
        #[arg(long)]
        def: Option<PathBuf>,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack adapters against a compiled model's slots.
    PackLora {
        /// Compiled model (.quadm).
        #[arg(long)]
        model: PathBuf,
        /// Directory of adapter files (.qla).
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Single adapter file; may be repeated.
        #[arg(long = "adapter")]
        adapter: Vec<PathBuf>,
        /// Output directory for `<adapter>.qlp`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference over a sample directory with one pack bound.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for `<sample>.qtn` tensors.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure load, bind and inference times and report ROM/RAM figures.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        packs: Vec<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long = "workload-dir")]
        workload_dir: Option<PathBuf>,
        /// Key-sorted text report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print header fields and section sizes of a .quadm or .qlp file.
    Inspect { file: PathBuf },
    /// Run every stage from calibration to benchmarking.
    Pipeline {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: DistillOpts,
        #[arg(long)]
        reps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
