//! The `triflow` command line: dataset generation, training, evaluation,
//! windowed inference, flow visualization, ablations and the self-test.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use triflow::config::RunConfig;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "triflow", version, about = "Multi-frame optical flow with tri-frame units")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// key=value config file, applied before any --set
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both training and data generation
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Write the held-out set (data.eval_count sequences) instead
        #[arg(long)]
        held_out: bool,
    },
    /// Train a model and write OUT/checkpoint.bin
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset written by gen-data; generated from the config when absent
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print metrics
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Dataset written by gen-data; the held-out set of the config when absent
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Refinement iterations; the checkpoint's train.iters when absent
        #[arg(long, value_name = "N")]
        iters: Option<usize>,
        /// Also measure the backward direction on reversed sequences
        #[arg(long)]
        reversed: bool,
        /// Print JSON instead of key=value lines
        #[arg(long)]
        json: bool,
    },
    /// Predict bi-directional flows for a directory of PNG frames
    Infer {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "N")]
        iters: Option<usize>,
    },
    /// Colorize .flo files
    Viz {
        /// .flo files or directories containing them
        #[arg(required = true, value_name = "FLOW")]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
        format: ImageFormat,
        /// Flow magnitude mapped to full saturation; the 99th percentile when absent
        #[arg(long, value_name = "PX")]
        max: Option<f32>,
    },
    /// Train and evaluate the baseline and each single-component ablation
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the table to this file
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the gradient and oracle suites
    Selftest {
        /// Seeds per gradient check
        #[arg(long, default_value_t = 5, value_name = "N")]
        seeds: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

/// A failed invocation, reported as a single line.
#[derive(Debug)]
pub struct Failure(String);

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<triflow::Error> for Failure {
    fn from(e: triflow::Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure(s)
    }
}

impl ConfigArgs {
    /// Defaults, then the config file, then `--seed`, then each `--set` in
    /// order.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        for assignment in &self.set {
            let (k, v) = triflow::config::split_assignment(assignment)?;
            cfg.set(k, v).map_err(|e| Failure(format!("--set {assignment}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("TRIFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(format!("TRIFLOW_THREADS: invalid value `{raw}`")))?;
    // A pool that already exists (e.g. in tests) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 1 on failure, 2 on usage
/// errors.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("triflow: {first}");
            return 2;
        }
    };
    let result = configure_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("triflow: error: {}", e.0.replace('\n', " "));
            1
        }
    }
}
