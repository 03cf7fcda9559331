//! Command-line front end. Diagnostics go to stderr; machine-readable outputs
//! only to files.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::synth::FramePreset;
use crate::data::{generate_corpus, CorpusConfig};
use crate::error::{Error, Result};
pub use config::{FoldConfig, NetConfig, RunConfig};
pub use stages::{FoldResult, Layout, RunAllOptions};

const CONFIG_HELP: &str = "\
Configuration is a TOML file with optional sections [hpm], [net], [distill],
[tune] and [folds]; any field may be omitted. Defaults:
  hpm.h = 2, hpm.tau_h = 0.15, hpm.dmax_factor = 1.5, hpm.nlm = {patch 5, search 11, strength 0.08}
  net.input_size = 32, net.widths = [8, 16, 32], net.decoder_width = 8
  distill.alpha = 1, distill.beta = 1
  distill.ema_decay = 0.99, batch_size = 16, fine_iterations = 300, coarse_iterations = 400,
    lr = 0.001, milestones = [] (epochs), lr_decay = 0.1, policy = \"aid\", mask_threshold = 0.5
  tune.lambda = 0.85, loss = \"soft\", batch_size = 8, epochs = 60,
    lr = 0.003, milestones = [50], lr_decay = 0.1, policy = \"scian-mild\",
    start_dilations = 15, end_dilations = 0, tta = \"flip\"
    (tta also accepts \"identity\", \"rot4\" and \"d4\"; quarter turns suit unaligned crops)
  folds.k = 5, folds.seed = 0
Full-scale training uses batch 128 for 2500 pretraining iterations; set
distill.batch_size and distill.fine_iterations to reproduce that scale.
Stage seeds are derived from --seed and the fold; seed fields in the file are overridden.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.";

#[derive(Debug, Parser)]
#[command(name = "headmorph", version, about = "Sperm-head morphology: pseudo-masks, student-teacher pretraining, soft-label tuning", after_help = CONFIG_HELP)]
pub struct Cli {
    /// Worker threads (0 = all cores); 1 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set tune.lambda=0.9` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with images/, votes.csv and optional classes.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled corpus with a generating manifest.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Number of crops, split evenly over classes (ignored with --class-counts).
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Comma-separated per-class counts, e.g. 100,228,76,656,72.
        #[arg(long, value_delimiter = ',')]
        class_counts: Option<Vec<usize>>,
        #[arg(long)]
        seed: u64,
        /// desk64 (64x64 gray), scian35 (35x35 gray) or hushem131 (131x131 RGB).
        #[arg(long, default_value = "desk64")]
        frame: String,
        /// Gaussian noise sigma.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Probability that one of three experts dissents.
        #[arg(long, default_value_t = 0.2)]
        dissent: f64,
    },
    /// Compute hierarchical pseudo-masks for every labeled crop into <out>/masks/.
    Masks {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Student-teacher pretraining on one fold; writes <out>/fold<F>/pretrain/.
    Pretrain {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Soft-label tuning on one fold; writes <out>/fold<F>/tune/.
    Tune {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        seed: u64,
        /// Start from random weights and pseudo-masks instead of the pretrained teacher.
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Evaluate the tuned classifier on the fold's held-out crops; writes <out>/fold<F>/eval/.
    Eval {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fold: usize,
    },
    /// Render source crop, pseudo-masks and (with --fold) the teacher mask side by side.
    Overlay {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        fold: Option<usize>,
        /// Output PNG path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Masks, then pretrain, tune and eval for every fold; writes metrics.csv and summary.csv.
    RunAll {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Repeated runs with seeds seed, seed+1, ...; each gets <out>/run<r>/.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Comma-separated subset of folds.
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        #[arg(long)]
        no_pretrain: bool,
    },
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth {
            out,
            n,
            classes,
            class_counts,
            seed,
            frame,
            noise,
            dissent,
        } => {
            let frame = FramePreset::by_name(&frame)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown frame preset {frame:?}")))?;
            let cfg = CorpusConfig {
                n,
                num_classes: classes,
                class_counts,
                frame,
                noise,
                dissent_rate: dissent,
                seed,
            };
            let entries = generate_corpus(&cfg, &out)?;
            log::info!("wrote {} crops to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Masks { io, cfg } => {
            let cfg = cfg.load()?;
            stages::compute_masks(&Layout::new(&io.data, &io.out), &cfg).map(|_| ())
        }
        Command::Pretrain {
            io,
            cfg,
            fold,
            seed,
        } => {
            let cfg = cfg.load()?;
            stages::pretrain_fold(&Layout::new(&io.data, &io.out), &cfg, seed, fold).map(|_| ())
        }
        Command::Tune {
            io,
            cfg,
            fold,
            seed,
            no_pretrain,
        } => {
            let cfg = cfg.load()?;
            stages::tune_fold(
                &Layout::new(&io.data, &io.out),
                &cfg,
                seed,
                fold,
                !no_pretrain,
            )
        }
        Command::Eval { io, cfg, fold } => {
            let cfg = cfg.load()?;
            stages::eval_fold(&Layout::new(&io.data, &io.out), &cfg, fold).map(|_| ())
        }
        Command::Overlay {
            io,
            id,
            fold,
            output,
        } => stages::overlay(&Layout::new(&io.data, &io.out), &id, fold, &output),
        Command::RunAll {
            io,
            cfg,
            seed,
            runs,
            folds,
            no_pretrain,
        } => {
            let cfg = cfg.load()?;
            let opts = RunAllOptions {
                seed,
                runs,
                folds,
                pretrained: !no_pretrain,
            };
            stages::run_all(&io.data, &io.out, &cfg, &opts).map(|_| ())
        }
    }
}

/// Parses `args`, runs the command on a pool of `--threads` workers and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 1;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(
            run([
                "headmorph",
                "pretrain",
                "--data",
                "x",
                "--out",
                "y",
                "--fold",
                "0"
            ]),
            1
        );
        assert_eq!(run(["headmorph", "bogus"]), 1);
        assert_eq!(run(["headmorph", "--help"]), 0);
    }

    #[test]
    fn missing_data_exits_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("none");
        let code = run([
            "headmorph".into(),
            "masks".into(),
            "--data".into(),
            data.into_os_string(),
            "--out".into(),
            dir.path().join("o").into_os_string(),
        ]);
        assert_eq!(code, 2);
    }
}
