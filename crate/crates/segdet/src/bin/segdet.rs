//! Command-line frontend over the pipeline functions.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 numerical failure (non-finite loss).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segdet::error::Error;
use segdet::metrics::Method;
use segdet::pipeline::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "segdet", version, about = "Segmentation-by-detection cascade on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (line-oriented `key = value`); defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory for SVOL files and manifest.tsv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the detection stage (SGD over per-slice anchor minibatches).
    TrainRpn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint; iterations resume at its counter.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Train the segmentation stage in one of the three comparison modes.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// attention (default), mask3d, or plain.
        #[arg(long, value_name = "MODE", default_value = "attention")]
        mode: String,
        /// RPN checkpoint (required in attention mode unless
        /// seg.oracle_attention is set).
        #[arg(long, value_name = "CKPT")]
        rpn: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Run the cascade on one volume file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        rpn: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        seg: PathBuf,
        #[arg(long, value_name = "FILE")]
        volume: PathBuf,
        /// Label volume; needed by annotation-derived masks (mask3d,
        /// oracle attention).
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Output prefix; writes `<prefix>.attention.svol` and
        /// `<prefix>.pred.svol`.
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Evaluate segmentation checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "CKPT")]
        rpn: Option<PathBuf>,
        /// One or more segmentation checkpoints (repeat the flag).
        #[arg(long = "seg", value_name = "CKPT", required = true)]
        seg: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train all three modes from shared seeds and emit the comparison
    /// table plus per-mode loss curves.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn parse_mode(mode: &str) -> Result<Method, Error> {
    match mode {
        "attention" => Ok(Method::Attention),
        "mask3d" => Ok(Method::Mask3d),
        "plain" => Ok(Method::PlainUnet),
        other => Err(Error::Usage(format!(
            "unknown mode '{other}' (expected attention, mask3d or plain)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let manifest = pipeline::cmd_gen_data(&cfg, &out)?;
            println!(
                "wrote {} phantoms ({} train / {} test) to {}",
                manifest.entries.len(),
                cfg.data.n_train,
                cfg.data.n_test,
                out.display()
            );
        }
        Command::TrainRpn { common, manifest, out, resume } => {
            let cfg = common.load()?;
            let result = pipeline::cmd_train_rpn(&cfg, &manifest, &out, resume.as_deref())?;
            let last = result.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
            println!("rpn trained for {} iterations, final loss {last:.4}", cfg.rpn_iters);
            println!("checkpoint: {}", result.final_ckpt.display());
        }
        Command::TrainSeg { common, manifest, mode, rpn, out, resume } => {
            let cfg = common.load()?;
            let method = parse_mode(&mode)?;
            let result = pipeline::cmd_train_seg(&cfg, &manifest, method, rpn.as_deref(), &out, resume.as_deref())?;
            let last = result.loss_log.last().map_or(f64::NAN, |&(_, l)| l);
            println!("{} trained for {} iterations, final loss {last:.4}", method.tag(), cfg.seg.iters);
            println!("checkpoint: {}", result.final_ckpt.display());
            if let (Some(best), Some(iter)) = (&result.best_ckpt, result.best_iter) {
                println!("best checkpoint (validation IoU): {} at iteration {iter}", best.display());
            }
        }
        Command::Infer { common, rpn, seg, volume, labels, out } => {
            let cfg = common.load()?;
            let written = pipeline::cmd_infer(&cfg, rpn.as_deref(), &seg, &volume, labels.as_deref(), &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { common, manifest, rpn, seg, out } => {
            let cfg = common.load()?;
            let reports = pipeline::cmd_eval(&cfg, &manifest, rpn.as_deref(), &seg, &out)?;
            print!("{}", segdet::metrics::comparison_table(&reports));
        }
        Command::Compare { common, manifest, out } => {
            let cfg = common.load()?;
            let reports = pipeline::cmd_compare(&cfg, &manifest, &out)?;
            print!("{}", segdet::metrics::comparison_table(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
