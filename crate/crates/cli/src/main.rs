use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use vidflow::pipeline::Variant;
use vidflow::synthgen::{DatasetSpec, SceneFamily};
use vidflow_cli::{
    datagen, run_ablate, run_eval, run_generate, run_plot, run_predict, run_train, ConfigArgs,
};

#[derive(Parser)]
#[command(name = "vidflow", version, about = "Label map to video generation through predicted optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    Datagen {
        /// translate-1, multi-3, static or flat.
        #[arg(long, default_value = "translate-1")]
        family: SceneFamily,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "progress_every", default_value_t = 50)]
        progress_every: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Label map to videos via the colourising image stage.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grey PNG of class ids.
        #[arg(long)]
        label: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Videos from a given first frame.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate model variants under one configuration.
    Ablate {
        /// no_flow, no_semantic, concat_semantic, split_semantic; all when omitted.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "progress_every", default_value_t = 0)]
        progress_every: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Metrics report of a checkpoint on a dataset, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "diversity_samples", default_value_t = 8)]
        diversity_samples: usize,
        #[arg(long, default_value_t = 8)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss curve, per-step metric charts and frame strips.
    Plot {
        /// Training directory holding the loss log.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        strips: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Datagen { family, samples, seed, height, width, t, out } => {
            let spec = DatasetSpec { family, samples, seed, height, width, steps: t };
            datagen(&out, &spec)?;
            println!("wrote {samples} samples to {}", out.display());
        }
        Cmd::Train { data, out, resume, progress_every, config } => {
            let cfg = config.resolve()?;
            let ckpt = run_train(&cfg, &data, &out, resume, progress_every)?;
            println!("{}", ckpt.display());
        }
        Cmd::Generate { checkpoint, label, samples, seed, out } => {
            run_generate(&checkpoint, &label, samples, seed, &out)?;
        }
        Cmd::Predict { checkpoint, frame, label, samples, seed, out } => {
            run_predict(&checkpoint, &frame, label.as_deref(), samples, seed, &out)?;
        }
        Cmd::Ablate { variants, data, test, out, progress_every, config } => {
            let cfg = config.resolve()?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let table = run_ablate(&cfg, &variants, &data, &test, &out, progress_every)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        Cmd::Eval { checkpoint, data, diversity_samples, draws, seed, out } => {
            let report = run_eval(&checkpoint, &data, diversity_samples, draws, seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => println!("{text}"),
            }
        }
        Cmd::Plot { run, report, checkpoint, data, strips, out } => {
            for p in run_plot(&run, &report, checkpoint.as_deref(), data.as_deref(), strips, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
