//! Command implementations behind the `vidflow` binary.

pub mod plots;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use serde_json::json;

use vidflow::config::{RunConfig, KEYS};
use vidflow::data::{Palette, Sample};
use vidflow::io::{load_dataset, read_frame_png, read_label_png, write_frame_png, write_sflo};
use vidflow::metrics::{evaluate, MetricsReport};
use vidflow::pipeline::{
    generate, load_model, predict_from_frame, predict_posterior, read_log, run_ablation, train, ColorizeBaseline,
    Generated, TrainOptions, Variant, LOG_FILE,
};
use vidflow::synthgen::{make_dataset, DatasetSpec};
use vidflow::viz::flow_to_rgb;

/// Environment variable naming the run configuration file.
pub const CONFIG_ENV: &str = "VIDFLOW_CONFIG";

/// `--config` plus one flag per run configuration key.
#[derive(Clone, Debug, Default)]
pub struct ConfigArgs {
    pub path: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    /// Defaults, then the config file (`--config`, else the environment
    /// variable), then per-key flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let path = self.path.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match &path {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        if let Some(p) = m.get_one::<PathBuf>("config") {
            self.path = Some(p.clone());
        }
        for key in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help(format!("Run configuration file (falls back to ${CONFIG_ENV})")),
        );
        KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .help_heading("Run configuration")
                    .help(format!("Override `{key}`")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

pub fn datagen(root: &Path, spec: &DatasetSpec) -> Result<()> {
    make_dataset(root, spec).with_context(|| format!("writing dataset to {}", root.display()))?;
    Ok(())
}

pub fn load_samples(root: &Path) -> Result<Vec<Sample>> {
    let s = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
    if s.is_empty() {
        bail!("dataset {} is empty", root.display());
    }
    Ok(s)
}

pub fn run_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<PathBuf>, progress_every: u64) -> Result<PathBuf> {
    let samples = load_samples(data)?;
    let o = train(cfg, &samples, out, &TrainOptions { resume, progress_every })?;
    Ok(o.checkpoint)
}

/// Writes frames, flow images and raw flows/masks of each generated video
/// into `out/sample_XX`.
pub fn write_generated(out: &Path, videos: &[Generated]) -> Result<()> {
    for (k, v) in videos.iter().enumerate() {
        let dir = out.join(format!("sample_{k:02}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for t in 0..=v.frames.steps() {
            write_frame_png(&dir.join(format!("frame_{t:02}.png")), &v.frames.frame(t))?;
        }
        let flows = &v.prediction.flows;
        for t in 0..flows.steps() {
            let rgb = flow_to_rgb(&flows.backward.index0(t), None)?;
            write_frame_png(&dir.join(format!("flow_bwd_{:02}.png", t + 1)), &rgb)?;
        }
        write_sflo(&dir.join("flow_fwd.sflo"), &flows.forward)?;
        write_sflo(&dir.join("flow_bwd.sflo"), &flows.backward)?;
        write_sflo(&dir.join("occ_fwd.sflo"), &v.prediction.occlusions.forward)?;
        write_sflo(&dir.join("occ_bwd.sflo"), &v.prediction.occlusions.backward)?;
    }
    Ok(())
}

pub fn run_generate(checkpoint: &Path, label: &Path, samples: usize, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(checkpoint, None)?;
    let c = &model.config;
    let label = read_label_png(label, c.num_classes, &c.fg_classes)?;
    let i2i = ColorizeBaseline {
        palette: Palette::standard(c.num_classes),
    };
    let videos = generate(&model, &label, &i2i, samples, seed)?;
    write_generated(out, &videos)
}

pub fn run_predict(
    checkpoint: &Path,
    frame: &Path,
    label: Option<&Path>,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint, None)?;
    let c = &model.config;
    let i0 = read_frame_png(frame)?;
    let label = label.map(|p| read_label_png(p, c.num_classes, &c.fg_classes)).transpose()?;
    let videos = predict_from_frame(&model, &i0, label.as_ref(), samples, seed)?;
    write_generated(out, &videos)
}

pub fn run_eval(checkpoint: &Path, data: &Path, diversity_samples: usize, draws: usize, seed: u64) -> Result<MetricsReport> {
    let model = load_model(checkpoint, None)?;
    let samples = load_samples(data)?;
    Ok(evaluate(&model, &samples, diversity_samples, draws, seed)?)
}

/// Trains and evaluates each variant under `out/<variant>` and writes a
/// summary table to `out/ablation.json`.
pub fn run_ablate(cfg: &RunConfig, variants: &[Variant], train_dir: &Path, test_dir: &Path, out: &Path, progress_every: u64) -> Result<serde_json::Value> {
    let train_set = load_samples(train_dir)?;
    let test_set = load_samples(test_dir)?;
    let mut rows = Vec::new();
    for &v in variants {
        let opts = TrainOptions {
            resume: None,
            progress_every,
        };
        let r = run_ablation(v, cfg, &train_set, &test_set, &out.join(v.name()), &opts)?;
        let last = r.report.per_step.last().cloned().unwrap_or_default();
        rows.push(json!({
            "variant": v.name(),
            "epe": r.report.mean.epe,
            "epe_fg": r.report.mean.epe_fg,
            "psnr_last": last.psnr,
            "ssim_last": last.ssim,
            "diversity": r.report.diversity,
        }));
    }
    let table = json!({ "seed": cfg.seed, "train_steps": cfg.train_steps, "variants": rows });
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

/// Plots for a run directory and a report; with a checkpoint and a dataset
/// also frame strips for the first `strips` samples.
pub fn run_plot(
    run_dir: &Path,
    report: &Path,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    strips: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let log = read_log(&run_dir.join(LOG_FILE))?;
    let text = std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let report: MetricsReport = serde_json::from_str(&text).context("parsing metrics report")?;
    let (samples, preds) = match (checkpoint, data) {
        (Some(c), Some(d)) if strips > 0 => {
            let model = load_model(c, None)?;
            let samples: Vec<Sample> = load_samples(d)?.into_iter().take(strips).collect();
            let preds = predict_posterior(&model, &samples, 8)?;
            (samples, Some(preds))
        }
        _ => (Vec::new(), None),
    };
    let inputs: Vec<plots::StripInput<'_>> = match &preds {
        Some(p) => samples
            .iter()
            .zip(&p.sequences)
            .zip(&p.predictions)
            .map(|((s, seq), pr)| plots::StripInput {
                truth: &s.frames,
                predicted: seq,
                truth_flow: &s.flows.backward,
                predicted_flow: &pr.flows.backward,
                predicted_mask: Some(&pr.occlusions.backward),
            })
            .collect(),
        None => Vec::new(),
    };
    plots::make_plots(&log, &report, &inputs, out)
}
