//! Loss curves, per-step metric charts and frame strips.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, ensure, Context, Result};
use image::RgbImage;
use plotters::prelude::*;
use plotters::style::FontStyle;

use vidflow::data::FrameSequence;
use vidflow::metrics::MetricsReport;
use vidflow::pipeline::LogRecord;
use vidflow::tensor::Tensor;
use vidflow::viz::{flow_to_rgb, frame_strip, gray_to_rgb, save_rgb};

const SIZE: (u32, u32) = (720, 440);

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers the first readable system font. Charts are drawn without
/// text when none is found.
fn has_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

struct Series {
    name: &'static str,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, log_y: bool, series: &[Series]) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    ensure!(!pts.is_empty(), "nothing to plot for {title}");
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let floor = 1e-8;
    let ys = pts.iter().map(|p| if log_y { p.1.max(floor) } else { p.1 });
    let (mut y0, mut y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), y| (a.min(y), b.max(y)));
    if log_y {
        y0 *= 0.8;
        y1 *= 1.25;
    } else {
        let pad = ((y1 - y0) * 0.08).max(1e-3);
        y0 -= pad;
        y1 += pad;
    }

    let text = has_font();
    let mut buf = vec![255u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        root.fill(&WHITE)?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(16);
        if text {
            builder.caption(title, ("sans-serif", 20)).x_label_area_size(40).y_label_area_size(64);
        }
        macro_rules! draw {
            ($chart:expr) => {{
                let mut chart = $chart;
                let mut mesh = chart.configure_mesh();
                if text {
                    mesh.x_desc(x_desc).y_desc(y_desc);
                } else {
                    mesh.x_labels(0).y_labels(0);
                }
                mesh.draw()?;
                for s in series {
                    let pts = s.points.iter().map(|&(x, y)| (x, if log_y { y.max(floor) } else { y }));
                    let drawn = chart.draw_series(LineSeries::new(pts.clone(), s.color.stroke_width(2)))?;
                    if text {
                        let c = s.color;
                        drawn.label(s.name).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
                    }
                    if s.points.len() <= 32 {
                        chart.draw_series(pts.map(|p| Circle::new(p, 3, s.color.filled())))?;
                    }
                }
                if text {
                    chart
                        .configure_series_labels()
                        .background_style(WHITE.mix(0.85))
                        .border_style(BLACK)
                        .draw()?;
                }
            }};
        }
        if log_y {
            draw!(builder.build_cartesian_2d(x0..x1, (y0..y1).log_scale())?);
        } else {
            draw!(builder.build_cartesian_2d(x0..x1, y0..y1)?);
        }
        root.present()?;
    }
    let img = RgbImage::from_raw(SIZE.0, SIZE.1, buf).context("plot buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Training loss curves on a log axis.
pub fn plot_loss(log: &[LogRecord], path: &Path) -> Result<()> {
    ensure!(!log.is_empty(), "empty loss log");
    let pick = |f: fn(&LogRecord) -> f64| log.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    let series = [
        Series { name: "total", color: BLACK, points: pick(|r| r.loss.total) },
        Series { name: "recon", color: RED, points: pick(|r| r.loss.l_r) },
        Series { name: "pixel L1", color: BLUE, points: pick(|r| r.loss.l_l1_pixel) },
        Series { name: "KL", color: GREEN, points: pick(|r| r.loss.l_kl) },
    ];
    line_chart(path, "Training loss", "step", "loss", true, &series)
}

/// Endpoint error against the zero-flow baseline, per step.
pub fn plot_epe(report: &MetricsReport, path: &Path) -> Result<()> {
    ensure!(!report.per_step.is_empty(), "metrics report has no steps");
    let pick = |f: fn(&vidflow::metrics::StepMetrics) -> f64| {
        report.per_step.iter().map(|m| (m.t as f64, f(m))).collect::<Vec<_>>()
    };
    let series = [
        Series { name: "model", color: RED, points: pick(|m| m.epe) },
        Series { name: "model, foreground", color: MAGENTA, points: pick(|m| m.epe_fg) },
        Series { name: "zero flow", color: BLACK, points: pick(|m| m.epe_zero) },
    ];
    line_chart(path, "Backward flow EPE", "t", "EPE (px)", false, &series)
}

/// PSNR of composed frames against copying `I_0`, per step.
pub fn plot_psnr(report: &MetricsReport, path: &Path) -> Result<()> {
    ensure!(!report.per_step.is_empty(), "metrics report has no steps");
    let pick = |f: fn(&vidflow::metrics::StepMetrics) -> f64| {
        report.per_step.iter().map(|m| (m.t as f64, f(m))).collect::<Vec<_>>()
    };
    let series = [
        Series { name: "model", color: BLUE, points: pick(|m| m.psnr) },
        Series { name: "copy I0", color: BLACK, points: pick(|m| m.psnr_copy) },
    ];
    line_chart(path, "Frame PSNR", "t", "PSNR (dB)", false, &series)
}

/// Ground truth and prediction for one sample.
pub struct StripInput<'a> {
    pub truth: &'a FrameSequence,
    pub predicted: &'a FrameSequence,
    /// `[T, 2, H, W]` backward flows.
    pub truth_flow: &'a Tensor<f32>,
    pub predicted_flow: &'a Tensor<f32>,
    /// `[T, 1, H, W]` predicted backward masks.
    pub predicted_mask: Option<&'a Tensor<f32>>,
}

/// Rows: true frames, predicted frames, true flow, predicted flow and
/// optionally the predicted mask. One column per step `t = 1..T`.
pub fn strip_image(input: &StripInput<'_>) -> Result<RgbImage> {
    let steps = input.truth.steps();
    ensure!(steps > 0, "sequence has no steps");
    ensure!(input.predicted.steps() == steps, "predicted sequence has a different length");
    let radius = (0..steps)
        .map(|t| max_radius(&input.truth_flow.index0(t)).max(max_radius(&input.predicted_flow.index0(t))))
        .fold(0.0f32, f32::max);
    let radius = Some(radius.max(1e-3));
    let mut rows = vec![
        (1..=steps).map(|t| input.truth.frame(t)).collect::<Vec<_>>(),
        (1..=steps).map(|t| input.predicted.frame(t)).collect(),
    ];
    rows.push((0..steps).map(|t| flow_to_rgb(&input.truth_flow.index0(t), radius)).collect::<vidflow::error::Result<_>>()?);
    rows.push((0..steps).map(|t| flow_to_rgb(&input.predicted_flow.index0(t), radius)).collect::<vidflow::error::Result<_>>()?);
    if let Some(m) = input.predicted_mask {
        rows.push((0..steps).map(|t| gray_to_rgb(&m.index0(t))).collect::<vidflow::error::Result<_>>()?);
    }
    Ok(frame_strip(&rows, 2)?)
}

fn max_radius(flow: &Tensor<f32>) -> f32 {
    let plane = flow.numel() / 2;
    let d = flow.data();
    (0..plane).map(|p| d[p].hypot(d[plane + p])).fold(0.0, f32::max)
}

/// Writes every plot the inputs allow into `out_dir` and returns the paths.
/// An empty log or report is an error rather than a blank image.
pub fn make_plots(
    log: &[LogRecord],
    report: &MetricsReport,
    strips: &[StripInput<'_>],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if log.is_empty() {
        bail!("empty loss log");
    }
    if report.per_step.is_empty() {
        bail!("metrics report has no steps");
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut out = Vec::new();
    let p = out_dir.join("loss_curve.png");
    plot_loss(log, &p)?;
    out.push(p);
    let p = out_dir.join("epe_per_step.png");
    plot_epe(report, &p)?;
    out.push(p);
    let p = out_dir.join("psnr_per_step.png");
    plot_psnr(report, &p)?;
    out.push(p);
    for (i, s) in strips.iter().enumerate() {
        let p = out_dir.join(format!("strip_{i:02}.png"));
        save_rgb(&p, &strip_image(s)?)?;
        out.push(p);
    }
    Ok(out)
}
