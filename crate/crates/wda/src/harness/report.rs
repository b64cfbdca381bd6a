//! Rendering of training logs and evaluation reports to PNG or SVG:
//! loss curves per log file, grouped metric bars per report.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::eval::EvalBundle;
use super::{read_jsonl, IterLog};
use crate::error::{Result, WdaError};

fn perr<E: std::fmt::Display>(e: E) -> WdaError {
    WdaError::Invalid(format!("plot: {e}"))
}

/// Registers a text face for the plotting backend once per process.
/// Looks for a system TTF, or takes an explicit path from `WDA_FONT`.
fn ensure_fonts() -> Result<()> {
    use std::sync::OnceLock;
    static READY: OnceLock<bool> = OnceLock::new();
    let ok = *READY.get_or_init(|| {
        let mut candidates: Vec<PathBuf> = Vec::new();
        if let Ok(p) = std::env::var("WDA_FONT") {
            candidates.push(p.into());
        }
        candidates.extend(
            [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
                "/usr/share/fonts/liberation/LiberationSans-Regular.ttf",
            ]
            .iter()
            .map(PathBuf::from),
        );
        for p in candidates {
            if let Ok(bytes) = std::fs::read(&p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                let style = plotters::style::FontStyle::Normal;
                if plotters::style::register_font("sans-serif", style, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    });
    if ok {
        Ok(())
    } else {
        Err(WdaError::Invalid(
            "no usable TTF font found for report text; set WDA_FONT to a .ttf file".into(),
        ))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "?".into())
}

struct LossSeries {
    name: String,
    points: Vec<(f64, f64)>,
}

struct MetricGroup {
    name: String,
    dice: f64,
    aji: f64,
    pq: f64,
}

fn load_inputs(logs: &[PathBuf], evals: &[PathBuf]) -> Result<(Vec<LossSeries>, Vec<MetricGroup>)> {
    let mut series = Vec::new();
    for p in logs {
        let recs: Vec<IterLog> = read_jsonl(p)?;
        if recs.is_empty() {
            return Err(WdaError::Invalid(format!("{}: empty log", p.display())));
        }
        series.push(LossSeries {
            name: stem(p),
            points: recs.iter().map(|r| (r.z as f64, r.total)).collect(),
        });
    }
    let mut groups = Vec::new();
    for p in evals {
        let text = std::fs::read_to_string(p)?;
        let bundle: EvalBundle = serde_json::from_str(&text)?;
        groups.push(MetricGroup {
            name: format!("{} ({})", stem(p), bundle.split),
            dice: bundle.report.dice,
            aji: bundle.report.aji,
            pq: bundle.report.pq,
        });
    }
    Ok((series, groups))
}

fn draw_curves<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    series: &[LossSeries],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let x_max = series
        .iter()
        .flat_map(|s| s.points.last())
        .map(|&(x, _)| x)
        .fold(1.0f64, f64::max);
    let y_max = series
        .iter()
        .flat_map(|s| &s.points)
        .map(|&(_, y)| y)
        .fold(f64::MIN, f64::max)
        .max(1e-6);
    let mut chart = ChartBuilder::on(area)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max * 1.05)
        .map_err(perr)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("total loss")
        .draw()
        .map_err(perr)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(perr)?
            .label(s.name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(perr)?;
    Ok(())
}

fn draw_bars<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    groups: &[MetricGroup],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    // Three bars per group (dice, aji, pq) with one slot of spacing.
    let slots = (groups.len() * 4) as i32;
    let mut chart = ChartBuilder::on(area)
        .caption("evaluation metrics", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d(0i32..slots.max(1), 0.0..1.0f64)
        .map_err(perr)?;
    let names: Vec<String> = groups.iter().map(|g| g.name.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("score")
        .x_labels(groups.len())
        .x_label_formatter(&move |x| {
            let gi = (*x as usize) / 4;
            if *x as usize % 4 == 1 {
                names.get(gi).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(perr)?;
    let palette = [Palette99::pick(0), Palette99::pick(1), Palette99::pick(2)];
    for (gi, g) in groups.iter().enumerate() {
        for (mi, v) in [g.dice, g.aji, g.pq].into_iter().enumerate() {
            let x0 = (gi * 4 + mi) as i32;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x0, 0.0), (x0 + 1, v)],
                    palette[mi].to_rgba().filled(),
                )))
                .map_err(perr)?;
        }
    }
    for (mi, label) in ["dice", "aji", "pq"].into_iter().enumerate() {
        let color = palette[mi].to_rgba();
        chart
            .draw_series(std::iter::empty::<Rectangle<(i32, f64)>>())
            .map_err(perr)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 12, y + 4)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(perr)?;
    Ok(())
}

fn draw_all<DB: DrawingBackend>(
    root: DrawingArea<DB, plotters::coord::Shift>,
    series: &[LossSeries],
    groups: &[MetricGroup],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(perr)?;
    match (series.is_empty(), groups.is_empty()) {
        (false, false) => {
            let (top, bottom) = root.split_vertically(50.percent());
            draw_curves(&top, series)?;
            draw_bars(&bottom, groups)?;
        }
        (false, true) => draw_curves(&root, series)?,
        (true, false) => draw_bars(&root, groups)?,
        (true, true) => {
            return Err(WdaError::Config("report: no logs and no evaluations given".into()))
        }
    }
    root.present().map_err(perr)?;
    Ok(())
}

/// Renders loss curves (one per log) and metric bars (one group per
/// evaluation report) into `out`; the extension picks PNG or SVG.
pub fn render_report(logs: &[PathBuf], evals: &[PathBuf], out: &Path) -> Result<()> {
    ensure_fonts()?;
    let (series, groups) = load_inputs(logs, evals)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let size = (1000u32, 700u32);
    match out.extension().and_then(|e| e.to_str()) {
        Some("png") => draw_all(BitMapBackend::new(out, size).into_drawing_area(), &series, &groups),
        Some("svg") => draw_all(SVGBackend::new(out, size).into_drawing_area(), &series, &groups),
        other => Err(WdaError::Config(format!(
            "report: unsupported output extension {:?} (use .png or .svg)",
            other.unwrap_or("")
        ))),
    }
}
