//! PNG plots: metric curves, bar charts and labeled scatter plots.
//!
//! Text needs a TrueType font registered at runtime. `BITSIAM_FONT` may point
//! at one; otherwise common system locations are searched. Without a font the
//! plots are drawn without any text.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

const SIZE: (u32, u32) = (960, 640);

/// Registers a sans-serif font once; returns whether text can be drawn.
pub fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var("BITSIAM_FONT").ok();
        for p in env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied()) {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable TrueType font found; plots will carry no text");
        false
    })
}

fn perr(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// One labeled line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Marks the series as collapsed: drawn dashed-looking and suffixed.
    pub flagged: bool,
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line plot of several series with a legend.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let text = fonts_available();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut b = ChartBuilder::on(&root);
    b.margin(20).x_label_area_size(50).y_label_area_size(70);
    if text {
        b.caption(title, ("sans-serif", 28));
    }
    let mut chart = b.build_cartesian_2d(x0..x1, y0..y1).map_err(perr)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(perr)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let width = if s.flagged { 1 } else { 2 };
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.1.is_finite()).collect();
        let label = if s.flagged { format!("{} (collapsed)", s.label) } else { s.label.clone() };
        let drawn = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(width)))
            .map_err(perr)?;
        if text {
            drawn
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        if s.flagged {
            chart
                .draw_series(pts.iter().map(|&p| Cross::new(p, 4, color.stroke_width(1))))
                .map_err(perr)?;
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(perr)?;
    }
    root.present().map_err(perr)
}

/// Vertical bars, one per `(label, value)`.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    let text = fonts_available();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-9) * 1.1;
    let n = bars.len().max(1);
    let mut b = ChartBuilder::on(&root);
    b.margin(20).x_label_area_size(60).y_label_area_size(70);
    if text {
        b.caption(title, ("sans-serif", 28));
    }
    let mut chart = b.build_cartesian_2d((0..n).into_segmented(), 0.0..top).map_err(perr)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let fmt = move |v: &SegmentValue<usize>| match v {
        SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => labels.get(*i).cloned().unwrap_or_default(),
        SegmentValue::Last => String::new(),
    };
    let mut mesh = chart.configure_mesh();
    mesh.disable_x_mesh();
    if text {
        mesh.y_desc(y_label).x_label_formatter(&fmt);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(perr)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut r = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v.max(0.0))],
                Palette99::pick(i).filled(),
            );
            r.set_margin(0, 0, 12, 12);
            r
        }))
        .map_err(perr)?;
    root.present().map_err(perr)
}

/// Scatter of 2-D points colored by group index, with a legend of `groups`.
pub fn scatter(path: &Path, title: &str, points: &[(f64, f64)], group: &[usize], groups: &[String]) -> Result<()> {
    if points.len() != group.len() {
        return Err(Error::Shape(format!("{} points vs {} groups", points.len(), group.len())));
    }
    let text = fonts_available();
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.1));
    let mut b = ChartBuilder::on(&root);
    b.margin(20).x_label_area_size(40).y_label_area_size(50);
    if text {
        b.caption(title, ("sans-serif", 28));
    }
    let mut chart = b.build_cartesian_2d(x0..x1, y0..y1).map_err(perr)?;
    let mut mesh = chart.configure_mesh();
    if !text {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(perr)?;
    for (g, name) in groups.iter().enumerate() {
        let color = Palette99::pick(g).to_rgba();
        let pts: Vec<(f64, f64)> = points.iter().zip(group).filter(|(_, &k)| k == g).map(|(p, _)| *p).collect();
        let drawn = chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(perr)?;
        if text {
            drawn
                .label(name.clone())
                .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(perr)?;
    }
    root.present().map_err(perr)
}
