//! SVG figures rebuilt from the CSV artifacts of a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use crate::experiment::{io_err, ControlRow, ExperimentError, TravelRow};
use crate::metrics::{ComparisonRow, MetricsRow};

const SIZE: (u32, u32) = (640, 400);
const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

fn draw_err<E: std::fmt::Debug>(e: E) -> ExperimentError {
    ExperimentError::Io {
        path: PathBuf::from("plots"),
        source: std::io::Error::other(format!("{e:?}")),
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| ExperimentError::SchemaMismatch(format!("{}: {e}", path.display())))
}

fn read_normal_totals(path: &Path) -> Result<Vec<(f64, f64)>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ExperimentError::SchemaMismatch(e.to_string()))?;
        let get = |i: usize| -> Result<f64, ExperimentError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ExperimentError::SchemaMismatch(format!("{}: bad row", path.display())))
        };
        out.push((get(1)?, get(2)?));
    }
    Ok(out)
}

fn run_dirs(out: &Path) -> Result<Vec<(String, PathBuf)>, ExperimentError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(out).map_err(io_err(out))? {
        let entry = entry.map_err(io_err(out))?;
        let path = entry.path();
        if path.join("controls.csv").is_file() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    (lo - pad, hi + pad)
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], markers: &[(usize, f64, f64)]) -> Result<String, ExperimentError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let xs = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
        let ys = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(60)
            .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(draw_err)?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let c = color(i);
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
                .map_err(draw_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        }
        chart
            .draw_series(markers.iter().map(|&(i, x, y)| Circle::new((x, y), 5, color(i).filled())))
            .map_err(draw_err)?;
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn effort_bars(rows: &[ComparisonRow]) -> Result<String, ExperimentError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let top = rows
            .iter()
            .map(|r| r.effort_point.max(r.effort_fdlc))
            .fold(0.0, f64::max)
            .max(1e-9)
            * 1.1;
        let n = rows.len().max(1) as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption("Control effort", ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..n, 0.0..top)
            .map_err(draw_err)?;
        let labels: Vec<String> = rows.iter().map(|r| format!("{} deg", r.goal_deg)).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(rows.len().max(1) * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-6 {
                    labels.get(i).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("sum |u|^2 h (N^2 s)")
            .draw()
            .map_err(draw_err)?;
        for (k, (name, pick)) in [
            ("point", (|r: &ComparisonRow| r.effort_point) as fn(&ComparisonRow) -> f64),
            ("fdlc", |r: &ComparisonRow| r.effort_fdlc),
        ]
        .into_iter()
        .enumerate()
        {
            let c = color(k);
            chart
                .draw_series(rows.iter().enumerate().map(|(i, r)| {
                    let x0 = i as f64 + 0.1 + 0.4 * k as f64;
                    Rectangle::new([(x0, 0.0), (x0 + 0.4, pick(r))], c.filled())
                }))
                .map_err(draw_err)?
                .label(name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

/// Render every figure of the run directory `out`, returning paths relative
/// to `out` and the SVG text. Nothing is written.
pub fn render_all(out: &Path) -> Result<Vec<(PathBuf, String)>, ExperimentError> {
    let runs = run_dirs(out)?;
    let mut figures = Vec::new();
    let mut travel = Vec::new();
    let mut reach_markers = Vec::new();
    let mut forces = Vec::new();
    for (i, (name, dir)) in runs.iter().enumerate() {
        let controls: Vec<ControlRow> = read_csv(&dir.join("controls.csv"))?;
        let n = controls.iter().map(|r| r.point + 1).max().unwrap_or(0);
        let mut series = Vec::new();
        for p in 0..n {
            let pts = controls.iter().filter(|r| r.point == p);
            series.push((format!("u{p} x"), pts.clone().map(|r| (r.time, r.fx)).collect()));
            series.push((format!("u{p} y"), pts.map(|r| (r.time, r.fy)).collect()));
        }
        figures.push((
            PathBuf::from(format!("plots/controls_{name}.svg")),
            line_chart(&format!("Control inputs, {name}"), "time (s)", "force (N)", &series, &[])?,
        ));

        let curve: Vec<TravelRow> = read_csv(&dir.join("travel.csv"))?;
        let m: Vec<MetricsRow> = read_csv(&dir.join("metrics.csv"))?;
        if let Some(t) = m.first().and_then(|r| r.reach_step) {
            if let Some(row) = curve.get(t) {
                reach_markers.push((i, row.time, row.travel));
            }
        }
        travel.push((name.clone(), curve.iter().map(|r| (r.time, r.travel)).collect()));
        forces.push((name.clone(), read_normal_totals(&dir.join("forces.csv"))?));
    }
    if !runs.is_empty() {
        figures.push((
            PathBuf::from("plots/travel.svg"),
            line_chart("Travel distance", "time (s)", "distance (m)", &travel, &reach_markers)?,
        ));
        figures.push((
            PathBuf::from("plots/forces.svg"),
            line_chart("Total normal force", "time (s)", "force (N)", &forces, &[])?,
        ));
    }
    let cmp = out.join("comparison.csv");
    if cmp.is_file() {
        let rows: Vec<ComparisonRow> = read_csv(&cmp)?;
        figures.push((PathBuf::from("plots/effort.svg"), effort_bars(&rows)?));
    }
    Ok(figures)
}

/// Regenerate the figures of `out` on disk.
pub fn regenerate(out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let figures = render_all(out)?;
    let dir = out.join("plots");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    for (rel, svg) in figures {
        let path = out.join(&rel);
        fs::write(&path, svg).map_err(io_err(&path))?;
        written.push(rel);
    }
    Ok(written)
}
