//! SVG figures from experiment artifacts. Each figure is written next to
//! the CSV table it was drawn from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dfreloc::fsutil::write_atomic;
use dfreloc::pipeline::{self, Experiment};
use dfreloc::report::MetricsReport;
use dfreloc::{Error, Result};
use plotters::prelude::*;

const SIZE: (u32, u32) = (640, 480);

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Numeric columns of a CSV file with a header; empty or non-numeric
/// cells become `NaN`.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    Ok((header, rows))
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Blue to red over `[0, 1]`.
fn heat(x: f64) -> RGBColor {
    let x = x.clamp(0.0, 1.0);
    RGBColor((255.0 * x) as u8, 40, (255.0 * (1.0 - x)) as u8)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn save_svg(path: &Path, svg: String) -> Result<PathBuf> {
    write_atomic(path, svg.as_bytes())?;
    Ok(path.to_path_buf())
}

/// Top-down camera positions: ground truth in green, predictions coloured
/// by rotation error, each joined to its ground truth.
pub fn trajectory(dir: &Path, report: &MetricsReport, model: &str, split: &str) -> Result<Vec<PathBuf>> {
    let pts = Experiment::trajectories(report, model, split);
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    // Project onto the two axes along which the ground truth spreads most.
    let spread = |k: usize| {
        let (lo, hi) = padded_range(pts.iter().map(|p| p.0[k]));
        hi - lo
    };
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| spread(b).total_cmp(&spread(a)));
    let (ax, ay) = (axes[0], axes[1]);
    let names = ["x", "y", "z"];
    let max_r = pts.iter().map(|p| p.2).fold(1e-9, f64::max);

    let stem = format!("trajectory_{model}_{split}");
    let mut csv = String::from("gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,rotation_error_deg\n");
    for (g, p, r) in &pts {
        writeln!(csv, "{},{},{},{},{},{},{}", g[0], g[1], g[2], p[0], p[1], p[2], r).unwrap();
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    write_atomic(&csv_path, csv.as_bytes())?;

    let xr = padded_range(pts.iter().flat_map(|p| [p.0[ax], p.1[ax]]));
    let yr = padded_range(pts.iter().flat_map(|p| [p.0[ay], p.1[ay]]));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{model} on {split}: camera positions (max rot. err {max_r:.1} deg)"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc(names[ax])
            .y_desc(names[ay])
            .draw()
            .map_err(draw_err)?;
        chart
            .draw_series(
                pts.iter()
                    .map(|(g, p, _)| PathElement::new(vec![(g[ax], g[ay]), (p[ax], p[ay])], RGBColor(180, 180, 180))),
            )
            .map_err(draw_err)?;
        chart
            .draw_series(pts.iter().map(|(g, _, _)| Circle::new((g[ax], g[ay]), 3, GREEN.filled())))
            .map_err(draw_err)?
            .label("ground truth")
            .legend(|(x, y)| Circle::new((x, y), 3, GREEN.filled()));
        chart
            .draw_series(pts.iter().map(|(_, p, r)| Circle::new((p[ax], p[ay]), 3, heat(r / max_r).filled())))
            .map_err(draw_err)?
            .label("prediction (blue low, red high rotation error)")
            .legend(|(x, y)| Circle::new((x, y), 3, heat(1.0).filled()));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(vec![save_svg(&dir.join(format!("{stem}.svg")), svg)?, csv_path])
}

/// Scatter of matching loss against translation offset, one colour per
/// rotation offset, from `landscape.csv`.
pub fn landscape(dir: &Path, csv_path: &Path) -> Result<PathBuf> {
    let (header, rows) = read_csv(csv_path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no `{name}` column", csv_path.display())))
    };
    let (ct, cr, cl) = (col("delta_t")?, col("delta_r_deg")?, col("dm_loss")?);
    let mut rotations: Vec<f64> = Vec::new();
    for r in &rows {
        if !rotations.contains(&r[cr]) {
            rotations.push(r[cr]);
        }
    }
    let xr = padded_range(rows.iter().map(|r| r[ct]));
    let yr = padded_range(rows.iter().map(|r| r[cl]));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("matching loss around the true pose", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("translation offset")
            .y_desc("matching loss")
            .draw()
            .map_err(draw_err)?;
        for (i, &rot) in rotations.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(
                    rows.iter()
                        .filter(|r| r[cr] == rot)
                        .map(move |r| Circle::new((r[ct], r[cl]), 3, color.filled())),
                )
                .map_err(draw_err)?
                .label(format!("rotation offset {rot} deg"))
                .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    save_svg(&dir.join("landscape.svg"), svg)
}

/// One panel per requested column of a training log, against its first
/// column.
pub fn curves(dir: &Path, csv_path: &Path, columns: &[&str], out_name: &str) -> Result<PathBuf> {
    let (header, rows) = read_csv(csv_path)?;
    let cols: Vec<(usize, &str)> = columns
        .iter()
        .filter_map(|c| header.iter().position(|h| h == c).map(|i| (i, *c)))
        .collect();
    let mut svg = String::new();
    {
        let height = SIZE.1 / 2 * cols.len().max(1) as u32;
        let root = SVGBackend::with_string(&mut svg, (SIZE.0, height)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let panels = root.split_evenly((cols.len().max(1), 1));
        for ((ci, name), panel) in cols.iter().zip(&panels) {
            let series: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (r[0], r[*ci]))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            let xr = padded_range(series.iter().map(|p| p.0));
            let yr = padded_range(series.iter().map(|p| p.1));
            let mut chart = ChartBuilder::on(panel)
                .caption(format!("{out_name}: {name}"), ("sans-serif", 16))
                .margin(10)
                .x_label_area_size(30)
                .y_label_area_size(56)
                .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
                .map_err(draw_err)?;
            chart
                .configure_mesh()
                .x_desc(header[0].as_str())
                .y_desc(*name)
                .draw()
                .map_err(draw_err)?;
            chart
                .draw_series(LineSeries::new(series.iter().copied(), PALETTE[0]))
                .map_err(draw_err)?;
            chart
                .draw_series(series.iter().map(|&p| Circle::new(p, 2, PALETTE[0].filled())))
                .map_err(draw_err)?;
        }
        root.present().map_err(draw_err)?;
    }
    save_svg(&dir.join(format!("{out_name}.svg")), svg)
}

/// Every figure the available artifacts allow. The loss landscape is
/// computed first when a trained field and DFNet exist but no table does.
pub fn plot_all(exp: &Experiment) -> Result<Vec<PathBuf>> {
    let dir = exp.path("plots");
    let mut out = Vec::new();
    let report_path = exp.path(pipeline::REPORT);
    if report_path.is_file() {
        let report = MetricsReport::load(&report_path)?;
        for g in report.summaries()? {
            out.extend(trajectory(&dir, &report, &g.model, &g.split)?);
        }
    }
    let land = exp.path(pipeline::LANDSCAPE);
    if !land.is_file() && exp.path(pipeline::NERF_CKPT).is_file() && exp.path(pipeline::DFNET_CKPT).is_file() {
        exp.landscape()?;
    }
    if land.is_file() {
        out.push(landscape(&dir, &land)?);
    }
    for (log, cols, name) in [
        (pipeline::NERF_LOG, &["loss", "train_psnr", "val_psnr"][..], "curves_nerf"),
        (pipeline::DFNET_LOG, &["loss", "alignment_loss", "val_median_t", "val_median_r"][..], "curves_dfnet"),
        (pipeline::DM_LOG, &["loss", "grad_norm"][..], "curves_dm"),
        (pipeline::REFINE_LOG, &["t_err"][..], "curves_refine"),
    ] {
        let p = exp.path(log);
        if p.is_file() {
            out.push(curves(&dir, &p, cols, name)?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to plot; run train-nerf, train-dfnet or eval first".into(),
        ));
    }
    Ok(out)
}
