//! PNG figures: per-step metric curves, 1D function plots and scene grids.
//!
//! Figures carry no text; series are told apart by the fixed palettes below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use snp_core::gp::{Episode1D, GpConfig};
use snp_core::nn::ParamStore;
use snp_core::objective::Noise;
use snp_core::snp1d::Snp1d;
use snp_core::tgqn::{PreparedScene, TgqnModel};
use snp_core::Scalar;

use crate::error::{HarnessError, Result};
use crate::metrics::MetricsLog;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 400;

/// Series colors of curve plots, in input order.
pub const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

pub const BAND: RGBColor = RGBColor(158, 202, 225);
pub const MEAN: RGBColor = RGBColor(8, 81, 156);
pub const TRUTH: RGBColor = RGBColor(0, 160, 0);
pub const PAST_CONTEXT: RGBColor = RGBColor(170, 170, 170);
pub const CURRENT_CONTEXT: RGBColor = RGBColor(0, 0, 0);

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds<'a>(pts: impl Iterator<Item = &'a (f64, f64)>) -> Option<((f64, f64), (f64, f64))> {
    let mut b: Option<((f64, f64), (f64, f64))> = None;
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        b = Some(match b {
            None => ((x, x), (y, y)),
            Some(((x0, x1), (y0, y1))) => ((x0.min(x), x1.max(x)), (y0.min(y), y1.max(y))),
        });
    }
    b.map(|((x0, x1), (y0, y1))| {
        let pad = |lo: f64, hi: f64| if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
        let (px, py) = (pad(x0, x1), pad(y0, y1));
        ((x0 - px, x1 + px), (y0 - py, y1 + py))
    })
}

/// Line plot of metric curves over time-steps.
pub fn plot_curves(series: &[Series], out: &Path) -> Result<()> {
    let Some(((x0, x1), (y0, y1))) = bounds(series.iter().flat_map(|s| &s.points)) else {
        return Err(HarnessError::Plot("nothing to plot".into()));
    };
    let root = BitMapBackend::new(out, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_labels(0)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?;
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Metric name of step `t` (1-based) of a per-step curve.
pub fn step_metric(name: &str, t: usize) -> String {
    format!("{name}_t{t:02}")
}

/// Reads the per-step curve `metric` from each log; every log must contain it.
pub fn curves_from_logs(paths: &[PathBuf], metric: &str) -> Result<Vec<Series>> {
    let prefix = format!("{metric}_t");
    let mut series = Vec::with_capacity(paths.len());
    let mut missing = Vec::new();
    for p in paths {
        let rows = MetricsLog::read(p)?;
        let mut by_step = BTreeMap::new();
        for r in rows {
            if let Some(t) = r.metric.strip_prefix(&prefix).and_then(|t| t.parse::<usize>().ok()) {
                by_step.insert(t, r.value);
            }
        }
        if by_step.is_empty() {
            missing.push(format!("{}:{metric}", p.display()));
            continue;
        }
        series.push(Series {
            label: p.display().to_string(),
            points: by_step.into_iter().map(|(t, v)| (t as f64, v)).collect(),
        });
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingMetrics(missing));
    }
    Ok(series)
}

/// Layers of one 1D prediction figure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FunctionPlot {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub truth: Vec<(f64, f64)>,
    pub past_context: Vec<(f64, f64)>,
    pub current_context: Vec<(f64, f64)>,
}

/// Band of mean +/- 2 std, then mean, truth, past and current context.
pub fn plot_function(p: &FunctionPlot, out: &Path) -> Result<()> {
    let upper: Vec<(f64, f64)> = p.grid.iter().zip(&p.mean).zip(&p.std).map(|((&x, &m), &s)| (x, m + 2.0 * s)).collect();
    let lower: Vec<(f64, f64)> = p.grid.iter().zip(&p.mean).zip(&p.std).map(|((&x, &m), &s)| (x, m - 2.0 * s)).collect();
    let all = upper
        .iter()
        .chain(&lower)
        .chain(&p.truth)
        .chain(&p.past_context)
        .chain(&p.current_context);
    let Some(((x0, x1), (y0, y1))) = bounds(all) else {
        return Err(HarnessError::Plot("nothing to plot".into()));
    };
    let root = BitMapBackend::new(out, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    let band: Vec<(f64, f64)> = upper.iter().copied().chain(lower.iter().rev().copied()).collect();
    chart.draw_series(std::iter::once(Polygon::new(band, BAND.filled()))).map_err(plot_err)?;
    let mean: Vec<(f64, f64)> = p.grid.iter().copied().zip(p.mean.iter().copied()).collect();
    chart.draw_series(LineSeries::new(mean, MEAN.stroke_width(2))).map_err(plot_err)?;
    chart
        .draw_series(p.truth.iter().map(|&q| Circle::new(q, 3, TRUTH.filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(p.past_context.iter().map(|&q| Circle::new(q, 4, PAST_CONTEXT.filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(p.current_context.iter().map(|&q| Circle::new(q, 5, CURRENT_CONTEXT.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Function plot of step `step` (1-based) from one prior-chain sample.
pub fn function_plot_for<T: Scalar>(
    model: &Snp1d,
    s: &ParamStore<T>,
    ep: &Episode1D,
    step: usize,
    noise: &Noise,
) -> Result<FunctionPlot> {
    if step == 0 || step > ep.len() {
        return Err(HarnessError::Plot(format!("step {step} outside 1..={}", ep.len())));
    }
    let cfg = GpConfig::default();
    let n = 200;
    let grid: Vec<f32> = (0..n)
        .map(|i| (cfg.x_min + (cfg.x_max - cfg.x_min) * i as f64 / (n - 1) as f64) as f32)
        .collect();
    let pred = model.predict(s, ep, &grid, noise)?;
    let pts = |x: &[f32], y: &[f32]| -> Vec<(f64, f64)> {
        x.iter().zip(y).map(|(&a, &b)| (f64::from(a), f64::from(b))).collect()
    };
    let st = &ep.steps[step - 1];
    Ok(FunctionPlot {
        grid: grid.iter().map(|&x| f64::from(x)).collect(),
        mean: pred[step - 1].mean.clone(),
        std: pred[step - 1].std.clone(),
        truth: pts(&st.target_x, &st.target_y),
        past_context: ep.steps[..step - 1]
            .iter()
            .flat_map(|p| pts(&p.context_x, &p.context_y))
            .collect(),
        current_context: pts(&st.context_x, &st.context_y),
    })
}

/// Planar `[3, n, n]` image in [0, 1].
pub type Planar = Vec<f64>;

/// Grid of images; `None` cells stay gray. Each cell is upscaled to `cell` pixels.
pub fn image_grid(rows: &[Vec<Option<Planar>>], side: usize, cell: u32, out: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(HarnessError::Plot("empty grid".into()));
    }
    let gap = 2;
    let w = cols as u32 * (cell + gap) + gap;
    let h = rows.len() as u32 * (cell + gap) + gap;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, entry) in row.iter().enumerate() {
            let (ox, oy) = (gap + c as u32 * (cell + gap), gap + r as u32 * (cell + gap));
            for y in 0..cell {
                for x in 0..cell {
                    let px = match entry {
                        Some(p) => {
                            let (sy, sx) = (y as usize * side / cell as usize, x as usize * side / cell as usize);
                            let at = |ch: usize| (p[(ch * side + sy) * side + sx].clamp(0.0, 1.0) * 255.0).round() as u8;
                            Rgb([at(0), at(1), at(2)])
                        }
                        None => Rgb([128, 128, 128]),
                    };
                    img.put_pixel(ox + x, oy + y, px);
                }
            }
        }
    }
    img.save(out).map_err(plot_err)
}

/// Rows: first context observation, first target, then one generation of
/// that target per noise draw. One column per step.
pub fn scene_grid_rows<T: Scalar>(
    model: &TgqnModel,
    s: &ParamStore<T>,
    data: &PreparedScene,
    noises: &[Noise],
) -> Result<Vec<Vec<Option<Planar>>>> {
    let mut rows = vec![
        data.ctx.iter().map(|c| c.first().map(|o| o.image.clone())).collect(),
        data.tgt.iter().map(|t| t.first().map(|o| o.image.clone())).collect(),
    ];
    for noise in noises {
        let gen = model.generate(s, data, noise)?;
        rows.push(gen.into_iter().map(|g| g.into_iter().next()).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricRow;

    fn has_color(path: &Path, c: RGBColor) -> bool {
        let img = image::open(path).unwrap().to_rgb8();
        img.pixels().any(|p| p.0 == [c.0, c.1, c.2])
    }

    #[test]
    fn function_plot_draws_every_layer() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("f.png");
        let grid: Vec<f64> = (0..50).map(|i| -2.0 + 4.0 * i as f64 / 49.0).collect();
        let p = FunctionPlot {
            mean: grid.iter().map(|x| x.sin()).collect(),
            std: vec![0.3; 50],
            truth: vec![(0.5, 0.9), (1.5, -0.5)],
            past_context: vec![(-1.0, 1.5)],
            current_context: vec![(1.0, 0.1)],
            grid,
        };
        plot_function(&p, &out).unwrap();
        for c in [BAND, MEAN, TRUTH, PAST_CONTEXT, CURRENT_CONTEXT] {
            assert!(has_color(&out, c), "layer color {c:?} missing");
        }
    }

    #[test]
    fn empty_metrics_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("m.csv");
        drop(MetricsLog::create(&log).unwrap());
        let err = curves_from_logs(&[log], "pixel_mse").unwrap_err();
        assert!(matches!(err, HarnessError::MissingMetrics(ref k) if k[0].ends_with(":pixel_mse")));
        assert!(!dir.path().join("c.png").exists());
    }

    #[test]
    fn curves_read_per_step_rows() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("m.csv");
        let mut m = MetricsLog::create(&log).unwrap();
        for t in 1..=3 {
            m.append(&MetricRow::new(5, "eval", &step_metric("target_nll", t), t as f64, 0)).unwrap();
        }
        drop(m);
        let s = curves_from_logs(&[log], "target_nll").unwrap();
        assert_eq!(s[0].points, vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        let out = dir.path().join("c.png");
        plot_curves(&s, &out).unwrap();
        assert!(has_color(&out, PALETTE[0]));
    }

    #[test]
    fn grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("g.png");
        let white = vec![1.0; 3 * 4 * 4];
        let rows = vec![vec![Some(white.clone()), None], vec![Some(white); 2]];
        image_grid(&rows, 4, 8, &out).unwrap();
        let img = image::open(&out).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (2 * 10 + 2, 2 * 10 + 2));
        assert_eq!(img.get_pixel(13, 3).0, [128, 128, 128]);
    }
}
