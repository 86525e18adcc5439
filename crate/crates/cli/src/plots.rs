//! SVG figures for an analysis report.

use std::path::Path;

use anyhow::{anyhow, Result};
use ganda_core::AnalysisReport;
use plotters::prelude::*;

const SIZE: (u32, u32) = (640, 480);

/// ROI densities, predicted against real, with the fitted line and identity.
pub fn scatter(path: &Path, report: &AnalysisReport) -> Result<()> {
    let points: Vec<(f64, f64)> = report
        .densities
        .iter()
        .filter(|r| r.region != "whole")
        .map(|r| (r.np_real, r.np_pred))
        .collect();
    let hi = points
        .iter()
        .fold(0.0f64, |m, &(x, y)| m.max(x).max(y))
        .max(1e-3)
        * 1.05;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let reg = &report.regression;
    let caption = format!(
        "NP density per ROI: R\u{b2} = {:.3}, slope = {:.3}",
        reg.r_squared, reg.slope
    );
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..hi, 0.0..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("real NP density")
        .y_desc("predicted NP density")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (hi, hi)], BLACK.mix(0.3)))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            [(0.0, reg.intercept), (hi, reg.intercept + reg.slope * hi)],
            RED.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Extravasation distance histograms of the real and predicted channels.
pub fn distance_histograms(path: &Path, report: &AnalysisReport) -> Result<()> {
    let real = &report.distance_real.histogram;
    let pred = &report.distance_pred.histogram;
    let fractions = |counts: &[u64]| -> Vec<f64> {
        let total = counts.iter().sum::<u64>().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    };
    let (fr, fp) = (fractions(&real.counts), fractions(&pred.counts));
    let x_max = real
        .edges_um
        .last()
        .copied()
        .unwrap_or(1.0)
        .max(pred.edges_um.last().copied().unwrap_or(1.0))
        .max(1.0);
    let y_max = fr.iter().chain(&fp).fold(0.0f64, |m, &v| m.max(v)).max(1e-3) * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let caption = format!(
        "Extravasation distance: median {:.2} (real) vs {:.2} \u{b5}m (predicted)",
        report.distance_real.median_um, report.distance_pred.median_um
    );
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("distance to nearest vessel (\u{b5}m)")
        .y_desc("fraction of NP-positive pixels")
        .draw()
        .map_err(plot_err)?;
    for (edges, frac, color) in [(&real.edges_um, &fr, BLUE), (&pred.edges_um, &fp, RED)] {
        chart
            .draw_series(frac.iter().enumerate().map(|(i, &f)| {
                Rectangle::new([(edges[i], 0.0), (edges[i + 1], f)], color.mix(0.35).filled())
            }))
            .map_err(plot_err)?
            .label(if color == BLUE { "real" } else { "predicted" })
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.mix(0.35).filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}
