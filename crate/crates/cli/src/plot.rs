//! Static SVG figures.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{CliError, Result};

const SIZE: (u32, u32) = (720, 440);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One curve with an optional `mean +- std` band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, mean, std)`
    pub points: Vec<(f64, f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in pts.filter(|p| p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    (x0, x1, y0 - pad, y1 + pad)
}

/// Line plot of `mean` with a shaded `mean +- std` band per series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1, y0, y1) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .light_line_style(WHITE)
        .draw()
        .map_err(plot_err)?;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<_> = s.points.iter().copied().filter(|p| p.1.is_finite()).collect();
        if finite.iter().any(|p| p.2 > 0.0) {
            let mut band: Vec<(f64, f64)> = finite.iter().map(|&(x, m, sd)| (x, m + sd)).collect();
            band.extend(finite.iter().rev().map(|&(x, m, sd)| (x, m - sd)));
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                .map_err(plot_err)?;
        }
        chart
            .draw_series(LineSeries::new(
                finite.iter().map(|&(x, m, _)| (x, m)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 || series.iter().any(|s| !s.label.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK.mix(0.3))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Heat map of an `N x M` matrix with entries in `[0, 1]`; rows are observed
/// features, columns are slots.
pub fn heatmap(path: &Path, title: &str, matrix: &[Vec<f64>]) -> Result<()> {
    let n = matrix.len();
    let m = matrix.first().map_or(0, Vec::len);
    let root = SVGBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..m.max(1) as f64, n.max(1) as f64..0.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("slot")
        .y_desc("observed feature")
        .draw()
        .map_err(plot_err)?;
    let cells = matrix.iter().enumerate().flat_map(|(i, row)| {
        row.iter().enumerate().map(move |(j, &v)| {
            let v = v.clamp(0.0, 1.0);
            let shade = |c: u8| (255.0 - (255.0 - c as f64) * v).round() as u8;
            let color = RGBColor(shade(8), shade(48), shade(107));
            Rectangle::new([(j as f64, i as f64), (j as f64 + 1.0, i as f64 + 1.0)], color.filled())
        })
    });
    chart.draw_series(cells).map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series {
            label: "a".into(),
            points: (0..20).map(|i| (i as f64, (i as f64).sqrt(), 0.1)).collect(),
        };
        let p = dir.path().join("l.svg");
        line_plot(&p, "t", "x", "y", &[s.clone(), Series { label: "b".into(), ..s }]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("<svg"));
        let h = dir.path().join("h.svg");
        heatmap(&h, "w", &[vec![1.0, 0.0], vec![0.2, 0.9]]).unwrap();
        assert!(std::fs::read_to_string(&h).unwrap().contains("<rect"));
    }

    #[test]
    fn empty_series_still_plot() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.svg");
        line_plot(&p, "t", "x", "y", &[]).unwrap();
    }
}
