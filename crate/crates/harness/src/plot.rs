//! Static SVG curves from metrics files and oracle scans.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use plotters::prelude::*;

use sdh_core::agents::MetricsRecord;

use crate::run::read_metrics;

/// Metrics that get one plot each, when present in the files.
pub const METRICS: &[&str] = &["reward_return", "cost_return", "kappa", "eta_E", "c_max", "entropy", "critic_loss"];

fn field(r: &MetricsRecord, name: &str) -> Option<f64> {
    match name {
        "reward_return" => Some(r.reward_return),
        "cost_return" => Some(r.cost_return),
        "kappa" => r.kappa,
        "eta_E" => r.eta_e,
        "c_max" => r.c_max,
        "entropy" => Some(r.entropy),
        "critic_loss" => r.critic_loss,
        _ => None,
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Mean over series at every x that all of them share.
pub fn mean_series(series: &[Series]) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for s in series {
        for &(x, y) in &s.points {
            let e = acc.entry(x.to_bits()).or_insert((0.0, 0));
            e.0 += y;
            e.1 += 1;
        }
    }
    let mut out: Vec<(f64, f64)> = acc
        .into_iter()
        .filter(|(_, (_, n))| *n == series.len())
        .map(|(x, (sum, n))| (f64::from_bits(x), sum / n as f64))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn bounds(series: &[Series], extra_y: Option<f64>) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(y) = extra_y {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    ((x0, x1), (y0 - pad, y1 + pad))
}

/// Writes one line chart. With more than one series a black mean trace is
/// added; `hline` draws a dashed horizontal reference.
pub fn line_chart(path: &Path, title: &str, x_desc: &str, series: &[Series], with_mean: bool, hline: Option<f64>) -> anyhow::Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        bail!("nothing to plot for {title}");
    }
    let ((x0, x1), (y0, y1)) = bounds(series, hline);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(title).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).mix(if with_mean && series.len() > 1 { 0.45 } else { 1.0 });
        chart
            .draw_series(LineSeries::new(s.points.iter().cloned(), color.stroke_width(1)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    if with_mean && series.len() > 1 {
        chart
            .draw_series(LineSeries::new(mean_series(series), BLACK.stroke_width(2)))?
            .label("mean")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK.stroke_width(2)));
    }
    if let Some(y) = hline {
        let dashes = DashedLineSeries::new(vec![(x0, y), (x1, y)], 6, 4, RED.stroke_width(1));
        chart.draw_series(dashes)?.label(format!("limit {y}")).legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], RED));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// One SVG per metric over all metrics files matching `pattern`.
pub fn plot_metrics(pattern: &str, out_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob `{pattern}`"))?
        .collect::<Result<_, _>>()?;
    files.sort();
    if files.is_empty() {
        bail!("no metrics files match `{pattern}`");
    }
    let mut runs = Vec::new();
    for f in &files {
        let (header, records) = read_metrics(f)?;
        runs.push((header, records));
    }
    let cost_limit = runs.iter().find_map(|(h, _)| h.cost_limit);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &metric in METRICS {
        let series: Vec<Series> = runs
            .iter()
            .map(|(h, recs)| Series {
                label: format!("seed {}", h.seed),
                points: recs.iter().filter_map(|r| field(r, metric).map(|y| (r.step as f64, y))).collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("{metric}.svg"));
        let hline = if metric == "cost_return" { cost_limit } else { None };
        line_chart(&path, metric, "step", &series, true, hline)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_uses_shared_steps_only() {
        let s = vec![
            Series { label: "a".into(), points: vec![(0.0, 1.0), (1.0, 3.0)] },
            Series { label: "b".into(), points: vec![(0.0, 3.0)] },
        ];
        assert_eq!(mean_series(&s), vec![(0.0, 2.0)]);
    }

    #[test]
    fn chart_contains_limit_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svg");
        let s = vec![Series { label: "seed 0".into(), points: vec![(0.0, 1.0), (10.0, 0.2)] }];
        line_chart(&p, "cost_return", "step", &s, true, Some(0.5)).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("limit 0.5"));
    }
}
