//! Run comparison tables and training-curve plots.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalResults;
use crate::error::{Error, Result};

/// One finished run: its configuration toggles, scores and a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    /// Ordered (column, value) pairs describing the configuration.
    pub config: Vec<(String, String)>,
    pub results: EvalResults,
    /// (epoch, loss) points of the run's training curve.
    #[serde(default)]
    pub curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub config: Vec<String>,
    pub map: Option<f64>,
    pub pck: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub pck_fraction: f64,
    pub eval_set: String,
    pub rows: Vec<ReportRow>,
}

/// Builds the comparison table. Refuses runs scored on different
/// evaluation sets or PCK fractions.
pub fn report(runs: &[RunRecord]) -> Result<Report> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument("no runs to report".into()))?;
    for r in runs {
        if r.results.eval_set != first.results.eval_set {
            return Err(Error::InvalidArgument(format!(
                "runs {} and {} were evaluated on different sets",
                first.name, r.name
            )));
        }
        if r.results.pck_fraction != first.results.pck_fraction {
            return Err(Error::InvalidArgument(format!(
                "runs {} and {} use different PCK fractions",
                first.name, r.name
            )));
        }
    }
    let mut columns: Vec<String> = Vec::new();
    for r in runs {
        for (k, _) in &r.config {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            name: r.name.clone(),
            config: columns
                .iter()
                .map(|c| r.config.iter().find(|(k, _)| k == c).map(|(_, v)| v.clone()).unwrap_or_default())
                .collect(),
            map: r.results.map,
            pck: r.results.pck,
            instances: r.results.instances,
        })
        .collect();
    rows.sort_by(|a, b| a.config.cmp(&b.config).then_with(|| a.name.cmp(&b.name)));
    Ok(Report {
        columns,
        pck_fraction: first.results.pck_fraction,
        eval_set: first.results.eval_set.clone(),
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",map,pck,instances\n");
        for r in &self.rows {
            s.push_str(&r.name);
            for v in &r.config {
                s.push(',');
                s.push_str(v);
            }
            s.push_str(&format!(",{},{:.4},{}\n", fmt_opt(r.map), r.pck, r.instances));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let pck = format!("PCK@{}", self.pck_fraction);
        let mut head = vec!["run".to_string()];
        head.extend(self.columns.iter().cloned());
        head.push("mAP".into());
        head.push(pck);
        let mut s = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
        for r in &self.rows {
            let mut cells = vec![r.name.clone()];
            cells.extend(r.config.iter().cloned());
            cells.push(fmt_opt(r.map));
            cells.push(format!("{:.4}", r.pck));
            s.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        s
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidArgument(format!("plotting failed: {e}"))
}

/// Line plot of every run's training curve, one SVG.
pub fn plot_curves(runs: &[RunRecord], title: &str, path: &Path) -> Result<()> {
    let series: Vec<(&str, &[(usize, f64)])> = runs
        .iter()
        .filter(|r| !r.curve.is_empty())
        .map(|r| (r.name.as_str(), r.curve.as_slice()))
        .collect();
    if series.is_empty() {
        return Err(Error::InvalidArgument("no training curves to plot".into()));
    }
    let x_max = series.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).max().unwrap_or(1).max(1);
    let ys = series.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)).filter(|y| y.is_finite());
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(0usize..x_max, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, c)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(c.iter().copied(), &color))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Bone-proportion profiles as lines over bone index, one per class.
pub fn plot_profiles(profiles: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let n = profiles.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument("no profiles to plot".into()));
    }
    let hi = profiles.iter().flat_map(|(_, p)| p.iter().copied()).fold(0.0, f64::max) * 1.1;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("relative bone length", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(0usize..n - 1, 0.0..hi.max(1e-6))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("bone").draw().map_err(plot_err)?;
    for (i, (name, p)) in profiles.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(p.iter().copied().enumerate(), &color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
