//! Plot data: per-run series pulled from metrics files, EMA smoothing,
//! median aggregation across seeds, CSV and a bare-bones SVG chart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use svib_core::metrics::MetricsRecord;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub x: Vec<u64>,
    pub y: Vec<f64>,
    pub ema: Option<f64>,
}

impl PlotSeries {
    /// Builds a series; `x` must be strictly increasing and as long as `y`.
    pub fn new(label: impl Into<String>, x: Vec<u64>, y: Vec<f64>) -> Result<Self, CliError> {
        let label = label.into();
        if x.len() != y.len() {
            return Err(CliError::Plot(format!("{label}: {} steps but {} values", x.len(), y.len())));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::Plot(format!("{label}: steps are not strictly increasing")));
        }
        Ok(PlotSeries { label, x, y, ema: None })
    }

    /// `y'_0 = y_0`, then `y'_t = ema·y'_{t−1} + (1−ema)·y_t`.
    pub fn smoothed(&self, ema: f64) -> Result<Self, CliError> {
        if !(0.0..1.0).contains(&ema) {
            return Err(CliError::Plot(format!("ema must lie in [0, 1), got {ema}")));
        }
        let mut y = Vec::with_capacity(self.y.len());
        for (t, &v) in self.y.iter().enumerate() {
            y.push(if t == 0 { v } else { ema * y[t - 1] + (1.0 - ema) * v });
        }
        Ok(PlotSeries {
            y,
            ema: Some(ema),
            ..self.clone()
        })
    }
}

/// One run's series for `field`. Records of any type carrying the field
/// are used; if a step repeats, the last record wins.
pub fn extract(records: &[MetricsRecord], field: &str, label: &str) -> Result<PlotSeries, CliError> {
    let mut points = BTreeMap::new();
    for r in records {
        if let Some(&v) = r.fields.get(field) {
            points.insert(r.step, v);
        }
    }
    if points.is_empty() {
        let available: BTreeSet<&str> = records.iter().flat_map(|r| r.fields.keys().map(String::as_str)).collect();
        return Err(CliError::MissingField {
            field: field.to_string(),
            run: label.to_string(),
            available: available.into_iter().collect::<Vec<_>>().join(", "),
        });
    }
    let (x, y) = points.into_iter().unzip();
    PlotSeries::new(label, x, y)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pointwise median over the runs that logged each step.
pub fn aggregate(label: &str, runs: &[PlotSeries]) -> Result<PlotSeries, CliError> {
    let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in runs {
        for (&x, &y) in s.x.iter().zip(&s.y) {
            at.entry(x).or_default().push(y);
        }
    }
    let (x, y) = at.into_iter().map(|(x, ys)| (x, median(ys))).unzip();
    let mut out = PlotSeries::new(label, x, y)?;
    out.ema = runs.first().and_then(|s| s.ema);
    Ok(out)
}

pub fn write_csv(path: &Path, s: &PlotSeries) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Plot(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["step", "value"]).map_err(io)?;
    for (x, y) in s.x.iter().zip(&s.y) {
        // `{}` on f64 prints the shortest string that parses back exactly.
        w.write_record([x.to_string(), format!("{y}")]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(path.display().to_string(), e))
}

pub fn read_csv(path: &Path, label: &str) -> Result<PlotSeries, CliError> {
    let bad = |e: String| CliError::Plot(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for row in r.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 2 {
            return Err(bad(format!("expected 2 columns, found {}", row.len())));
        }
        x.push(row[0].parse().map_err(|e| bad(format!("step `{}`: {e}", &row[0])))?);
        y.push(row[1].parse().map_err(|e| bad(format!("value `{}`: {e}", &row[1])))?);
    }
    PlotSeries::new(label, x, y)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Polylines on shared axes with min/max tick labels and a legend.
pub fn svg(series: &[PlotSeries], title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xs = series.iter().flat_map(|s| s.x.iter().map(|&x| x as f64));
    let ys = series.iter().flat_map(|s| s.y.iter().copied());
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(out, r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#, h - m, w - m);
    let _ = writeln!(out, r#"<text x="{m}" y="{}" text-anchor="middle">{x0}</text>"#, h - m + 15.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x1}</text>"#, w - m, h - m + 15.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, m - 4.0, h - m, y0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, m - 4.0, m + 4.0, y1);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(&s.y)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x as f64), py(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, w - m - 120.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
