//! Deterministic SVG convergence plots: one mean line and one min/max band
//! per ensemble.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{EnsembleSummary, IndexKind, Metric};

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub summary: EnsembleSummary,
}

#[derive(Debug, Clone)]
pub struct PlotOptions {
    pub metric: Metric,
    pub title: Option<String>,
    pub width: u32,
    pub height: u32,
    /// Points kept per series after stride selection.
    pub max_points: usize,
}

impl PlotOptions {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            title: None,
            width: 800,
            height: 500,
            max_points: 2000,
        }
    }
}

/// Row positions kept when thinning `len` rows to at most `max` by a fixed
/// stride; the last row is always kept.
pub fn downsample(len: usize, max: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let max = max.max(2);
    if len <= max {
        return (0..len).collect();
    }
    let stride = (len - 1).div_ceil(max - 1);
    let mut rows: Vec<usize> = (0..len).step_by(stride).collect();
    if *rows.last().unwrap() != len - 1 {
        rows.push(len - 1);
    }
    rows
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            let pad = if log { 0.5 } else { 0.5 * lo.abs().max(1.0) };
            (lo, hi) = (lo - pad, hi + pad);
        } else if !log {
            let pad = 0.05 * (hi - lo);
            (lo, hi) = (lo - pad, hi + pad);
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let span = (self.hi - self.lo) as i64;
            let step = (span / 8).max(1);
            (self.lo as i64..=self.hi as i64)
                .step_by(step as usize)
                .map(|e| (10f64.powi(e as i32), format!("1e{e}")))
                .collect()
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format!("{v:.3e}"))
                })
                .collect()
        }
    }
}

/// Renders the selected metric of each ensemble. The y axis is logarithmic
/// when every plotted value is positive and linear otherwise.
pub fn render_svg(series: &[PlotSeries], opts: &PlotOptions) -> Result<String> {
    let first = series
        .first()
        .ok_or_else(|| Error::GridMismatch("nothing to plot".into()))?;
    for s in series {
        if s.summary.index.is_empty() {
            return Err(Error::GridMismatch(format!("`{}` has no rows", s.label)));
        }
        if s.summary.index_kind != first.summary.index_kind {
            return Err(Error::GridMismatch(format!(
                "`{}` is indexed by {:?} but `{}` by {:?}",
                s.label, s.summary.index_kind, first.label, first.summary.index_kind
            )));
        }
    }

    let kept: Vec<Vec<usize>> = series
        .iter()
        .map(|s| downsample(s.summary.index.len(), opts.max_points))
        .collect();
    let values = || {
        series.iter().zip(&kept).flat_map(move |(s, rows)| {
            let m = s.summary.series(opts.metric);
            rows.iter()
                .flat_map(move |&i| [m.mean[i], m.min[i], m.max[i]])
        })
    };
    let log = values().all(|v| v > 0.0);
    let y = Axis::fit(values(), log);
    let x = Axis::fit(
        series
            .iter()
            .flat_map(|s| [s.summary.index[0], *s.summary.index.last().unwrap()]),
        false,
    );

    let (w, h) = (opts.width as f64, opts.height as f64);
    let (left, right, top, bottom) = (90.0, 20.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |v: f64| left + x.frac(v) * pw;
    let py = |v: f64| top + (1.0 - y.frac(v)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        opts.width, opts.height, opts.width, opts.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = opts
        .title
        .clone()
        .unwrap_or_else(|| opts.metric.name().to_string());
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(&title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##
    );
    for (v, label) in y.ticks() {
        let yy = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            left + pw,
            left - 6.0,
            yy + 4.0
        );
    }
    for (v, label) in x.ticks() {
        let xx = px(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{xx:.2}" y1="{top:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#eee"/><text x="{xx:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            top + ph,
            top + ph + 18.0
        );
    }
    let x_label = match first.summary.index_kind {
        IndexKind::Iteration => "iteration k",
        IndexKind::Time => "time t",
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        left + pw / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        opts.metric.name(),
        if log { " (log scale)" } else { "" }
    );

    for (n, (s, rows)) in series.iter().zip(&kept).enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let m = s.summary.series(opts.metric);
        let idx = &s.summary.index;
        let mut band = String::new();
        for &i in rows {
            let _ = write!(band, "{:.2},{:.2} ", px(idx[i]), py(m.max[i]));
        }
        for &i in rows.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(idx[i]), py(m.min[i]));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="{color}" stroke-opacity="0.4" stroke-width="0.5"/>"#,
            band.trim_end()
        );
        let mut line = String::new();
        for &i in rows {
            let _ = write!(line, "{:.2},{:.2} ", px(idx[i]), py(m.mean[i]));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.trim_end()
        );
        let ly = top + 16.0 + 18.0 * n as f64;
        let lx = left + pw - 150.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
