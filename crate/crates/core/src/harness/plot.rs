//! Standalone SVG line plots of summary rows.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::table::SummaryRow;

/// Floor for log-scale axes; smaller values are clamped with a warning.
pub const LOG_FLOOR: f64 = 1e-12;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub metric: String,
    pub title: String,
    pub x_label: String,
    pub log_y: bool,
    pub log_x: bool,
}

impl PlotSpec {
    pub fn new(metric: &str, x_label: &str, log_y: bool) -> Self {
        PlotSpec {
            metric: metric.into(),
            title: metric.into(),
            x_label: x_label.into(),
            log_y,
            log_x: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub svg: String,
    /// One line per clamped value.
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    mid: f64,
    lo: f64,
    hi: f64,
}

struct Series {
    label: String,
    points: Vec<Point>,
    /// Count, first x and first value of points clamped to the log floor.
    clamped: (usize, f64, f64),
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
    let stride = ((b - a) / 6 + 1).max(1);
    (a..=b).step_by(stride as usize).map(|e| e as f64).collect()
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.03 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders the rows whose metric matches `spec.metric`, one series per
/// algorithm/batch label, with a shaded standard-error band when a point has
/// more than one trial.
pub fn emit_plot(rows: &[SummaryRow], spec: &PlotSpec) -> Result<Plot> {
    let mut warnings = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == spec.metric) {
        if !r.mean.is_finite() || !r.x.is_finite() {
            continue;
        }
        let label = r.series();
        let idx = match series.iter().position(|s| s.label == label) {
            Some(i) => i,
            None => {
                series.push(Series {
                    label,
                    points: Vec::new(),
                    clamped: (0, 0.0, 0.0),
                });
                series.len() - 1
            }
        };
        let se = if r.trials > 1 && r.stderr.is_finite() {
            r.stderr
        } else {
            0.0
        };
        let (mut lo, mut mid, mut hi) = (r.mean - se, r.mean, r.mean + se);
        if spec.log_y {
            if mid < LOG_FLOOR {
                let c = &mut series[idx].clamped;
                if c.0 == 0 {
                    c.1 = r.x;
                    c.2 = mid;
                }
                c.0 += 1;
                mid = LOG_FLOOR;
            }
            lo = lo.max(LOG_FLOOR).log10();
            mid = mid.log10();
            hi = hi.max(LOG_FLOOR).log10();
        }
        let x = if spec.log_x {
            if r.x <= 0.0 {
                continue;
            }
            r.x.log10()
        } else {
            r.x
        };
        series[idx].points.push(Point { x, mid, lo, hi });
    }
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::EmptySelection(format!(
            "no finite rows for metric {:?}",
            spec.metric
        )));
    }
    for ser in &series {
        let (count, x, v) = ser.clamped;
        if count > 0 {
            warnings.push(format!(
                "plot {}: {count} value(s) of {} below {LOG_FLOOR:e} clamped to the axis floor (first at x={x}, value {v:e})",
                spec.metric, ser.label
            ));
        }
    }
    Ok(Plot {
        svg: render(&series, spec),
        warnings,
    })
}

fn render(series: &[Series], spec: &PlotSpec) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = range(all().map(|p| p.x));
    let (y0, y1) = range(all().flat_map(|p| [p.lo, p.mid, p.hi]));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&spec.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in if spec.log_x {
        log_ticks(x0, x1)
    } else {
        linear_ticks(x0, x1)
    } {
        let x = sx(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            tick_label(t, spec.log_x)
        );
    }
    for t in if spec.log_y {
        log_ticks(y0, y1)
    } else {
        linear_ticks(y0, y1)
    } {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT - 5.0,
            LEFT + pw,
            LEFT - 8.0,
            y + 4.0,
            tick_label(t, spec.log_y)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 14.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(&spec.metric)
    );

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let p = &ser.points;
        if p.iter().any(|q| q.hi > q.mid) {
            let mut d = String::new();
            for q in p {
                let _ = write!(d, "{:.2},{:.2} ", sx(q.x), sy(q.hi));
            }
            for q in p.iter().rev() {
                let _ = write!(d, "{:.2},{:.2} ", sx(q.x), sy(q.lo));
            }
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                d.trim_end()
            );
        }
        let mut d = String::new();
        for q in p {
            let _ = write!(d, "{:.2},{:.2} ", sx(q.x), sy(q.mid));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let ly = TOP + 12.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
