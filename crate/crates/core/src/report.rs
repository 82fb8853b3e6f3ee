//! Minimal SVG charts for run reports.
//!
//! Output is plain text with fixed float formatting, so identical inputs give
//! byte-identical files.

use std::fmt::Write;

use crate::ensemble::SectorSeries;
use crate::rank::ScreeResult;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Line { width: f64, opacity: f64 },
    Points { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// Empty labels are left out of the legend.
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference line and its label.
    pub hline: Option<(f64, String)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick step of the form {1, 2, 5}·10ᵏ giving about five ticks.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e5 || v.abs() < 1e-3 {
        return format!("{v:.1e}");
    }
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

impl Chart {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if let Some((h, _)) = self.hline {
            y0 = y0.min(h);
            y1 = y1.max(h);
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let pad = (y1 - y0) * 0.05;
        (x0, x1, y0 - pad, y1 + pad)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );

        // axes and ticks
        let _ = writeln!(
            out,
            r##"<path d="M{LEFT:.1} {TOP:.1} V{:.1} H{:.1}" fill="none" stroke="#333"/>"##,
            TOP + ph,
            LEFT + pw
        );
        for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
            let step = nice_step(hi - lo);
            let mut t = (lo / step).ceil() * step;
            while t <= hi + step * 1e-9 {
                let label = fmt_tick(t, step);
                if horizontal {
                    let x = sx(t);
                    let _ = writeln!(
                        out,
                        r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
                        TOP + ph,
                        TOP + ph + 5.0,
                        TOP + ph + 18.0
                    );
                } else {
                    let y = sy(t);
                    let _ = writeln!(
                        out,
                        r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT:.1}" y2="{y:.1}" stroke="#333"/><line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                        LEFT - 5.0,
                        LEFT + pw,
                        LEFT - 8.0,
                        y + 4.0
                    );
                }
                t += step;
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for s in &self.series {
            let color = PALETTE[s.color % PALETTE.len()];
            match s.style {
                Style::Line { width, opacity } => {
                    let mut d = String::new();
                    for (i, &(x, y)) in s.points.iter().enumerate() {
                        let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, sx(x), sy(y));
                    }
                    let _ = writeln!(
                        out,
                        r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#
                    );
                }
                Style::Points { radius } => {
                    for &(x, y) in &s.points {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
            }
        }

        if let Some((h, label)) = &self.hline {
            let y = sy(*h);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#d62728" stroke-dasharray="6 4"/><text x="{:.1}" y="{:.2}">{}</text>"##,
                LEFT + pw,
                LEFT + pw + 6.0,
                y + 4.0,
                escape(label)
            );
        }

        for (row, s) in self.series.iter().filter(|s| !s.label.is_empty()).enumerate() {
            let y = TOP + 10.0 + 18.0 * row as f64;
            let x = WIDTH - RIGHT + 16.0;
            let color = PALETTE[s.color % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 10.0,
                x + 18.0,
                y,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Individual and cumulative explained variance against component number.
pub fn scree_chart(scree: &ScreeResult, threshold: f64) -> Chart {
    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &r)| ((i + 1) as f64, r)).collect::<Vec<_>>();
    Chart {
        title: format!("Scree plot (suggested K = {})", scree.suggested_k),
        x_label: "component".into(),
        y_label: "explained variance ratio".into(),
        series: vec![
            Series {
                label: "ratio".into(),
                points: pts(&scree.explained_variance_ratio),
                style: Style::Line { width: 2.0, opacity: 1.0 },
                color: 0,
            },
            Series {
                label: "cumulative".into(),
                points: pts(&scree.cumulative),
                style: Style::Line { width: 2.0, opacity: 1.0 },
                color: 1,
            },
        ],
        hline: Some((threshold, format!("{threshold}"))),
    }
}

/// Every retained solution's sources as thin lines, the medoid's in bold.
pub fn sources_chart(sources: &[ndarray::Array2<f64>], medoid: usize, names: &[String]) -> Chart {
    let mut series = Vec::new();
    for (l, s) in sources.iter().enumerate() {
        if l == medoid {
            continue;
        }
        for (k, row) in s.rows().into_iter().enumerate() {
            series.push(Series {
                label: String::new(),
                points: row.iter().enumerate().map(|(h, &v)| (h as f64, v)).collect(),
                style: Style::Line { width: 0.6, opacity: 0.25 },
                color: k,
            });
        }
    }
    if let Some(s) = sources.get(medoid) {
        for (k, row) in s.rows().into_iter().enumerate() {
            series.push(Series {
                label: names.get(k).cloned().unwrap_or_else(|| format!("source {}", k + 1)),
                points: row.iter().enumerate().map(|(h, &v)| (h as f64, v)).collect(),
                style: Style::Line { width: 2.5, opacity: 1.0 },
                color: k,
            });
        }
    }
    Chart {
        title: "Sources (medoid bold)".into(),
        x_label: "hour".into(),
        y_label: "share of daily energy".into(),
        series,
        hline: None,
    }
}

/// Converged loss of every run against its seed; retained runs highlighted.
pub fn losses_chart(losses: &[(u64, Option<f64>)], retained: &[u64], threshold: f64) -> Chart {
    let (kept, other): (Vec<_>, Vec<_>) = losses
        .iter()
        .filter_map(|&(seed, l)| l.map(|l| (seed, l)))
        .partition(|(seed, _)| retained.contains(seed));
    let pts = |v: Vec<(u64, f64)>| v.into_iter().map(|(s, l)| (s as f64, l)).collect::<Vec<_>>();
    Chart {
        title: "Converged loss by run".into(),
        x_label: "seed".into(),
        y_label: "loss".into(),
        series: vec![
            Series {
                label: "retained".into(),
                points: pts(kept),
                style: Style::Points { radius: 2.5 },
                color: 2,
            },
            Series {
                label: "discarded".into(),
                points: pts(other),
                style: Style::Points { radius: 2.5 },
                color: 7,
            },
        ],
        hline: Some((threshold, "threshold".into())),
    }
}

/// Mean hourly sector loads over `days` consecutive days starting at `first_day`.
pub fn weekly_chart(series: &[SectorSeries], names: &[String], p: usize, first_day: usize, days: usize) -> Chart {
    let lo = first_day * p;
    let mut out = Vec::new();
    for (j, s) in series.iter().enumerate() {
        let hi = (lo + days * p).min(s.hourly.mean.len());
        out.push(Series {
            label: names.get(j).cloned().unwrap_or_default(),
            points: (lo..hi).map(|t| ((t - lo) as f64 / p as f64, s.hourly.mean[t])).collect(),
            style: Style::Line { width: 1.8, opacity: 1.0 },
            color: j,
        });
    }
    Chart {
        title: "Disaggregated load".into(),
        x_label: "day".into(),
        y_label: "MW".into(),
        series: out,
        hline: None,
    }
}
