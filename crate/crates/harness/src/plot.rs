//! Minimal SVG line charts.

use std::fmt::Write;

use crate::runlog::Table;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Closed interval drawn on one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    /// Smallest range covering every finite value, widened when degenerate.
    fn covering(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        if min > max {
            return Self { min: 0.0, max: 1.0 };
        }
        if min == max {
            let pad = if min == 0.0 { 1.0 } else { min.abs() * 0.05 };
            return Self {
                min: min - pad,
                max: max + pad,
            };
        }
        Self { min, max }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

impl Chart {
    /// Axis ranges covering every finite point of every series.
    pub fn ranges(&self) -> (AxisRange, AxisRange) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        (AxisRange::covering(pts().map(|p| p.0)), AxisRange::covering(pts().map(|p| p.1)))
    }

    /// Renders the chart. Points with a non-finite coordinate break the line.
    /// The root element records the axis ranges as `data-*` attributes.
    pub fn to_svg(&self) -> String {
        let (xr, yr) = self.ranges();
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let px = |x: f64| LEFT + xr.frac(x) * pw;
        let py = |y: f64| TOP + (1.0 - yr.frac(y)) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
            xr.min, xr.max, yr.min, yr.max
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let (xv, yv) = (xr.min + f * (xr.max - xr.min), yr.min + f * (yr.max - yr.min));
            let (x, y) = (px(xv), py(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/><text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"##,
                TOP,
                TOP + ph,
                TOP + ph + 16.0,
                label(xv)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0,
                label(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
            for &(x, y) in &series.points {
                if x.is_finite() && y.is_finite() {
                    segments.last_mut().expect("nonempty").push((px(x), py(y)));
                } else if !segments.last().expect("nonempty").is_empty() {
                    segments.push(Vec::new());
                }
            }
            for seg in segments.iter().filter(|seg| !seg.is_empty()) {
                let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
                for (x, y) in seg {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#);
                }
            }
            let ly = TOP + 14.0 + 20.0 * k as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Charts for a CSV table, each paired with a file-name suffix.
///
/// Run logs are plotted against `reward_queries`: reward columns share one
/// chart and every other metric gets its own. Other tables plot every
/// column against the first.
pub fn charts_for_table(table: &Table, title: &str) -> Vec<(String, Chart)> {
    let Some(first) = table.columns.first() else {
        return Vec::new();
    };
    let x_idx = table.columns.iter().position(|c| c == "reward_queries").unwrap_or(0);
    let x_name = table.columns[x_idx].clone();
    let xs = table.column(x_idx);
    let series = |j: usize| Series {
        label: table.columns[j].clone(),
        points: xs.iter().copied().zip(table.column(j)).collect(),
    };
    let chart = |suffix: &str, y_label: &str, cols: Vec<usize>| {
        (
            suffix.to_string(),
            Chart {
                title: if suffix.is_empty() { title.to_string() } else { format!("{title}: {suffix}") },
                x_label: x_name.clone(),
                y_label: y_label.to_string(),
                series: cols.into_iter().map(series).collect(),
            },
        )
    };
    let ys: Vec<usize> = (0..table.columns.len()).filter(|&j| j != x_idx).collect();
    if x_idx == 0 && first != "reward_queries" {
        return vec![chart("", "value", ys)];
    }
    let skip = ["iteration", "wall_ms"];
    let rewards: Vec<usize> = ys.iter().copied().filter(|&j| table.columns[j].contains("reward")).collect();
    let mut out = Vec::new();
    if !rewards.is_empty() {
        out.push(chart("reward", "reward", rewards));
    }
    for &j in &ys {
        let name = &table.columns[j];
        if !name.contains("reward") && !skip.contains(&name.as_str()) {
            out.push(chart(name, name, vec![j]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_range_widened() {
        let r = AxisRange::covering([2.0, 2.0].into_iter());
        assert!(r.min < 2.0 && r.max > 2.0);
        let r = AxisRange::covering([f64::NAN].into_iter());
        assert_eq!((r.min, r.max), (0.0, 1.0));
    }

    #[test]
    fn labels_escaped() {
        let c = Chart {
            title: "a<b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "s&t".into(),
                points: vec![(0.0, 1.0), (f64::NAN, 2.0), (2.0, 3.0)],
            }],
        };
        let svg = c.to_svg();
        assert!(svg.contains("a&lt;b") && svg.contains("s&amp;t"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
