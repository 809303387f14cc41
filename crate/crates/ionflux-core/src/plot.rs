//! Minimal self-contained SVG emission: line charts, parity scatters with
//! relative bands, and labelled heatmaps. No external assets, deterministic
//! byte-for-byte output; a CSV with the same numbers always accompanies the
//! figure so anything can re-plot it.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for (x, y) in points {
            if x.is_finite() {
                x_min = x_min.min(*x);
                x_max = x_max.max(*x);
            }
            if y.is_finite() {
                y_min = y_min.min(*y);
                y_max = y_max.max(*y);
            }
        }
        if !x_min.is_finite() {
            (x_min, x_max) = (0.0, 1.0);
        }
        if !y_min.is_finite() {
            (y_min, y_max) = (0.0, 1.0);
        }
        if x_max - x_min < 1e-300 {
            x_max = x_min + 1.0;
        }
        // Pad y a little; never clip negative values.
        let pad = 0.05 * (y_max - y_min).max(1e-12);
        Frame {
            x_min,
            x_max,
            y_min: y_min - pad,
            y_max: y_max + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    );
    let _ = write!(
        out,
        r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/><text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"##,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = fmt(MARGIN_L);
    let x1 = fmt(WIDTH - MARGIN_R);
    let y0 = fmt(MARGIN_T);
    let y1 = fmt(HEIGHT - MARGIN_B);
    let _ = write!(
        out,
        r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#444" stroke-width="1"/>"##,
        fmt(WIDTH - MARGIN_L - MARGIN_R),
        fmt(HEIGHT - MARGIN_T - MARGIN_B)
    );
    // Four ticks per axis.
    for i in 0..=4 {
        let xv = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let yv = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let px = fmt(frame.px(xv));
        let py = fmt(frame.py(yv));
        let _ = write!(
            out,
            r##"<line x1="{px}" y1="{y1}" x2="{px}" y2="{}" stroke="#444"/><text x="{px}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"##,
            fmt(HEIGHT - MARGIN_B + 4.0),
            fmt(HEIGHT - MARGIN_B + 16.0),
            tick_label(xv)
        );
        let _ = write!(
            out,
            r##"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="#444"/><text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"##,
            fmt(MARGIN_L - 4.0),
            fmt(MARGIN_L - 7.0),
            fmt(frame.py(yv) + 3.0),
            tick_label(yv)
        );
    }
    // Zero line when the frame spans it.
    if frame.y_min < 0.0 && frame.y_max > 0.0 {
        let py = fmt(frame.py(0.0));
        let _ = write!(
            out,
            r##"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="#999" stroke-dasharray="4 3"/>"##
        );
    }
    let _ = write!(
        out,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"##,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r##"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"##,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(y_label)
    );
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Multi-series line chart. Negative values are drawn, never clipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()));
    axes(&mut out, &frame, x_label, y_label);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut path = String::new();
        for (i, (x, y)) in s.points.iter().enumerate() {
            if !y.is_finite() {
                continue;
            }
            let cmd = if i == 0 || path.is_empty() { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{} {} ", fmt(frame.px(*x)), fmt(frame.py(*y)));
        }
        let _ = write!(
            out,
            r##"<path d="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"##,
            path.trim_end()
        );
        let ly = MARGIN_T + 14.0 + 16.0 * si as f64;
        let _ = write!(
            out,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"##,
            fmt(WIDTH - MARGIN_R + 8.0),
            fmt(ly - 3.0),
            fmt(WIDTH - MARGIN_R + 26.0),
            fmt(ly - 3.0),
            fmt(WIDTH - MARGIN_R + 30.0),
            fmt(ly),
            escape(&s.label)
        );
    }
    out.push_str("</svg>");
    out
}

/// Parity scatter with the identity line and +-`band` relative band lines.
pub fn parity_scatter(title: &str, pairs: &[(f64, f64)], band: f64) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let all: Vec<(f64, f64)> = pairs
        .iter()
        .flat_map(|(t, p)| [(*t, *p), (*t, *t)])
        .collect();
    let frame = Frame::from_points(all.iter());
    axes(&mut out, &frame, "truth (mol/m^3)", "prediction (mol/m^3)");
    let lo = frame.x_min.max(frame.y_min);
    let hi = frame.x_max.min(frame.y_max);
    let _ = write!(
        out,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#333" stroke-width="1"/>"##,
        fmt(frame.px(lo)),
        fmt(frame.py(lo)),
        fmt(frame.px(hi)),
        fmt(frame.py(hi))
    );
    for sign in [1.0 - band, 1.0 + band] {
        let mut path = String::new();
        for i in 0..=32 {
            let t = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 32.0;
            let y = sign * t;
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{} {} ", fmt(frame.px(t)), fmt(frame.py(y.clamp(frame.y_min, frame.y_max))));
        }
        let _ = write!(
            out,
            r##"<path d="{}" fill="none" stroke="#888" stroke-dasharray="5 4" stroke-width="1"/>"##,
            path.trim_end()
        );
    }
    for (t, p) in pairs {
        if !t.is_finite() || !p.is_finite() {
            continue;
        }
        let _ = write!(
            out,
            r##"<circle cx="{}" cy="{}" r="2.2" fill="#1f77b4" fill-opacity="0.55"/>"##,
            fmt(frame.px(*t)),
            fmt(frame.py(*p))
        );
    }
    out.push_str("</svg>");
    out
}

/// Labelled square heatmap (attention matrices). Rows are queries, columns
/// are keys; the color scale runs white -> blue over [0, max].
pub fn heatmap(title: &str, matrix: &[Vec<f64>], labels: &[&str]) -> String {
    let n = matrix.len();
    let mut out = String::new();
    header(&mut out, title);
    let peak = matrix
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let cell = ((WIDTH - MARGIN_L - MARGIN_R).min(HEIGHT - MARGIN_T - MARGIN_B)) / n as f64;
    let x0 = MARGIN_L;
    let y0 = MARGIN_T + 8.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let s = (v / peak).clamp(0.0, 1.0);
            let r = (255.0 - 224.0 * s) as u8;
            let g = (255.0 - 136.0 * s) as u8;
            let b = 255u8;
            let _ = write!(
                out,
                r##"<rect x="{}" y="{}" width="{}" height="{}" fill="rgb({r},{g},{b})" stroke="#ddd" stroke-width="0.5"/>"##,
                fmt(x0 + j as f64 * cell),
                fmt(y0 + i as f64 * cell),
                fmt(cell),
                fmt(cell)
            );
            let _ = write!(
                out,
                r##"<text x="{}" y="{}" font-family="sans-serif" font-size="8" text-anchor="middle" fill="#333">{:.2}</text>"##,
                fmt(x0 + (j as f64 + 0.5) * cell),
                fmt(y0 + (i as f64 + 0.62) * cell),
                v
            );
        }
    }
    for (i, label) in labels.iter().enumerate().take(n) {
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"##,
            fmt(x0 - 6.0),
            fmt(y0 + (i as f64 + 0.62) * cell),
            escape(label)
        );
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"##,
            fmt(x0 + (i as f64 + 0.5) * cell),
            fmt(y0 + n as f64 * cell + 14.0),
            escape(label)
        );
    }
    out.push_str("</svg>");
    out
}

/// Grouped bar chart for ablation summaries.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-12);
    let frame = Frame {
        x_min: 0.0,
        x_max: bars.len() as f64,
        y_min: 0.0,
        y_max: y_max * 1.1,
    };
    axes(&mut out, &frame, "", y_label);
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_L + i as f64 * slot + 0.15 * slot;
        let y = frame.py(*v);
        let _ = write!(
            out,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}"/>"##,
            fmt(x),
            fmt(y),
            fmt(0.7 * slot),
            fmt(HEIGHT - MARGIN_B - y)
        );
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="9" text-anchor="middle" transform="rotate(-35 {} {})">{}</text>"##,
            fmt(x + 0.35 * slot),
            fmt(HEIGHT - MARGIN_B + 24.0),
            fmt(x + 0.35 * slot),
            fmt(HEIGHT - MARGIN_B + 24.0),
            escape(label)
        );
    }
    out.push_str("</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_self_contained() {
        let series = vec![Series {
            label: "Na+".into(),
            points: vec![(0.0, 0.0), (1.0, 0.4), (2.0, -0.2)],
        }];
        let a = line_chart("rollout", "flux", "rejection", &series);
        let b = line_chart("rollout", "flux", "rejection", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>"));
        assert!(!a.contains("http://") || a.contains("xmlns"), "no external refs");
        assert!(!a.contains("href"));
    }

    #[test]
    fn negative_values_are_inside_frame() {
        let series = vec![Series {
            label: "NO3-".into(),
            points: vec![(0.0, 0.0), (1.0, -0.5)],
        }];
        let svg = line_chart("neg", "x", "y", &series);
        // The zero dashed line appears only when the frame spans zero.
        assert!(svg.contains("stroke-dasharray=\"4 3\""));
    }

    #[test]
    fn heatmap_has_all_cells_and_labels() {
        let m = vec![vec![0.5; 8]; 8];
        let labels = crate::data::ION_LABELS;
        let svg = heatmap("attention", &m, &labels);
        assert_eq!(svg.matches("<rect").count(), 65); // 64 cells + background
        assert!(svg.contains("Na⁺") && svg.contains("SO₄²⁻"));
    }

    #[test]
    fn parity_scatter_counts_points() {
        let pairs = vec![(1.0, 1.05), (2.0, 1.8), (3.0, 3.0)];
        let svg = parity_scatter("parity", &pairs, 0.1);
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
