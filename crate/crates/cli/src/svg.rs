//! Minimal SVG plots: line charts, grouped bars and heatmaps.
//!
//! Numbers are written with fixed precision so identical inputs give
//! identical bytes.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    out: String,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, y_lo: f64, y_hi: f64) -> Self {
        let (y_lo, y_hi) = if y_hi > y_lo { (y_lo, y_hi) } else { (y_lo - 0.5, y_lo + 0.5) };
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            H - BOTTOM,
            W - RIGHT,
            H - BOTTOM
        );
        let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, H - BOTTOM);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 14.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(y_label)
        );
        let mut f = Self { out, y_lo, y_hi };
        for k in 0..=4 {
            let v = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
            let y = f.y(v);
            let _ = writeln!(
                f.out,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 4.0
            );
        }
        f
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y_lo) / (self.y_hi - self.y_lo) * (H - TOP - BOTTOM)
    }

    fn x_tick(&mut self, x: f64, label: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(
                self.out,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 9.0,
                PALETTE[i % PALETTE.len()],
                x + 14.0,
                y,
                escape(name)
            );
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn y_range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let mut hi = f64::NEG_INFINITY;
    let mut lo: f64 = 0.0;
    for &v in values.filter(|v| v.is_finite()) {
        hi = hi.max(v);
        lo = lo.min(v);
    }
    if hi.is_finite() {
        (lo, hi.max(lo))
    } else {
        (0.0, 1.0)
    }
}

/// One line per series over a shared x axis; non-finite points break the line.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (lo, hi) = y_range(series.iter().flat_map(|(_, v)| v.iter()));
    let mut f = Frame::new(title, x_label, y_label, lo, hi);
    let (x_lo, x_hi) = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.5, a + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
    let step = (xs.len() / 10).max(1);
    for (i, &x) in xs.iter().enumerate() {
        if i % step == 0 {
            f.x_tick(px(x), &format!("{x}"));
        }
    }
    for (s, (_, ys)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let mut segment = Vec::new();
        let flush = |seg: &mut Vec<String>, out: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, seg.join(" "));
            }
            seg.clear();
        };
        for (&x, &y) in xs.iter().zip(ys) {
            if y.is_finite() {
                let (cx, cy) = (px(x), f.y(y));
                segment.push(format!("{cx:.1},{cy:.1}"));
                let _ = writeln!(f.out, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="3" fill="{color}"/>"#);
            } else {
                flush(&mut segment, &mut f.out);
            }
        }
        flush(&mut segment, &mut f.out);
    }
    f.legend(&series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    f.finish()
}

/// Side-by-side bars per category, one color per series.
pub fn grouped_bars(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (lo, hi) = y_range(series.iter().flat_map(|(_, v)| v.iter()));
    let mut f = Frame::new(title, x_label, y_label, lo, hi);
    let slot = (W - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let x0 = LEFT + slot * c as f64 + slot * 0.1;
        f.x_tick(x0 + slot * 0.4, name);
        for (s, (_, ys)) in series.iter().enumerate() {
            let v = ys.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let (y_top, y_base) = (f.y(v.max(0.0)), f.y(v.min(0.0)));
            let _ = writeln!(
                f.out,
                r#"<rect x="{:.1}" y="{y_top:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                x0 + bar * s as f64,
                y_base - y_top,
                PALETTE[s % PALETTE.len()]
            );
        }
    }
    f.legend(&series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    f.finish()
}

/// Cells shaded from white (0) to blue (1); absent cells are grey.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
    let cw = (W - LEFT - RIGHT) / cols.len().max(1) as f64;
    let ch = (H - TOP - BOTTOM) / rows.len().max(1) as f64;
    for (r, row) in values.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x, y) = (LEFT + cw * c as f64, TOP + ch * r as f64);
            let fill = match cell {
                Some(v) => {
                    let t = v.clamp(0.0, 1.0);
                    let shade = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
                    format!("#{:02x}{:02x}{:02x}", shade(255.0, 31.0), shade(255.0, 119.0), shade(255.0, 180.0))
                }
                None => "#cccccc".to_string(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}" stroke="white"/>"#
            );
            if let Some(v) = cell {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.2}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
        }
    }
    for (r, name) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            TOP + ch * (r as f64 + 0.5) + 4.0,
            escape(name)
        );
    }
    for (c, name) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + cw * (c as f64 + 0.5),
            H - BOTTOM + 16.0,
            escape(name)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}
