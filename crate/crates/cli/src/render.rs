use std::fmt::Write as _;
use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use umtl::eval::SlidePrediction;
use umtl::{Result, UmtlError};

const CELL: u32 = 8;
const GAP: u32 = 4;
const PINK: [u8; 3] = [236, 64, 150];
const BACKGROUND: [u8; 3] = [255, 255, 255];

fn shade(score: f64, positive: bool) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    if positive {
        let k = 0.55 + 0.45 * s;
        [
            (255.0 - k * (255.0 - PINK[0] as f64)) as u8,
            (255.0 - k * (255.0 - PINK[1] as f64)) as u8,
            (255.0 - k * (255.0 - PINK[2] as f64)) as u8,
        ]
    } else {
        let g = (225.0 - 90.0 * s) as u8;
        [g, g, g]
    }
}

/// PNG with predicted labels on the left (pink = positive, shaded by score)
/// and, when known, ground truth on the right.
pub fn heatmap_png(pred: &SlidePrediction, grid: (usize, usize)) -> Result<Vec<u8>> {
    let (rows, cols) = (grid.0 as u32, grid.1 as u32);
    let panels = if pred.truths.is_some() { 2 } else { 1 };
    let width = panels * cols * CELL + (panels - 1) * GAP;
    let mut img = RgbImage::from_pixel(width.max(1), (rows * CELL).max(1), Rgb(BACKGROUND));
    let mut paint = |offset: u32, r: usize, c: usize, color: [u8; 3]| {
        for y in 0..CELL {
            for x in 0..CELL {
                img.put_pixel(offset + c as u32 * CELL + x, r as u32 * CELL + y, Rgb(color));
            }
        }
    };
    for (i, &(r, c)) in pred.positions.iter().enumerate() {
        paint(0, r, c, shade(pred.scores[i], pred.labels[i] == 1));
        if let Some(t) = &pred.truths {
            paint(cols * CELL + GAP, r, c, shade(1.0, t[i] == 1));
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| UmtlError::Other(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;

fn svg_frame(title: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            W - 16.0,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    s
}

fn y_of(v: f64) -> f64 {
    H - MARGIN - v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of values in [0,1]; missing values are drawn as empty slots.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, Option<f64>)]) -> String {
    let mut s = svg_frame(title, y_label);
    let slot = (W - MARGIN - 16.0) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * slot;
        if let Some(v) = v {
            let y = y_of(*v);
            let _ = writeln!(
                s,
                r##"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#c2185b"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"##,
                x + slot * 0.15,
                slot * 0.7,
                H - MARGIN - y,
                x + slot / 2.0,
                y - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            H - MARGIN + 16.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of (x in [0,1], y in [0,1]) points.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut s = svg_frame(title, y_label);
    let x_of = |v: f64| MARGIN + v.clamp(0.0, 1.0) * (W - MARGIN - 16.0);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            x_of(v),
            H - MARGIN + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", x_of(x), y_of(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#c2185b" stroke-width="2" points="{}"/>"##,
        path.join(" ")
    );
    for &(x, y) in points {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#c2185b"/>"##, x_of(x), y_of(y));
    }
    s.push_str("</svg>\n");
    s
}
