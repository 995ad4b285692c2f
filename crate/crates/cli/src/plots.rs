//! Static loss-curve and per-fold charts (SVG, plus a PNG of the curves).

use std::fmt::Write as _;

use image::{Rgb, RgbImage};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Train and validation loss per epoch for one run or fold.
pub struct Curve<'a> {
    pub label: String,
    pub train: &'a [f64],
    pub val: &'a [f64],
}

struct Frame {
    epochs: usize,
    y_max: f64,
}

impl Frame {
    fn new(curves: &[Curve]) -> Self {
        let epochs = curves.iter().map(|c| c.train.len().max(c.val.len())).max().unwrap_or(1).max(2);
        let y_max = curves
            .iter()
            .flat_map(|c| c.train.iter().chain(c.val))
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        Frame { epochs, y_max: if y_max > 0.0 { y_max * 1.05 } else { 1.0 } }
    }

    /// Epoch `e` is 1-based.
    fn x(&self, e: usize) -> f64 {
        MARGIN + (e - 1) as f64 / (self.epochs - 1) as f64 * (W - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        H - MARGIN - v.clamp(0.0, self.y_max) / self.y_max * (H - 2.0 * MARGIN)
    }

    fn points(&self, series: &[f64]) -> Vec<(f64, f64)> {
        series.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (self.x(i + 1), self.y(v))).collect()
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn svg_axes(s: &mut String, title: &str, y_label: &str, y_max: f64) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_max:.3}</text>"#, x0 - 4.0, y1 + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, x0 - 4.0, y0 + 4.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0);
}

/// Solid lines for training loss, dashed for validation, one colour per curve.
pub fn curves_svg(title: &str, curves: &[Curve]) -> String {
    let f = Frame::new(curves);
    let mut s = String::new();
    svg_axes(&mut s, title, "loss", f.y_max);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch (1 to {})</text>"#, W / 2.0, H - 15.0, f.epochs);
    for (i, c) in curves.iter().enumerate() {
        let color = hex(PALETTE[i % PALETTE.len()]);
        for (series, dash) in [(c.train, ""), (c.val, r#" stroke-dasharray="5,3""#)] {
            let pts: Vec<String> = f.points(series).iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#, pts.join(" "));
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#, W - MARGIN, c.label);
    }
    s.push_str("</svg>\n");
    s
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>, dashed: bool) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        if dashed && (k / 4) % 2 == 1 {
            continue;
        }
        let t = k as f64 / steps as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round(), (y0 + t * (y1 - y0)).round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Raster version of [`curves_svg`] without text.
pub fn curves_png(curves: &[Curve]) -> RgbImage {
    let f = Frame::new(curves);
    let mut img = RgbImage::from_pixel(W as u32, H as u32, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, (MARGIN, H - MARGIN), (W - MARGIN, H - MARGIN), black, false);
    draw_line(&mut img, (MARGIN, H - MARGIN), (MARGIN, MARGIN), black, false);
    for (i, c) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for (series, dashed) in [(c.train, false), (c.val, true)] {
            for w in f.points(series).windows(2) {
                draw_line(&mut img, w[0], w[1], color, dashed);
            }
        }
    }
    img
}

/// Vertical bars, one per labelled value, on a `[0, y_max]` axis.
pub fn bars_svg(title: &str, y_label: &str, bars: &[(String, f64)], y_max: f64) -> String {
    let mut s = String::new();
    svg_axes(&mut s, title, y_label, y_max);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, y_max) / y_max * (H - 2.0 * MARGIN);
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let y = H - MARGIN - h;
        let color = hex(PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>"#, slot * 0.7);
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, y - 4.0);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#, H - MARGIN + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
