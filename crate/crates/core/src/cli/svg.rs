//! Minimal deterministic SVG writer. Coordinates are printed with fixed
//! precision so identical inputs give byte-identical files.

use std::fmt::Write;

/// Axis-aligned data window mapped onto a pixel canvas (y up).
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub top: f64,
}

impl Frame {
    pub fn new(bounds: [f64; 4], width: f64, height: f64, left: f64, top: f64) -> Self {
        let [mut x0, mut x1, mut y0, mut y1] = bounds;
        if !(x1 > x0) {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        Self {
            x0,
            x1,
            y0,
            y1,
            width,
            height,
            left,
            top,
        }
    }

    pub fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.width
    }

    pub fn py(&self, y: f64) -> f64 {
        self.top + (self.y1 - y) / (self.y1 - self.y0) * self.height
    }

    /// Data length along x in pixels.
    pub fn sx(&self, len: f64) -> f64 {
        len / (self.x1 - self.x0) * self.width
    }
}

pub struct Svg {
    body: String,
    width: f64,
    height: f64,
}

fn f(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            body: String::new(),
            width,
            height,
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            f(x),
            f(y),
            f(w),
            f(h)
        );
    }

    pub fn frame_box(&mut self, fr: &Frame) {
        let _ = writeln!(
            self.body,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444" stroke-width="1"/>"##,
            f(fr.left),
            f(fr.top),
            f(fr.width),
            f(fr.height)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", f(*x), f(*y))).collect();
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#,
            coords.join(" ")
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            f(cx),
            f(cy),
            f(r)
        );
    }

    /// Line with a small open arrowhead at the end.
    pub fn arrow(&mut self, from: (f64, f64), to: (f64, f64), stroke: &str) {
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let len = dx.hypot(dy);
        if len < 1e-9 {
            return;
        }
        let (ux, uy) = (dx / len, dy / len);
        let head = (0.35 * len).min(4.0);
        let a = (to.0 - head * (ux - 0.5 * uy), to.1 - head * (uy + 0.5 * ux));
        let b = (to.0 - head * (ux + 0.5 * uy), to.1 - head * (uy - 0.5 * ux));
        let _ = writeln!(
            self.body,
            r#"<path d="M{},{} L{},{} M{},{} L{},{} L{},{}" fill="none" stroke="{stroke}" stroke-width="0.8"/>"#,
            f(from.0),
            f(from.1),
            f(to.0),
            f(to.1),
            f(a.0),
            f(a.1),
            f(to.0),
            f(to.1),
            f(b.0),
            f(b.1)
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let escaped = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="{size}">{escaped}</text>"#,
            f(x),
            f(y)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}
