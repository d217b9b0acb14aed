//! Minimal SVG charts: line plots with optional bands, and a binary raster.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// `(x, low, high)` shaded behind the line.
    pub band: Option<Vec<(f64, f64, f64)>>,
}

#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical dashed lines at these x positions.
    pub markers: Vec<f64>,
    pub y_range: Option<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(out, r#"<line x1="{px:.1}" y1="{b}" x2="{px:.1}" y2="{}" stroke="black"/>"#, b + 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
            b + 16.0,
            tick(fx)
        );
        let _ = writeln!(out, r#"<line x1="{}" y1="{py:.1}" x2="{l}" y2="{py:.1}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            py + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        esc(y_label)
    );
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.0}k", v / 1e3)
    } else if a >= 10.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.markers.iter().copied());
        let (x0, x1) = widen(
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            let ys = self.series.iter().flat_map(|s| {
                s.points
                    .iter()
                    .map(|p| p.1)
                    .chain(s.band.iter().flatten().flat_map(|b| [b.1, b.2]))
            });
            widen(
                ys.clone().fold(f64::INFINITY, f64::min),
                ys.fold(f64::NEG_INFINITY, f64::max),
            )
        });
        let f = Frame { x0, x1, y0, y1 };
        let mut out = String::new();
        header(&mut out, &self.title);
        axes(&mut out, &f, &self.x_label, &self.y_label);

        for (i, s) in self.series.iter().enumerate() {
            let Some(band) = s.band.as_ref().filter(|b| !b.is_empty()) else {
                continue;
            };
            let mut d = String::new();
            for (j, (x, _, hi)) in band.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, f.px(*x), f.py(*hi));
            }
            for (x, lo, _) in band.iter().rev() {
                let _ = write!(d, "L{:.2},{:.2} ", f.px(*x), f.py(*lo));
            }
            let _ = writeln!(
                out,
                r#"<path class="band" d="{}Z" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
                d,
                color(i)
            );
        }
        for m in &self.markers {
            let px = f.px(*m);
            let _ = writeln!(
                out,
                r#"<line class="marker" x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{}" stroke="gray" stroke-dasharray="4,3"/>"#,
                H - BOTTOM
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            if s.points.is_empty() {
                continue;
            }
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                pts.join(" "),
                color(i)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let y = TOP + 14.0 + 18.0 * i as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"/>"#,
                x + 18.0,
                color(i)
            );
            let _ = writeln!(
                out,
                r#"<text class="legend" x="{}" y="{}">{}</text>"#,
                x + 24.0,
                y + 4.0,
                esc(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// One row per module, one column per step; filled cells are active.
#[derive(Clone, Debug, Default)]
pub struct Raster {
    pub title: String,
    pub rows: usize,
    /// Per step, the active row indices.
    pub columns: Vec<Vec<usize>>,
    /// Column indices after which an episode ended.
    pub boundaries: Vec<usize>,
}

impl Raster {
    pub fn render(&self) -> String {
        let cols = self.columns.len().max(1) as f64;
        let rows = self.rows.max(1) as f64;
        let cw = (W - LEFT - 24.0) / cols;
        let ch = (H - TOP - BOTTOM) / rows;
        let mut out = String::new();
        header(&mut out, &self.title);
        for r in 0..self.rows {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.1}" text-anchor="end">module {r}</text>"#,
                LEFT - 6.0,
                TOP + ch * (r as f64 + 0.5) + 4.0
            );
        }
        for (c, active) in self.columns.iter().enumerate() {
            for &r in active {
                let _ = writeln!(
                    out,
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
                    LEFT + cw * c as f64,
                    TOP + ch * r as f64,
                    cw,
                    ch
                );
            }
        }
        for &b in &self.boundaries {
            let x = LEFT + cw * (b as f64 + 1.0);
            let _ = writeln!(
                out,
                r#"<line class="marker" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{}" stroke="red"/>"#,
                H - BOTTOM
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">step</text>"#,
            (LEFT + W - 24.0) / 2.0,
            H - 16.0
        );
        out.push_str("</svg>\n");
        out
    }
}
