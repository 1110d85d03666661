//! Small multi-panel SVG line plots.

use std::fmt::Write;

const PANEL_W: f64 = 340.0;
const PANEL_H: f64 = 250.0;
const LEFT: f64 = 62.0;
const RIGHT: f64 = 14.0;
const TOP: f64 = 26.0;
const BOTTOM: f64 = 44.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub enum Mark {
    Line(Vec<(f64, f64)>),
    /// Right-continuous step function, as for an ECDF.
    Step(Vec<(f64, f64)>),
    /// Shaded region between `low` and `high` at each `x`.
    Band(Vec<(f64, f64, f64)>),
    HLine(f64),
    VLine(f64),
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub marks: Vec<Mark>,
}

impl Panel {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            marks: Vec::new(),
        }
    }

    pub fn mark(mut self, m: Mark) -> Self {
        self.marks.push(m);
        self
    }

    fn extent(&self) -> ((f64, f64), (f64, f64)) {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
        let see = |r: &mut (f64, f64), v: f64| {
            if v.is_finite() {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        };
        for m in &self.marks {
            match m {
                Mark::Line(p) | Mark::Step(p) => {
                    for &(x, y) in p {
                        see(&mut xs, x);
                        see(&mut ys, y);
                    }
                }
                Mark::Band(p) => {
                    for &(x, lo, hi) in p {
                        see(&mut xs, x);
                        see(&mut ys, lo);
                        see(&mut ys, hi);
                    }
                }
                Mark::HLine(y) => see(&mut ys, *y),
                Mark::VLine(x) => see(&mut xs, *x),
            }
        }
        (widen(xs), widen(ys))
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        let pad = 0.5 * lo.abs().max(1.0);
        return (lo - pad, hi + pad);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.0 {
        2.0
    } else if f < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks((lo, hi): (f64, f64)) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), decimals)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `panels` on a grid with `cols` panels per row.
pub fn render(panels: &[Panel], cols: usize) -> String {
    let cols = cols.clamp(1, panels.len().max(1));
    let rows = panels.len().div_ceil(cols).max(1);
    let (w, h) = (PANEL_W * cols as f64, PANEL_H * rows as f64);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (k, p) in panels.iter().enumerate() {
        let ox = PANEL_W * (k % cols) as f64;
        let oy = PANEL_H * (k / cols) as f64;
        panel(&mut s, p, ox, oy);
    }
    s.push_str("</svg>\n");
    s
}

fn panel(s: &mut String, p: &Panel, ox: f64, oy: f64) {
    let (xr, yr) = p.extent();
    let (x0, x1) = (ox + LEFT, ox + PANEL_W - RIGHT);
    let (y0, y1) = (oy + PANEL_H - BOTTOM, oy + TOP);
    let sx = |x: f64| x0 + (x - xr.0) / (xr.1 - xr.0) * (x1 - x0);
    let sy = |y: f64| y0 + (y - yr.0) / (yr.1 - yr.0) * (y1 - y0);
    let path = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        let mut d = String::new();
        for (i, (x, y)) in pts.enumerate() {
            write!(d, "{}{:.2},{:.2} ", if i == 0 { 'M' } else { 'L' }, sx(x), sy(y)).unwrap();
        }
        d
    };

    writeln!(s, "<g>").unwrap();
    writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
        x1 - x0,
        y0 - y1
    )
    .unwrap();
    let (xt, xd) = ticks(xr);
    for t in xt {
        let x = sx(t);
        writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t:.xd$}</text>"##,
            y0 + 4.0,
            y0 + 16.0
        )
        .unwrap();
    }
    let (yt, yd) = ticks(yr);
    for t in yt {
        let y = sy(t);
        writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t:.yd$}</text>"##,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">{}</text>"#,
        (x0 + x1) / 2.0,
        oy + 16.0,
        escape(&p.title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        oy + PANEL_H - 8.0,
        escape(&p.x_label)
    )
    .unwrap();
    let (lx, ly) = (ox + 14.0, (y0 + y1) / 2.0);
    writeln!(
        s,
        r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
        escape(&p.y_label)
    )
    .unwrap();

    let mut color = 0;
    for m in &p.marks {
        match m {
            Mark::Band(pts) if !pts.is_empty() => {
                let mut outline: Vec<(f64, f64)> = pts.iter().map(|&(x, lo, _)| (x, lo)).collect();
                outline.extend(pts.iter().rev().map(|&(x, _, hi)| (x, hi)));
                let d = path(&mut outline.into_iter());
                writeln!(s, r#"<path d="{d}Z" fill="{}" fill-opacity="0.25" stroke="none"/>"#, PALETTE[color % 6]).unwrap();
            }
            Mark::Line(pts) if !pts.is_empty() => {
                let d = path(&mut pts.iter().copied());
                writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, PALETTE[color % 6]).unwrap();
                color += 1;
            }
            Mark::Step(pts) if !pts.is_empty() => {
                let mut stepped = Vec::with_capacity(2 * pts.len());
                let mut prev = 0.0;
                for &(x, y) in pts {
                    stepped.push((x, prev));
                    stepped.push((x, y));
                    prev = y;
                }
                let d = path(&mut stepped.into_iter());
                writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, PALETTE[color % 6]).unwrap();
                color += 1;
            }
            Mark::HLine(y) => {
                writeln!(
                    s,
                    r##"<line x1="{x0:.2}" y1="{0:.2}" x2="{x1:.2}" y2="{0:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                    sy(*y)
                )
                .unwrap();
            }
            Mark::VLine(x) => {
                writeln!(
                    s,
                    r##"<line x1="{0:.2}" y1="{y0:.2}" x2="{0:.2}" y2="{y1:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                    sx(*x)
                )
                .unwrap();
            }
            _ => {}
        }
    }
    writeln!(s, "</g>").unwrap();
}
