//! Trace files and minimal SVG line charts.

use std::fmt::Write;

use crate::CliError;

pub const TRACE_HEADER: &str = "t_s,gt,pred";

/// Ground-truth and predicted BVP sampled on a uniform time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub t_s: Vec<f64>,
    pub gt: Vec<f64>,
    pub pred: Vec<f64>,
}

impl Trace {
    pub fn from_signals(fs: f64, gt: &[f64], pred: &[f64]) -> Self {
        Trace {
            t_s: (0..gt.len()).map(|i| i as f64 / fs).collect(),
            gt: gt.to_vec(),
            pred: pred.to_vec(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for i in 0..self.t_s.len() {
            let _ = writeln!(s, "{},{},{}", self.t_s[i], self.gt[i], self.pred[i]);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Config(format!("malformed trace: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == TRACE_HEADER => {}
            other => return Err(bad(format!("expected header {TRACE_HEADER:?}, got {other:?}"))),
        }
        let mut tr = Trace {
            t_s: Vec::new(),
            gt: Vec::new(),
            pred: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("row {} needs three finite values", i + 1)));
            }
            tr.t_s.push(vals[0]);
            tr.gt.push(vals[1]);
            tr.pred.push(vals[2]);
        }
        if tr.t_s.len() < 8 {
            return Err(bad(format!("need at least 8 samples, got {}", tr.t_s.len())));
        }
        tr.fs().map_err(bad)?;
        Ok(tr)
    }

    /// Sampling rate implied by the time column, which must be uniform.
    pub fn fs(&self) -> Result<f64, String> {
        let dt = self.t_s[1] - self.t_s[0];
        if !(dt > 0.0) {
            return Err("time column must increase".into());
        }
        for w in self.t_s.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1.0) {
                return Err(format!("non-uniform time step near t={}", w[0]));
            }
        }
        Ok(1.0 / dt)
    }
}

pub struct Series<'a> {
    pub label: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub dotted: bool,
    pub color: &'a str,
}

const W: f64 = 720.0;
const H: f64 = 320.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart sharing one axis range across all series. Output depends only
/// on the inputs.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.xs.iter().copied()));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.ys.iter().copied()));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT
    );
    for (v, anchor_y) in [(y0, H - BOTTOM), (y1, TOP)] {
        let _ = writeln!(s, r#"<text x="{}" y="{anchor_y:.2}" text-anchor="end">{v:.3}</text>"#, LEFT - 4.0);
    }
    for (v, x, anchor) in [(x0, LEFT, "start"), (x1, W - RIGHT, "end")] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, H - BOTTOM + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser.xs.iter().zip(ser.ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let dash = if ser.dotted { r#" stroke-dasharray="2,3""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            esc(ser.label),
            ser.color,
            pts.join(" ")
        );
        let ly = TOP + 4.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="1.5"{dash}/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 150.0,
            W - RIGHT - 120.0,
            ser.color,
            W - RIGHT - 114.0,
            ly + 4.0,
            esc(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
