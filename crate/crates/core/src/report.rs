//! Versioned run reports and static SVG figures.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Document written by every CLI subcommand.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport<C: Serialize, M: Serialize> {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub config: C,
    pub metrics: M,
    /// Wall-clock seconds by phase.
    pub timings: Vec<(String, f64)>,
    pub artifacts: Vec<String>,
}

impl<C: Serialize, M: Serialize> RunReport<C, M> {
    pub fn new(command: &str, seed: u64, config: C, metrics: M) -> Self {
        Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            seed,
            config,
            metrics,
            timings: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Scatter plot with axes spanning the data range.
pub fn scatter_svg(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || hi - lo < 1e-12 {
            (lo.min(0.0).max(-1e12), lo.max(0.0).min(1e12) + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(points.iter().map(|p| p.0).collect());
    let (y0, y1) = range(points.iter().map(|p| p.1).collect());
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"15\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {})\">{}</text>\n",
        w / 2.0,
        escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 10.0,
        escape(x_label),
        h / 2.0,
        h / 2.0,
        escape(y_label),
    );
    for (v, pos) in [(x0, sx(x0)), (x1, sx(x1))] {
        s += &format!("<text x=\"{pos:.1}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text>\n", h - m + 15.0);
    }
    for (v, pos) in [(y0, sy(y0)), (y1, sy(y1))] {
        s += &format!("<text x=\"{}\" y=\"{pos:.1}\" text-anchor=\"end\">{v:.2}</text>\n", m - 4.0);
    }
    for &(x, y) in points {
        s += &format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"steelblue\" fill-opacity=\"0.5\"/>\n", sx(x), sy(y));
    }
    s + "</svg>\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_circle_per_point() {
        let svg = scatter_svg(&[(0.0, 0.0), (1.0, 2.0), (0.5, 0.5)], "a<b", "x", "y");
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(scatter_svg(&[], "t", "x", "y").ends_with("</svg>\n"));
    }
}
