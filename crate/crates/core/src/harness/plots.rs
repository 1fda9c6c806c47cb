use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{smooth, MetricsLog};

/// Writes `<tag>.smoothed.csv` (`step,raw,smoothed`) for each run and, when
/// `svg` is set, a `<tag>.svg` line chart with the raw curve light and the
/// smoothed curve dark. Returns the written paths.
pub fn emit_plots(runs: &[(String, MetricsLog)], alpha: f64, dir: impl AsRef<Path>, svg: bool) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no metrics logs to plot".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (tag, log) in runs {
        if log.is_empty() {
            return Err(Error::InvalidArgument(format!("metrics log `{tag}` is empty")));
        }
        let raw = log.losses();
        let smoothed = smooth(&raw, alpha)?;
        let mut csv = String::from("step,raw,smoothed\n");
        for ((r, &v), &s) in log.records().iter().zip(&raw).zip(&smoothed) {
            let _ = writeln!(csv, "{},{},{}", r.step, v, s);
        }
        let path = dir.join(format!("{tag}.smoothed.csv"));
        fs::write(&path, csv)?;
        written.push(path);
        if svg {
            let steps: Vec<f64> = log.records().iter().map(|r| r.step as f64).collect();
            let path = dir.join(format!("{tag}.svg"));
            fs::write(&path, line_chart(tag, &steps, &raw, &smoothed))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn line_chart(title: &str, xs: &[f64], raw: &[f64], smoothed: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(raw.iter().chain(smoothed));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let path = |ys: &[f64]| {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{PAD},{PAD} {PAD},{} {},{}"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    for (v, y) in [(y1, PAD), (y0, H - PAD)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3}</text>"#,
            PAD - 4.0,
            y + 3.0,
            v
        );
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>"#,
            H - PAD + 14.0
        );
    }
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#9ecae1" stroke-width="1" points="{}"/>"##,
        path(raw)
    );
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#08519c" stroke-width="2" points="{}"/>"##,
        path(smoothed)
    );
    out.push_str("</svg>\n");
    out
}

fn bounds<'a>(vals: impl IntoIterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
