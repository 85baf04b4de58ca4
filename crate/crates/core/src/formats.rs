//! Match files, metric reports and SVG plots.
//!
//! Text match files hold one match per line as `x_a y_a x_b y_b conf`;
//! lines starting with `#` are comments. Binary match files start with the
//! magic `DMM1`, then a little-endian `u64` count and five `f64` per match.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::Match;

pub const MATCH_MAGIC: &[u8; 4] = b"DMM1";

pub fn matches_to_text(matches: &[Match]) -> String {
    let mut s = String::from("# x_a y_a x_b y_b conf\n");
    for m in matches {
        writeln!(s, "{} {} {} {} {}", m.a[0], m.a[1], m.b[0], m.b[1], m.conf).expect("write to string");
    }
    s
}

pub fn matches_from_text(text: &str) -> Result<Vec<Match>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if v.len() != 5 {
            return Err(Error::Format(format!("line {}: expected 5 fields, found {}", i + 1, v.len())));
        }
        out.push(Match {
            a: [v[0], v[1]],
            b: [v[2], v[3]],
            conf: v[4],
        });
    }
    Ok(out)
}

pub fn matches_to_bytes(matches: &[Match]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 40 * matches.len());
    out.extend_from_slice(MATCH_MAGIC);
    out.extend_from_slice(&(matches.len() as u64).to_le_bytes());
    for m in matches {
        for v in [m.a[0], m.a[1], m.b[0], m.b[1], m.conf] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn matches_from_bytes(bytes: &[u8]) -> Result<Vec<Match>> {
    if bytes.len() < 12 || &bytes[..4] != MATCH_MAGIC {
        return Err(Error::Format("missing DMM1 header".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if n.checked_mul(40) != Some(body.len()) {
        return Err(Error::Format(format!("DMM1 body of {} bytes for {n} matches", body.len())));
    }
    let f = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().expect("8 bytes"));
    Ok((0..n)
        .map(|i| Match {
            a: [f(5 * i), f(5 * i + 1)],
            b: [f(5 * i + 2), f(5 * i + 3)],
            conf: f(5 * i + 4),
        })
        .collect())
}

/// Writes text or binary depending on the extension (`.dmm` is binary).
pub fn write_matches(path: &Path, matches: &[Match]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "dmm") {
        fs::write(path, matches_to_bytes(matches))?;
    } else {
        fs::write(path, matches_to_text(matches))?;
    }
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<Vec<Match>> {
    if path.extension().is_some_and(|e| e == "dmm") {
        matches_from_bytes(&fs::read(path)?)
    } else {
        matches_from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pair: String,
    /// Corner error in pixels or pose error in degrees; `null` in JSON when infinite.
    pub error: Option<f64>,
    pub matches: usize,
    pub ncm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub thresholds: Vec<f64>,
    pub auc: Vec<f64>,
    pub ncm: usize,
    pub total_matches: usize,
    /// `null` when no match was evaluated.
    pub rmse: Option<f64>,
    pub per_pair_errors: Vec<PairError>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Errors with failures mapped to infinity.
    pub fn errors(&self) -> Vec<f64> {
        self.per_pair_errors.iter().map(|p| p.error.unwrap_or(f64::INFINITY)).collect()
    }

    /// Plain-text table with one AUC column per threshold.
    pub fn table(&self) -> String {
        let mut head = String::from("metric");
        let mut row = self.metric.clone();
        for (t, a) in self.thresholds.iter().zip(&self.auc) {
            write!(head, "\tAUC@{t}").expect("write to string");
            write!(row, "\t{:.2}", 100.0 * a).expect("write to string");
        }
        let rmse = self.rmse.map_or("n/a".to_string(), |r| format!("{r:.3}"));
        format!("{head}\tNCM\tRMSE\n{row}\t{}\t{rmse}\n", self.ncm)
    }
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, x_max: f64, y_min: f64, y_max: f64, path: &str) -> String {
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, SVG_W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, SVG_W / 2.0, SVG_H - 8.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0,
        escape(y_label)
    )
    .unwrap();
    writeln!(s, r#"<text x="{MARGIN}" y="{}" font-size="10">0</text>"#, SVG_H - MARGIN + 12.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x_max:.3}</text>"#, SVG_W - MARGIN, SVG_H - MARGIN + 12.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_max:.3}</text>"#, MARGIN - 2.0, MARGIN + 4.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_min:.3}</text>"#, MARGIN - 2.0, SVG_H - MARGIN).unwrap();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{path}"/>"#).unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn points(xy: &[(f64, f64)], x_max: f64, y_min: f64, y_max: f64) -> String {
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let span = if y_max > y_min { y_max - y_min } else { 1.0 };
    xy.iter()
        .map(|&(x, y)| {
            let px = MARGIN + pw * (x / x_max).clamp(0.0, 1.0);
            let py = MARGIN + ph * (1.0 - ((y - y_min) / span).clamp(0.0, 1.0));
            format!("{px:.2},{py:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cumulative fraction of pairs with error at most `x`, for `x` in `[0, x_max]`.
pub fn cumulative_error_svg(errors: &[f64], x_max: f64, title: &str, unit: &str) -> String {
    let mut e: Vec<f64> = errors.iter().copied().filter(|v| !v.is_nan()).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len().max(1) as f64;
    let mut xy = vec![(0.0, 0.0)];
    for (k, &v) in e.iter().enumerate() {
        if v > x_max {
            break;
        }
        xy.push((v, k as f64 / n));
        xy.push((v, (k + 1) as f64 / n));
    }
    let last = xy.last().map_or(0.0, |p| p.1);
    xy.push((x_max, last));
    svg_frame(title, &format!("error ({unit})"), "fraction of pairs", x_max, 0.0, 1.0, &points(&xy, x_max, 0.0, 1.0))
}

/// Loss against step index.
pub fn loss_curve_svg(losses: &[f64], title: &str) -> String {
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    let y_min = finite.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let y_max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(y_min + 1e-12);
    let x_max = (losses.len().max(2) - 1) as f64;
    let xy: Vec<(f64, f64)> = losses.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (i as f64, v)).collect();
    svg_frame(title, "step", "loss", x_max, y_min, y_max, &points(&xy, x_max, y_min, y_max))
}
