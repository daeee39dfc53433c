//! Metric reports and the per-complexity summary chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub prompt_id: u64,
    /// Number of parts in the prompt.
    pub k: usize,
    pub score: f64,
}

/// One metric for one model. Without `complexity`, per-sample scores are
/// grouped by their part count when charted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<usize>,
    pub per_sample: Vec<SampleScore>,
    pub final_score: f64,
}

impl EvalReport {
    pub fn from_samples(model: &str, metric: &str, per_sample: Vec<SampleScore>) -> Self {
        let final_score = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().map(|s| s.score).sum::<f64>() / per_sample.len() as f64
        };
        EvalReport { model: model.into(), metric: metric.into(), complexity: None, per_sample, final_score }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = std::fs::read(path)?;
        let r: EvalReport = serde_json::from_slice(&bytes)
            .map_err(|e| EvalError::MalformedReport(format!("{}: {e}", path.display())))?;
        r.check().map_err(|m| EvalError::MalformedReport(format!("{}: {m}", path.display())))?;
        Ok(r)
    }

    fn check(&self) -> Result<(), String> {
        if self.metric.trim().is_empty() || self.model.trim().is_empty() {
            return Err("model and metric must be non-empty".into());
        }
        if !self.final_score.is_finite() || self.per_sample.iter().any(|s| !s.score.is_finite()) {
            return Err("scores must be finite".into());
        }
        if self.complexity.is_none() && self.per_sample.is_empty() {
            return Err("report has neither a complexity nor per-sample scores".into());
        }
        Ok(())
    }

    /// `(complexity, score)` points of this report.
    fn points(&self) -> Vec<(usize, f64)> {
        if let Some(c) = self.complexity {
            return vec![(c, self.final_score)];
        }
        let mut by_k: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.per_sample {
            let e = by_k.entry(s.k).or_default();
            e.0 += s.score;
            e.1 += 1;
        }
        by_k.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub metric: String,
    /// model → sorted `(complexity, score)` points
    pub lines: BTreeMap<String, Vec<(usize, f64)>>,
    pub csv: String,
    pub svg: String,
}

/// Merges reports of one metric into CSV rows and an SVG line chart with one
/// line per model over part counts.
pub fn cmd_report(reports: &[EvalReport]) -> Result<ReportOutput, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::MalformedReport("no reports given".into()))?;
    let mut lines: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in reports {
        r.check().map_err(EvalError::MalformedReport)?;
        if r.metric != first.metric {
            return Err(EvalError::MalformedReport(format!(
                "conflicting metrics `{}` and `{}`",
                first.metric, r.metric
            )));
        }
        let line = lines.entry(r.model.clone()).or_default();
        for (k, v) in r.points() {
            if line.insert(k, v).is_some() {
                return Err(EvalError::MalformedReport(format!("duplicate {k}-part score for `{}`", r.model)));
            }
        }
    }
    let lines: BTreeMap<String, Vec<(usize, f64)>> =
        lines.into_iter().map(|(m, pts)| (m, pts.into_iter().collect())).collect();

    let mut csv = String::from("model,metric,complexity,score\n");
    for (model, pts) in &lines {
        for (k, v) in pts {
            writeln!(csv, "{model},{},{k},{v:.6}", first.metric).unwrap();
        }
    }
    let svg = render_svg(&first.metric, &lines);
    Ok(ReportOutput { metric: first.metric.clone(), lines, csv, svg })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 44.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_svg(metric: &str, lines: &BTreeMap<String, Vec<(usize, f64)>>) -> String {
    let mut xs: Vec<usize> = lines.values().flatten().map(|p| p.0).collect();
    xs.sort_unstable();
    xs.dedup();
    let y_max = lines.values().flatten().map(|p| p.1).fold(1.0f64, f64::max);
    let y_min = lines.values().flatten().map(|p| p.1).fold(0.0f64, f64::min);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |k: usize| {
        let i = xs.iter().position(|&x| x == k).unwrap();
        if xs.len() == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (xs.len() - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{}</text>"#, LEFT + plot_w / 2.0, escape(metric))
        .unwrap();
    // axes
    writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{:.2} H{:.2}" stroke="black" fill="none"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    )
    .unwrap();
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_of(v);
        writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y + 3.0)
            .unwrap();
    }
    for &k in &xs {
        let x = x_of(k);
        let y = TOP + plot_h;
        writeln!(s, r#"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y + 4.0).unwrap();
        writeln!(s, r#"<text class="xtick" x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{k}</text>"#, y + 16.0)
            .unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">parts per prompt</text>"#, LEFT + plot_w / 2.0, H - 6.0)
        .unwrap();
    for (i, (model, pts)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(k, v)| format!("{:.2},{:.2}", x_of(k), y_of(v))).collect();
        writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, coords.join(" ")).unwrap();
        for &(k, v) in pts {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x_of(k), y_of(v)).unwrap();
        }
        let ly = TOP + 14.0 * i as f64;
        writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="3" fill="{color}"/>"#, W - RIGHT + 12.0, ly + 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#, W - RIGHT + 26.0, ly + 8.0, escape(model)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
