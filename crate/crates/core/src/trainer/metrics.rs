//! Evaluation history and its CSV, JSON and SVG exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

pub const CSV_HEADER: &str = "step,split,success_rate,avg_success_steps,estimator_loss,critic_loss,cp_loss,reward_reach,reward_articulation,reward_mpr,reward_task,episodes";

/// One evaluation of one split. Losses and reward components are averaged
/// over the training ticks and episodes since the previous evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub success_rate: f64,
    pub avg_success_steps: f64,
    pub estimator_loss: f64,
    pub critic_loss: f64,
    pub cp_loss: f64,
    pub reward_reach: f64,
    pub reward_articulation: f64,
    pub reward_mpr: f64,
    pub reward_task: f64,
    pub episodes: usize,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.split,
            self.success_rate,
            self.avg_success_steps,
            self.estimator_loss,
            self.critic_loss,
            self.cp_loss,
            self.reward_reach,
            self.reward_articulation,
            self.reward_mpr,
            self.reward_task,
            self.episodes
        )
    }
}

pub fn metrics_csv(history: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub evaluations: usize,
    pub final_step: usize,
    /// Success rate per split at the last evaluation.
    pub final_success: BTreeMap<String, f64>,
    pub best_success: BTreeMap<String, f64>,
}

pub fn summarize(history: &[MetricsRow]) -> Summary {
    let mut final_success = BTreeMap::new();
    let mut best_success: BTreeMap<String, f64> = BTreeMap::new();
    let final_step = history.iter().map(|r| r.step).max().unwrap_or(0);
    for r in history {
        if r.step == final_step {
            final_success.insert(r.split.clone(), r.success_rate);
        }
        let b = best_success.entry(r.split.clone()).or_insert(0.0);
        *b = b.max(r.success_rate);
    }
    let steps: std::collections::BTreeSet<_> = history.iter().map(|r| r.step).collect();
    Summary {
        evaluations: steps.len(),
        final_step,
        final_success,
        best_success,
    }
}

/// Writes `metrics.csv`, `metrics.json` and `metrics.svg` into `dir`.
pub fn export_metrics(history: &[MetricsRow], dir: &Path) -> Result<(), TrainError> {
    if history.is_empty() {
        return Err(TrainError::Config("metrics history is empty".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(history))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summarize(history))? + "\n")?;
    fs::write(dir.join("metrics.svg"), metrics_svg(history))?;
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(TrainError::Config("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(TrainError::Config(format!("bad metrics row: {l}")));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| TrainError::Config(e.to_string()));
            let int = |i: usize| f[i].parse::<usize>().map_err(|e| TrainError::Config(e.to_string()));
            Ok(MetricsRow {
                step: int(0)?,
                split: f[1].to_string(),
                success_rate: num(2)?,
                avg_success_steps: num(3)?,
                estimator_loss: num(4)?,
                critic_loss: num(5)?,
                cp_loss: num(6)?,
                reward_reach: num(7)?,
                reward_articulation: num(8)?,
                reward_mpr: num(9)?,
                reward_task: num(10)?,
                episodes: int(11)?,
            })
        })
        .collect()
}

const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

fn polyline(points: &[(f64, f64)], x_max: f64, y_min: f64, y_max: f64, x0: f64, y0: f64, w: f64, h: f64, color: &str) -> String {
    let span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            let px = x0 + w * if x_max > 0.0 { x / x_max } else { 0.0 };
            let py = y0 + h - h * (y - y_min) / span;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Two stacked panels: success rate per split, and the per-episode reward
/// components of the training rollouts, each min-max normalized.
pub fn metrics_svg(history: &[MetricsRow]) -> String {
    let (w, h, pad) = (560.0, 200.0, 40.0);
    let x_max = history.iter().map(|r| r.step).max().unwrap_or(0) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">",
        w + 2.0 * pad,
        2.0 * h + 3.0 * pad
    );
    for (panel, title) in ["success rate", "normalized reward components"].iter().enumerate() {
        let y0 = pad + panel as f64 * (h + pad);
        let _ = writeln!(
            svg,
            "<rect x=\"{pad}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#888\"/>\n<text x=\"{pad}\" y=\"{}\">{title}</text>",
            y0 - 6.0
        );
    }
    let mut splits: Vec<&str> = history.iter().map(|r| r.split.as_str()).collect();
    splits.sort();
    splits.dedup();
    for (i, split) in splits.iter().enumerate() {
        let pts: Vec<(f64, f64)> = history
            .iter()
            .filter(|r| r.split == *split)
            .map(|r| (r.step as f64, r.success_rate))
            .collect();
        let color = COLORS[i % COLORS.len()];
        svg.push_str(&polyline(&pts, x_max, 0.0, 1.0, pad, pad, w, h, color));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{split}</text>", pad + 8.0, pad + 14.0 * (i + 1) as f64);
    }
    let first_split = splits.first().copied().unwrap_or("");
    let rows: Vec<&MetricsRow> = history.iter().filter(|r| r.split == first_split).collect();
    let comps: [(&str, fn(&MetricsRow) -> f64); 4] = [
        ("reach", |r| r.reward_reach),
        ("articulation", |r| r.reward_articulation),
        ("mpr", |r| r.reward_mpr),
        ("task", |r| r.reward_task),
    ];
    let y0 = 2.0 * pad + h;
    for (i, (name, get)) in comps.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, get(r))).collect();
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let color = COLORS[i % COLORS.len()];
        svg.push_str(&polyline(&pts, x_max, lo, hi, pad, y0, w, h, color));
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>", pad + 8.0, y0 + 14.0 * (i + 1) as f64);
    }
    svg.push_str("</svg>\n");
    svg
}
