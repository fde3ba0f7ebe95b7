//! Result aggregation, tables, ROC statistics and the OOD histogram.

use std::fmt::Write as _;

use flowmpc::controllers::{FailureKind, TrialResult};
use serde::{Deserialize, Serialize};

use crate::config::CostAverage;

/// One line of a per-trial JSON log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: usize,
    pub controller: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub success: bool,
    pub failure_kind: Option<FailureKind>,
    pub executed_cost: f64,
    pub steps: usize,
    pub max_rollouts: usize,
    pub wall_time_s: f64,
}

impl TrialRecord {
    pub fn new(task_id: usize, controller: &str, k: usize, seed: u64, r: &TrialResult, wall_time_s: f64) -> Self {
        TrialRecord {
            task_id,
            controller: controller.to_string(),
            k,
            seed,
            success: r.success,
            failure_kind: r.failure,
            executed_cost: r.executed_cost,
            steps: r.steps,
            max_rollouts: r.max_rollouts,
            wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub controller: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_tasks: usize,
    pub success_rate: f64,
    pub mean_cost: f64,
    pub mean_steps: f64,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "controller,K,n_tasks,success_rate,mean_cost,mean_steps,seed";

impl ResultRow {
    /// Aggregates trials; mean cost is `NaN` when no trial qualifies.
    pub fn aggregate(controller: &str, k: usize, seed: u64, trials: &[TrialRecord], average: CostAverage) -> Self {
        let n = trials.len();
        let successes = trials.iter().filter(|t| t.success).count();
        let costs: Vec<f64> = trials
            .iter()
            .filter(|t| average == CostAverage::All || t.success)
            .map(|t| t.executed_cost)
            .collect();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let steps: Vec<f64> = trials.iter().map(|t| t.steps as f64).collect();
        ResultRow {
            controller: controller.to_string(),
            k,
            n_tasks: n,
            success_rate: successes as f64 / n.max(1) as f64,
            mean_cost: mean(&costs),
            mean_steps: mean(&steps),
            seed,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.controller, self.k, self.n_tasks, self.success_rate, self.mean_cost, self.mean_steps, self.seed
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses a results CSV written by `results_csv`.
pub fn parse_results_csv(text: &str) -> Option<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next()? != RESULTS_HEADER {
        return None;
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return None;
            }
            Some(ResultRow {
                controller: f[0].to_string(),
                k: f[1].parse().ok()?,
                n_tasks: f[2].parse().ok()?,
                success_rate: f[3].parse().ok()?,
                mean_cost: f[4].parse().ok()?,
                mean_steps: f[5].parse().ok()?,
                seed: f[6].parse().ok()?,
            })
        })
        .collect()
}

pub fn results_table(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.controller.len()).max().unwrap_or(10).max(10);
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>7}  {:>10}  {:>6}", "controller", "K", "success", "cost", "steps");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>7.2}  {:>10.1}  {:>6.1}",
            r.controller, r.k, r.success_rate, r.mean_cost, r.mean_steps
        );
    }
    out
}

/// Probability that a score from `positive` exceeds one from `negative`,
/// counting ties as one half.
pub fn auroc(negative: &[f64], positive: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (negative.len() * positive.len()) as f64
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Overlaid normalized histograms, one per labelled group.
pub fn histogram_svg(groups: &[(String, Vec<f64>)], bins: usize, x_label: &str) -> String {
    let all = groups.iter().flat_map(|(_, v)| v.iter().cloned()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0.0; bins];
            for x in v.iter().filter(|x| x.is_finite()) {
                let b = (((x - lo) / width) as usize).min(bins - 1);
                c[b] += 1.0 / v.len() as f64;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().cloned().fold(0.0, f64::max).max(1e-12);

    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 20.0, 20.0, 50.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (g, c) in counts.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for (b, v) in c.iter().enumerate() {
            if *v <= 0.0 {
                continue;
            }
            let x = ml + pw * b as f64 / bins as f64;
            let bh = ph * v / top;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                mt + ph - bh,
                pw / bins as f64
            );
        }
    }
    let _ = writeln!(svg, r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, mt + ph, ml + pw, mt + ph);
    let _ = writeln!(svg, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, mt + ph);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let x = ml + pw * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{v:.3}</text>"#, mt + ph + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, ml + pw / 2.0, h - 10.0);
    let _ = writeln!(svg, r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">fraction</text>"#, mt + ph / 2.0, mt + ph / 2.0);
    for (g, (label, _)) in groups.iter().enumerate() {
        let y = mt + 14.0 + 16.0 * g as f64;
        let color = PALETTE[g % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}" fill-opacity="0.5"/>"#, ml + pw - 150.0, y - 9.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}">{}</text>"#, ml + pw - 135.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
