//! Training diagnostics and their file formats.
//!
//! One [`StepStats`] row per optimizer step: mean token entropy (the
//! entropy-loss curve), advantage moments, clipping statistics, response
//! length, All-Right / All-Wrong exploration group counts, and the greedy
//! solve rate on the evaluation suite when it was measured that step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::explore::{ExplorationRecord, RolloutGroup};
use crate::scalar::Scalar;

/// Column order of the metrics table; part of the file contract.
pub const STEP_STATS_COLUMNS: [&str; 10] = [
    "step",
    "mean_token_entropy",
    "adv_mean",
    "adv_std",
    "clip_fraction",
    "mean_ratio",
    "mean_response_length",
    "all_right_count",
    "all_wrong_count",
    "solve_rate",
];

/// Fraction of trailing steps averaged in comparison summaries.
pub const FINAL_WINDOW_FRACTION: f64 = 0.10;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const SERIES_DIR: &str = "series";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    /// Mean policy entropy over the trained positions of the batch, taken
    /// at the collection snapshot; the initial rollouts when nothing trained.
    pub mean_token_entropy: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_response_length: f64,
    pub all_right_count: u64,
    pub all_wrong_count: u64,
    /// Greedy solve rate on the evaluation suite; only on evaluation steps.
    pub solve_rate: Option<f64>,
}

impl StepStats {
    /// Numeric value of a column by name; `None` for an unmeasured solve rate.
    pub fn metric(&self, column: &str) -> Option<f64> {
        Some(match column {
            "step" => self.step as f64,
            "mean_token_entropy" => self.mean_token_entropy,
            "adv_mean" => self.adv_mean,
            "adv_std" => self.adv_std,
            "clip_fraction" => self.clip_fraction,
            "mean_ratio" => self.mean_ratio,
            "mean_response_length" => self.mean_response_length,
            "all_right_count" => self.all_right_count as f64,
            "all_wrong_count" => self.all_wrong_count as f64,
            "solve_rate" => return self.solve_rate,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    pub suite_hash: String,
    pub scalar: String,
    /// Greedy solve rate of the initial policy on the evaluation suite.
    pub initial_solve_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub meta: RunMetadata,
    pub steps: Vec<StepStats>,
}

impl MetricsHistory {
    pub fn new(meta: RunMetadata) -> Self {
        Self {
            meta,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, stats: StepStats) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if stats.step <= last.step {
                return Err(contract(format!(
                    "step {} does not follow step {}",
                    stats.step, last.step
                )));
            }
        }
        self.steps.push(stats);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Latest measured solve rate.
    pub fn final_solve_rate(&self) -> Option<f64> {
        self.steps.iter().rev().find_map(|s| s.solve_rate)
    }

    pub fn best_solve_rate(&self) -> Option<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.solve_rate)
            .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
    }

    /// The trailing `FINAL_WINDOW_FRACTION` of steps, at least one.
    pub fn final_window(&self) -> &[StepStats] {
        let n = self.steps.len();
        let w = ((n as f64 * FINAL_WINDOW_FRACTION).ceil() as usize).clamp(n.min(1), n);
        &self.steps[n - w..]
    }

    /// Mean of `column` over `windows` consecutive, equally sized chunks.
    pub fn window_means(&self, column: &str, windows: usize) -> Vec<f64> {
        let n = self.steps.len();
        if windows == 0 || n < windows {
            return Vec::new();
        }
        (0..windows)
            .map(|w| {
                let chunk = &self.steps[w * n / windows..(w + 1) * n / windows];
                mean_of(chunk, column).unwrap_or(f64::NAN)
            })
            .collect()
    }
}

fn mean_of(rows: &[StepStats], column: &str) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|s| s.metric(column)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `(all_right, all_wrong)`: groups whose value is exactly 1 / exactly 0.
pub fn count_group_extremes<'a, T: Scalar>(
    groups: impl IntoIterator<Item = &'a RolloutGroup<T>>,
) -> (u64, u64) {
    groups.into_iter().fold((0, 0), |(r, w), g| {
        (
            r + (g.value == T::one()) as u64,
            w + (g.value == T::zero()) as u64,
        )
    })
}

/// Token-weighted mean of every profiled entropy across records.
pub fn batch_entropy<T: Scalar>(records: &[ExplorationRecord<T>]) -> Result<T> {
    let (sum, count) = records
        .iter()
        .flat_map(|r| r.profile.values.iter())
        .fold((T::zero(), 0usize), |(s, c), &h| (s + h, c + 1));
    if count == 0 {
        return Err(Error::Empty("exploration records"));
    }
    Ok(sum / T::of_usize(count))
}

/// Writes `metrics.csv`, `metadata.json` and one `series/<column>.dat`
/// whitespace-separated `step value` file per metric.
pub fn export(history: &MetricsHistory, dir: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Empty("metrics history"));
    }
    fs::create_dir_all(dir.join(SERIES_DIR))?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(history)?)?;
    fs::write(
        dir.join(METADATA_FILE),
        serde_json::to_string_pretty(&history.meta)? + "\n",
    )?;
    for column in &STEP_STATS_COLUMNS[1..] {
        let mut text = format!("# step {column}\n");
        for s in &history.steps {
            if let Some(v) = s.metric(column) {
                writeln!(text, "{} {}", s.step, v).unwrap();
            }
        }
        fs::write(dir.join(SERIES_DIR).join(format!("{column}.dat")), text)?;
    }
    Ok(())
}

pub fn metrics_csv(history: &MetricsHistory) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &history.steps {
        w.serialize(s)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<StepStats>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != STEP_STATS_COLUMNS {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Reads a history written by [`export`].
pub fn read_history(dir: &Path) -> Result<MetricsHistory> {
    let meta: RunMetadata = serde_json::from_slice(&fs::read(dir.join(METADATA_FILE))?)?;
    let steps = parse_metrics_csv(&fs::read(dir.join(METRICS_FILE))?)?;
    Ok(MetricsHistory { meta, steps })
}

/// Per-step `b − a` deltas for every metric.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub step: u64,
    /// Parallel to `STEP_STATS_COLUMNS[1..]`.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSummary {
    pub column: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl WindowSummary {
    pub fn delta(&self) -> Option<f64> {
        Some(self.b? - self.a?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<DeltaRow>,
    pub final_window: Vec<WindowSummary>,
    /// Some steps of one run have no counterpart in the other.
    pub partial_alignment: bool,
    /// Metadata differences that make the comparison unfair.
    pub fairness_warnings: Vec<String>,
}

pub fn compare(a: &MetricsHistory, b: &MetricsHistory) -> Comparison {
    let mut fairness_warnings = Vec::new();
    if a.meta.seed != b.meta.seed {
        fairness_warnings.push(format!("seed mismatch: {} vs {}", a.meta.seed, b.meta.seed));
    }
    if a.meta.suite_hash != b.meta.suite_hash {
        fairness_warnings.push(format!(
            "suite mismatch: {} vs {}",
            a.meta.suite_hash, b.meta.suite_hash
        ));
    }
    let columns = &STEP_STATS_COLUMNS[1..];
    let mut rows = Vec::new();
    let mut j = 0;
    for sa in &a.steps {
        while j < b.steps.len() && b.steps[j].step < sa.step {
            j += 1;
        }
        if let Some(sb) = b.steps.get(j).filter(|sb| sb.step == sa.step) {
            rows.push(DeltaRow {
                step: sa.step,
                deltas: columns
                    .iter()
                    .map(|c| Some(sb.metric(c)? - sa.metric(c)?))
                    .collect(),
            });
        }
    }
    let partial_alignment = rows.len() != a.steps.len() || rows.len() != b.steps.len();
    let final_window = columns
        .iter()
        .map(|&column| WindowSummary {
            column,
            a: mean_of(a.final_window(), column),
            b: mean_of(b.final_window(), column),
        })
        .collect();
    Comparison {
        label_a: a.meta.algorithm.clone(),
        label_b: b.meta.algorithm.clone(),
        rows,
        final_window,
        partial_alignment,
        fairness_warnings,
    }
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl Comparison {
    /// Plain-text report: warnings, final-window summary, per-step deltas.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for w in &self.fairness_warnings {
            writeln!(out, "WARNING: {w}").unwrap();
        }
        if self.partial_alignment {
            writeln!(out, "WARNING: step ranges only partially aligned ({} common steps)", self.rows.len()).unwrap();
        }
        writeln!(
            out,
            "final-window means (last {:.0}% of steps)  a={}  b={}",
            FINAL_WINDOW_FRACTION * 100.0,
            self.label_a,
            self.label_b
        )
        .unwrap();
        writeln!(out, "{:<22} {:>14} {:>14} {:>14}", "metric", "a", "b", "b-a").unwrap();
        for s in &self.final_window {
            writeln!(
                out,
                "{:<22} {:>14} {:>14} {:>14}",
                s.column,
                cell(s.a),
                cell(s.b),
                cell(s.delta())
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "per-step deltas (b-a)").unwrap();
        write!(out, "{:>6}", "step").unwrap();
        for c in &STEP_STATS_COLUMNS[1..] {
            write!(out, " {c:>20}").unwrap();
        }
        writeln!(out).unwrap();
        for row in &self.rows {
            write!(out, "{:>6}", row.step).unwrap();
            for d in &row.deltas {
                write!(out, " {:>20}", cell(*d)).unwrap();
            }
            writeln!(out).unwrap();
        }
        out
    }
}
