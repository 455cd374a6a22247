//! JSON-lines run log: one `step` entry per optimizer step and one
//! `exploration` entry per logged exploration record.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explore::ExplorationRecord;
use crate::scalar::Scalar;
use crate::telemetry::StepStats;
use crate::trainer::{StepReport, UpdateStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        stats: StepStats,
        update: Option<UpdateStats>,
        accepted_prompts: usize,
        rejected_prompts: usize,
        attempts: usize,
        exhausted: bool,
    },
    Exploration {
        step: u64,
        record: ExplorationRecord<f64>,
    },
}

/// Widens a record to `f64` for logging.
pub fn widen_record<T: Scalar>(record: &ExplorationRecord<T>) -> Result<ExplorationRecord<f64>> {
    Ok(serde_json::from_value(serde_json::to_value(record)?)?)
}

/// Log entries for one step; exploration records are included only when
/// `with_records`.
pub fn step_entries<T: Scalar>(report: &StepReport<T>, with_records: bool) -> Result<Vec<LogEntry>> {
    let mut out = vec![LogEntry::Step {
        stats: report.stats.clone(),
        update: report.update.clone(),
        accepted_prompts: report.accepted_prompts,
        rejected_prompts: report.rejected_prompts,
        attempts: report.attempts,
        exhausted: report.exhausted,
    }];
    if with_records {
        for r in &report.records {
            out.push(LogEntry::Exploration {
                step: report.stats.step,
                record: widen_record(r)?,
            });
        }
    }
    Ok(out)
}

pub fn write_entry<W: Write>(out: &mut W, entry: &LogEntry) -> Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// A run log line that failed to parse.
#[derive(Debug)]
pub struct BadLine {
    /// 1-based.
    pub line: usize,
    pub error: Error,
}

/// Reads every parseable entry. Blank lines are skipped; malformed lines
/// are returned separately with their line numbers.
pub fn read_log<R: BufRead>(input: R) -> Result<(Vec<LogEntry>, Vec<BadLine>)> {
    let mut entries = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(&line) {
            Ok(e) => entries.push(e),
            Err(e) => bad.push(BadLine {
                line: i + 1,
                error: e.into(),
            }),
        }
    }
    Ok((entries, bad))
}

/// Tallies derived from the exploration entries of a log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogSummary {
    pub steps: usize,
    pub records: usize,
    pub exploration_groups: u64,
    pub all_right: u64,
    pub all_wrong: u64,
    /// Largest `|α_j − exp(V_{j−1} − V_j)|` over every logged record.
    pub max_alpha_error: f64,
    /// Records whose `α_j < 1` coincides with `V_j > V_{j−1}` and vice versa.
    pub alpha_consistent: bool,
}

pub fn summarize(entries: &[LogEntry]) -> LogSummary {
    let mut s = LogSummary {
        alpha_consistent: true,
        ..Default::default()
    };
    for e in entries {
        match e {
            LogEntry::Step { .. } => s.steps += 1,
            LogEntry::Exploration { record, .. } => {
                s.records += 1;
                for g in record.exploration_groups() {
                    s.exploration_groups += 1;
                    s.all_right += g.is_all_right() as u64;
                    s.all_wrong += g.is_all_wrong() as u64;
                }
                for j in 1..record.values.len().min(record.alphas.len()) {
                    let (prev, cur, a) = (record.values[j - 1], record.values[j], record.alphas[j]);
                    s.max_alpha_error = s.max_alpha_error.max((a - (prev - cur).exp()).abs());
                    let ok = if cur > prev {
                        a < 1.0
                    } else if cur < prev {
                        a > 1.0
                    } else {
                        a == 1.0
                    };
                    s.alpha_consistent &= ok;
                }
            }
        }
    }
    s
}
