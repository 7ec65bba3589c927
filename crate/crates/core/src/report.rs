//! Side-by-side comparison of result documents: one row per run, one
//! `forgetting% (accuracy)` cell per task, measured after the run's last task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{format_cell, TaskDifficulty};
use crate::trainer::{ExperimentResult, RunStatus, RESULT_SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub task: String,
    pub accuracy: Option<f64>,
    pub forgetting: Option<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Last task the run finished.
    pub after: Option<String>,
    pub cells: Vec<ReportCell>,
    /// Mean over the defined forgetting rates of earlier tasks.
    pub mean_forgetting: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub difficulty: Vec<TaskDifficulty>,
}

/// Parses a result document, rejecting other schema versions before
/// looking at anything else.
pub fn parse_result(text: &str) -> Result<ExperimentResult> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(RESULT_SCHEMA_VERSION as u64) {
        return Err(Error::invalid_argument(format!(
            "result schema version {} but this build reads version {RESULT_SCHEMA_VERSION}",
            version.map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    Ok(serde_json::from_value(value)?)
}

/// Method name plus one suffix per ablation switch.
pub fn result_label(r: &ExperimentResult) -> String {
    let a = &r.config.ablation;
    let mut label = r.config.method.to_string();
    for (on, tag) in [
        (a.disable_ikd, "no-ikd"),
        (a.disable_tab, "no-tab"),
        (a.disable_replay, "no-replay"),
        (a.disable_diversity, "no-div"),
    ] {
        if on {
            label.push('-');
            label.push_str(tag);
        }
    }
    label
}

fn row_for(r: &ExperimentResult, tasks: &[String]) -> ReportRow {
    let last = r.accuracy.len().checked_sub(1);
    let names = r.task_names();
    let mut rates = Vec::new();
    let cells = tasks
        .iter()
        .map(|name| {
            let j = names.iter().position(|n| n == name);
            let (accuracy, forgetting) = match (j, last) {
                (Some(j), Some(i)) if j <= i => {
                    let acc = r.accuracy.get(i, j);
                    let rate = if j < i {
                        r.forgetting.get(j, i).and_then(|e| e.rate)
                    } else {
                        None
                    };
                    (acc, rate)
                }
                _ => (None, None),
            };
            if let Some(f) = forgetting {
                rates.push(f);
            }
            let text = match (accuracy, j.zip(last)) {
                (Some(a), Some((j, i))) if j < i => format_cell(forgetting, a),
                (Some(a), _) => format!("{:.2}", 100.0 * a),
                (None, _) => String::new(),
            };
            ReportCell {
                task: name.clone(),
                accuracy,
                forgetting,
                text,
            }
        })
        .collect();
    ReportRow {
        label: result_label(r),
        seed: r.config.seed,
        status: r.status.clone(),
        after: last.and_then(|i| names.get(i).cloned()),
        cells,
        mean_forgetting: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
    }
}

pub fn build_report(results: &[ExperimentResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::invalid_argument("a report needs at least one result"));
    }
    let mut tasks: Vec<String> = Vec::new();
    let mut difficulty = Vec::new();
    for r in results {
        if r.schema_version != RESULT_SCHEMA_VERSION {
            return Err(Error::invalid_argument(format!(
                "result schema version {} but this build reads version {RESULT_SCHEMA_VERSION}",
                r.schema_version
            )));
        }
        for t in &r.tasks {
            if !tasks.contains(&t.name) {
                tasks.push(t.name.clone());
                difficulty.push(t.difficulty.clone());
            }
        }
    }
    let rows = results.iter().map(|r| row_for(r, &tasks)).collect();
    Ok(Report {
        schema_version: RESULT_SCHEMA_VERSION,
        tasks,
        rows,
        difficulty,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Report {
    /// One row per run, then a `difficulty` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,status");
        for t in &self.tasks {
            out.push(',');
            out.push_str(&csv_field(t));
        }
        out.push_str(",mean_forgetting\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", csv_field(&row.label), row.seed, status_name(&row.status)));
            for c in &row.cells {
                out.push(',');
                out.push_str(&csv_field(&c.text));
            }
            out.push(',');
            if let Some(m) = row.mean_forgetting {
                out.push_str(&format!("{m:.2}"));
            }
            out.push('\n');
        }
        out.push_str("difficulty,,");
        for d in &self.difficulty {
            out.push_str(&format!(",{:.2}", d.score));
        }
        out.push_str(",\n");
        out
    }

    /// Plain-text table with aligned columns.
    pub fn to_table(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["method".to_string(), "seed".to_string()];
        header.extend(self.tasks.iter().cloned());
        header.push("mean forgetting".into());
        grid.push(header);
        for row in &self.rows {
            let mut line = vec![
                match row.status {
                    RunStatus::Complete => row.label.clone(),
                    RunStatus::Failed => format!("{} (failed)", row.label),
                },
                row.seed.to_string(),
            ];
            line.extend(row.cells.iter().map(|c| c.text.clone()));
            line.push(row.mean_forgetting.map_or(String::new(), |m| format!("{m:.2}%")));
            grid.push(line);
        }
        let mut diff = vec!["difficulty".to_string(), String::new()];
        diff.extend(self.difficulty.iter().map(|d| format!("{:.2}", d.score)));
        diff.push(String::new());
        grid.push(diff);

        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in grid.iter().enumerate() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }
}

fn status_name(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Complete => "complete",
        RunStatus::Failed => "failed",
    }
}
