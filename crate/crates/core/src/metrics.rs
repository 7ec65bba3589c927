//! Accuracy, normalized forgetting, random baselines and difficulty scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid_argument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `100·(S_A − S_after)/(S_A − S_R)`, in percent. May be negative or exceed
/// 100.
pub fn forgetting_rate(s_a: f64, s_after: f64, s_r: f64) -> Result<f64> {
    if s_a == s_r {
        return Err(Error::UndefinedMetric(format!(
            "just-trained accuracy {s_a} equals the random baseline"
        )));
    }
    Ok(100.0 * (s_a - s_after) / (s_a - s_r))
}

/// `1 / label_count`.
pub fn random_baseline(label_count: usize) -> Result<f64> {
    if label_count == 0 {
        return Err(Error::invalid_argument("random baseline of zero labels"));
    }
    Ok(1.0 / label_count as f64)
}

/// Pairs per label; larger is easier.
pub fn difficulty_score(pairs: usize, labels: usize) -> Result<f64> {
    if labels == 0 {
        return Err(Error::invalid_argument("difficulty of zero labels"));
    }
    Ok(pairs as f64 / labels as f64)
}

/// Lower-triangular `A[i][j]`: accuracy on task `j` after learning task `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Appends the row for the task just learned; it must cover exactly the
    /// tasks seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::invalid_argument(format!(
                "row {} needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid_argument(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    /// `S^j_A`, the accuracy right after learning `j`.
    pub fn just_trained(&self, task: usize) -> Option<f64> {
        self.get(task, task)
    }

    /// Comma-separated table: one row per timestep, one column per task;
    /// cells above the diagonal are empty.
    pub fn to_csv(&self, task_names: &[String]) -> String {
        let mut out = String::from("after");
        for n in task_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(task_names.get(i).map_or("?", String::as_str));
            for j in 0..task_names.len() {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&format!("{a:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    /// Evaluated task `j`.
    pub task: usize,
    /// Task `i > j` after which it was evaluated.
    pub after: usize,
    /// Percent; `None` when undefined because `S_A = S_R`.
    pub rate: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub random_baselines: Vec<f64>,
    pub entries: Vec<ForgettingEntry>,
}

impl ForgettingReport {
    pub fn from_matrix(matrix: &AccuracyMatrix, label_counts: &[usize]) -> Result<Self> {
        let random_baselines = label_counts
            .iter()
            .map(|&k| random_baseline(k))
            .collect::<Result<Vec<_>>>()?;
        let mut entries = Vec::new();
        for (i, row) in matrix.rows.iter().enumerate() {
            for (j, &acc) in row.iter().enumerate().take(i) {
                let s_a = matrix.rows[j][j];
                let s_r = *random_baselines.get(j).ok_or_else(|| {
                    Error::invalid_argument(format!("no label count for task {j}"))
                })?;
                let rate = match forgetting_rate(s_a, acc, s_r) {
                    Ok(r) => Some(r),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                };
                entries.push(ForgettingEntry {
                    task: j,
                    after: i,
                    rate,
                    accuracy: acc,
                });
            }
        }
        Ok(ForgettingReport {
            random_baselines,
            entries,
        })
    }

    pub fn get(&self, task: usize, after: usize) -> Option<&ForgettingEntry> {
        self.entries.iter().find(|e| e.task == task && e.after == after)
    }
}

/// `"11.68% (66.62)"`: forgetting percent, then the current accuracy in
/// percent.
pub fn format_cell(rate: Option<f64>, accuracy: f64) -> String {
    match rate {
        Some(r) => format!("{r:.2}% ({:.2})", 100.0 * accuracy),
        None => format!("n/a ({:.2})", 100.0 * accuracy),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDifficulty {
    pub task: String,
    pub pairs: usize,
    pub labels: usize,
    pub score: f64,
}

impl TaskDifficulty {
    pub fn new(task: impl Into<String>, pairs: usize, labels: usize) -> Result<Self> {
        Ok(TaskDifficulty {
            task: task.into(),
            pairs,
            labels,
            score: difficulty_score(pairs, labels)?,
        })
    }
}
