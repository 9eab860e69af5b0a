//! Continual-learning scores: accuracy, lwlrap, per-step averages and
//! forgetting, assembled into a lower-triangular report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DilError, Result};

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(DilError::InvalidArgument("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(DilError::shape(
            "accuracy",
            format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Class indices of one row ordered by descending score; equal scores keep
/// class-index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Label-weighted label-ranking average precision.
///
/// Every positive (sample, class) pair contributes equally: its precision
/// is the share of positives among the classes ranked at or above it.
/// Samples without positives contribute nothing.
pub fn lwlrap(scores: &[f64], labels: &[bool], n_classes: usize) -> Result<f64> {
    if n_classes == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(n_classes) {
        return Err(DilError::shape(
            "lwlrap",
            format!(
                "{} scores and {} labels over {n_classes} classes",
                scores.len(),
                labels.len()
            ),
        ));
    }
    let mut total = 0.0;
    let mut positives = 0usize;
    for (row, truth) in scores.chunks(n_classes).zip(labels.chunks(n_classes)) {
        if !truth.iter().any(|&t| t) {
            continue;
        }
        let mut hits = 0usize;
        for (rank, &class) in ranking(row).iter().enumerate() {
            if truth[class] {
                hits += 1;
                total += hits as f64 / (rank + 1) as f64;
            }
        }
        positives += hits;
    }
    if positives == 0 {
        return Err(DilError::InvalidArgument(
            "lwlrap needs at least one positive label".into(),
        ));
    }
    Ok(total / positives as f64)
}

/// Per-sample label-ranking average precision, used to relate lwlrap to
/// top-1 correctness.
pub fn sample_lrap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &class) in ranking(scores).iter().enumerate() {
        if truth[class] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

pub fn average_over_domains(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(DilError::InvalidArgument("average of an empty row".into()));
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean drop on earlier domains at step `t` (1-based). `rows[s - 1][i - 1]`
/// holds the score after step `s` on domain `i`.
pub fn forgetting(rows: &[Vec<f64>], t: usize) -> Result<f64> {
    if t < 2 {
        return Err(DilError::InvalidArgument(format!(
            "forgetting is undefined at step {t}; it needs t >= 2"
        )));
    }
    if rows.len() < t || (0..t).any(|s| rows[s].len() < s + 1) {
        return Err(DilError::shape(
            "forgetting",
            format!("matrix does not cover step {t}"),
        ));
    }
    let current = &rows[t - 1];
    let drop: f64 = (1..t)
        .map(|i| {
            let d = t - i;
            rows[d - 1][d - 1] - current[d - 1]
        })
        .sum();
    Ok(drop / (t - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Lwlrap,
}

/// Domain-agnostic results of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgnosticStep {
    pub scores: Vec<f64>,
    pub average: f64,
    pub selection_accuracy: f64,
    /// `confusion[i][b]`: samples of domain `i` routed to bank `b`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based incremental step.
    pub step: usize,
    /// Percent scores on domains `1..=step`, domain-aware.
    pub scores: Vec<f64>,
    pub average: f64,
    pub forgetting: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agnostic: Option<AgnosticStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub metric: MetricKind,
    pub domains: Vec<String>,
    pub steps: Vec<StepReport>,
}

impl MetricsReport {
    /// Score after step `t` on domain `i`, both 1-based.
    pub fn score(&self, t: usize, i: usize) -> Option<f64> {
        self.steps
            .get(t.checked_sub(1)?)?
            .scores
            .get(i.checked_sub(1)?)
            .copied()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.scores.clone()).collect()
    }

    pub fn final_step(&self) -> &StepReport {
        self.steps.last().expect("report has at least one step")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DilError::Data(format!("report parse: {e}")))
    }

    /// One row per (step, domain) for plotting.
    pub fn to_csv(&self) -> String {
        let metric = match self.metric {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Lwlrap => "lwlrap",
        };
        let mut out = String::from(
            "strategy,metric,step,domain_index,domain,score,is_current,step_average,step_forgetting,agnostic_score\n",
        );
        for st in &self.steps {
            for (i, score) in st.scores.iter().enumerate() {
                let fr = st.forgetting.map(|f| f.to_string()).unwrap_or_default();
                let agn = st
                    .agnostic
                    .as_ref()
                    .map(|a| a.scores[i].to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{metric},{},{},{},{score},{},{},{fr},{agn}",
                    self.strategy,
                    st.step,
                    i + 1,
                    self.domains[i],
                    i + 1 == st.step,
                    st.average,
                );
            }
        }
        out
    }

    /// Percent table with one decimal, the way results are usually read.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "step");
        for d in &self.domains {
            let _ = write!(out, "{d:>12}");
        }
        let _ = writeln!(out, "{:>10}{:>10}", "avg", "Fr");
        for st in &self.steps {
            let _ = write!(out, "{:<6}", st.step);
            for i in 0..self.domains.len() {
                match st.scores.get(i) {
                    Some(s) => {
                        let _ = write!(out, "{s:>12.1}");
                    }
                    None => {
                        let _ = write!(out, "{:>12}", "");
                    }
                }
            }
            let fr = st
                .forgetting
                .map(|f| format!("{f:.1}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:>10.1}{fr:>10}", st.average);
        }
        out
    }
}

/// Assembles a report from `(t, i) → score` cells (1-based, `i <= t`).
pub fn build_report(
    strategy: &str,
    metric: MetricKind,
    domains: &[String],
    cells: &BTreeMap<(usize, usize), f64>,
) -> Result<MetricsReport> {
    let steps_n = domains.len();
    if steps_n == 0 {
        return Err(DilError::InvalidArgument(
            "report needs at least one domain".into(),
        ));
    }
    let mut rows = Vec::with_capacity(steps_n);
    for t in 1..=steps_n {
        let row = (1..=t)
            .map(|i| {
                cells.get(&(t, i)).copied().ok_or_else(|| {
                    DilError::InvalidArgument(format!(
                        "missing evaluation for step {t}, domain {i}"
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if let Some(&(t, i)) = cells.keys().find(|&&(t, i)| t > steps_n || i > t || i == 0) {
        return Err(DilError::InvalidArgument(format!(
            "evaluation cell ({t}, {i}) lies outside the lower triangle"
        )));
    }
    let mut steps = Vec::with_capacity(steps_n);
    for t in 1..=steps_n {
        steps.push(StepReport {
            step: t,
            average: average_over_domains(&rows[t - 1])?,
            forgetting: if t >= 2 {
                Some(forgetting(&rows, t)?)
            } else {
                None
            },
            scores: rows[t - 1].clone(),
            agnostic: None,
        });
    }
    Ok(MetricsReport {
        strategy: strategy.to_string(),
        metric,
        domains: domains.to_vec(),
        steps,
    })
}
