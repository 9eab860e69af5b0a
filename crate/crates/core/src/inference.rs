//! Domain-aware prediction through a given bank and domain-agnostic
//! prediction through the bank with the least predictive entropy.

use serde::{Deserialize, Serialize};

use crate::error::{DilError, Result};
use crate::model::{DilModel, TaskKind};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub chosen_bank: usize,
    /// Over the chosen bank's class list.
    pub probabilities: Vec<f64>,
    /// Uncertainty of every candidate bank; a single entry in domain-aware mode.
    pub uncertainties: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgnosticOptions {
    /// Divide each bank's entropy by its maximum (ln C, or ln 2 per class
    /// for multi-label banks) before comparing.
    pub normalize_by_classes: bool,
}

/// Softmax (single-label) or element-wise sigmoid (multi-label) of one
/// row of logits.
pub fn probabilities(logits: &[f64], kind: TaskKind) -> Vec<f64> {
    match kind {
        TaskKind::SingleLabel => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        }
        TaskKind::MultiLabel => logits
            .iter()
            .map(|&z| {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            })
            .collect(),
    }
}

fn plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Natural-log entropy of a categorical distribution, or the mean binary
/// entropy of independent per-class probabilities.
pub fn entropy_uncertainty(probabilities: &[f64], kind: TaskKind) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(DilError::InvalidArgument(
            "entropy of an empty vector".into(),
        ));
    }
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(DilError::InvalidArgument(format!(
            "probability {p} lies outside [0, 1]"
        )));
    }
    Ok(match kind {
        TaskKind::SingleLabel => -probabilities.iter().map(|&p| plogp(p)).sum::<f64>(),
        TaskKind::MultiLabel => {
            let total: f64 = probabilities
                .iter()
                .map(|&p| -(plogp(p) + plogp(1.0 - p)))
                .sum();
            total / probabilities.len() as f64
        }
    })
}

fn max_entropy(n_classes: usize, kind: TaskKind) -> f64 {
    match kind {
        TaskKind::SingleLabel => (n_classes as f64).ln(),
        TaskKind::MultiLabel => std::f64::consts::LN_2,
    }
}

/// Index of the smallest uncertainty; ties go to the lowest index.
pub fn select_bank(uncertainties: &[f64]) -> Result<usize> {
    if uncertainties.is_empty() {
        return Err(DilError::InvalidArgument("no candidate banks".into()));
    }
    let mut best = 0;
    for (b, &u) in uncertainties.iter().enumerate().skip(1) {
        if u < uncertainties[best] {
            best = b;
        }
    }
    Ok(best)
}

/// Accepts F×T, 1×F×T or N×1×F×T and returns an N×1×F×T batch.
fn as_batch<T: Real>(model: &DilModel<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, t) = (model.arch.mel_bins, model.arch.frames);
    let n = match input.shape() {
        [a, b] if (*a, *b) == (f, t) => 1,
        [1, a, b] if (*a, *b) == (f, t) => 1,
        [n, 1, a, b] if (*a, *b) == (f, t) => *n,
        other => {
            return Err(DilError::shape(
                "predict",
                format!("input {other:?} does not match {f}x{t} features"),
            ))
        }
    };
    input.clone().reshape(vec![n, 1, f, t])
}

/// Per-sample probabilities of a batch through bank `bank_id` (EVAL mode).
pub fn bank_probabilities<T: Real>(
    model: &DilModel<T>,
    bank_id: usize,
    input: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    let kind = model.bank(bank_id)?.spec.task_kind;
    let batch = as_batch(model, input)?;
    let logits = model.forward(bank_id, &batch)?;
    let c = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            probabilities(&row, kind)
        })
        .collect())
}

pub fn predict_domain_aware<T: Real>(
    model: &DilModel<T>,
    bank_id: usize,
    sample: &Tensor<T>,
) -> Result<Prediction> {
    let mut preds = predict_batch_aware(model, bank_id, sample)?;
    if preds.len() != 1 {
        return Err(DilError::shape(
            "predict_domain_aware",
            "expected one sample",
        ));
    }
    Ok(preds.remove(0))
}

pub fn predict_batch_aware<T: Real>(
    model: &DilModel<T>,
    bank_id: usize,
    batch: &Tensor<T>,
) -> Result<Vec<Prediction>> {
    let kind = model.bank(bank_id)?.spec.task_kind;
    bank_probabilities(model, bank_id, batch)?
        .into_iter()
        .map(|p| {
            Ok(Prediction {
                chosen_bank: bank_id,
                uncertainties: vec![entropy_uncertainty(&p, kind)?],
                probabilities: p,
            })
        })
        .collect()
}

pub fn predict_domain_agnostic<T: Real>(
    model: &DilModel<T>,
    sample: &Tensor<T>,
    options: AgnosticOptions,
) -> Result<Prediction> {
    let mut preds = predict_batch_agnostic(model, sample, options)?;
    if preds.len() != 1 {
        return Err(DilError::shape(
            "predict_domain_agnostic",
            "expected one sample",
        ));
    }
    Ok(preds.remove(0))
}

pub fn predict_batch_agnostic<T: Real>(
    model: &DilModel<T>,
    batch: &Tensor<T>,
    options: AgnosticOptions,
) -> Result<Vec<Prediction>> {
    let per_bank = (0..model.n_banks())
        .map(|b| {
            Ok((
                b,
                model.bank(b)?.spec.task_kind,
                bank_probabilities(model, b, batch)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    choose_per_sample(&per_bank, options)
}

/// Combines candidate outputs `(bank, kind, per-sample probabilities)` into
/// per-sample predictions.
pub fn choose_per_sample(
    candidates: &[(usize, TaskKind, Vec<Vec<f64>>)],
    options: AgnosticOptions,
) -> Result<Vec<Prediction>> {
    let Some((_, _, first)) = candidates.first() else {
        return Err(DilError::InvalidArgument("no candidate banks".into()));
    };
    let n = first.len();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let uncertainties = candidates
            .iter()
            .map(|(_, kind, probs)| {
                let p = &probs[s];
                let u = entropy_uncertainty(p, *kind)?;
                Ok(if options.normalize_by_classes {
                    let max = max_entropy(p.len(), *kind);
                    if max > 0.0 {
                        u / max
                    } else {
                        0.0
                    }
                } else {
                    u
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let pick = select_bank(&uncertainties)?;
        out.push(Prediction {
            chosen_bank: candidates[pick].0,
            probabilities: candidates[pick].2[s].clone(),
            uncertainties,
        });
    }
    Ok(out)
}
