use crate::error::{DilError, Result};

use super::{Tape, Tensor, Var};

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates sitting on a kink (one-sided slopes disagree), e.g. a
    /// ReLU input at exactly zero.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative slope mismatch above which a coordinate counts as a kink.
const KINK_TOLERANCE: f64 = 1e-3;

type Build<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn scalar_of(inputs: &[Tensor<f64>], build: Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(DilError::Graph(
            "gradient check needs a scalar output".into(),
        ));
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients with central finite differences for
/// every coordinate of every input that requires grad.
///
/// The error per coordinate is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn gradient_check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            grads
                .get(v)
                .map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec())
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    let center = scalar_of(&probe, &build)?;
    for (which, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        for (coord, &original) in input.data().iter().enumerate() {
            probe[which].data_mut()[coord] = original + eps;
            let plus = scalar_of(&probe, &build)?;
            probe[which].data_mut()[coord] = original - eps;
            let minus = scalar_of(&probe, &build)?;
            probe[which].data_mut()[coord] = original;

            let right = (plus - center) / eps;
            let left = (center - minus) / eps;
            if (right - left).abs() > KINK_TOLERANCE * 1f64.max(right.abs()).max(left.abs()) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let ad = analytic[which][coord];
            let rel = (ad - numeric).abs() / 1f64.max(ad.abs()).max(numeric.abs());
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= tol {
                report.failures.push(GradCheckFailure {
                    input: which,
                    coord,
                    analytic: ad,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_at_zero_is_skipped() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0])
            .unwrap()
            .with_requires_grad(true);
        let report = gradient_check(
            &[x],
            |tape, v| {
                let r = tape.relu(v[0])?;
                tape.sum(r)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 2);
    }
}
