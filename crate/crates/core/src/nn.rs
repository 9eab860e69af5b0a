//! Layers of the convolutional trunk and its classifier heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DilError, Result};
use crate::tensor::{BnBatchStats, BnMode, Real, Tape, Tensor, Var};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Handles produced by a batch-norm forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BnForward {
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Real> BnParams<T> {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.numel() != c {
                return Err(DilError::shape(
                    "bn_params",
                    format!("{name} has {} entries, gamma has {c}", t.numel()),
                ));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(DilError::InvalidArgument(
                "running variance must be >= 0".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(DilError::InvalidArgument("bn eps must be > 0".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(DilError::InvalidArgument(
                "bn momentum must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Normalizes `input` and applies the affine. In [`Mode::Train`] the
    /// batch statistics are returned for [`BnParams::absorb`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
    ) -> Result<(BnForward, Option<BnBatchStats<T>>)> {
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train {
                eps: T::lit(self.eps),
            },
            Mode::Eval => BnMode::Eval {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
                eps: T::lit(self.eps),
            },
        };
        let (output, stats) = tape.batch_norm(input, gamma, beta, bn_mode)?;
        Ok((
            BnForward {
                output,
                gamma,
                beta,
            },
            stats,
        ))
    }

    /// Moves the running statistics toward a batch's statistics by
    /// `momentum`. The population variance is folded in uncorrected.
    pub fn absorb(&mut self, stats: &BnBatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::lit(1.0 - self.momentum);
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *b;
        }
    }

    pub fn cast<U: Real>(&self) -> BnParams<U> {
        BnParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Free-function form of [`BnParams::forward`].
pub fn batchnorm_forward<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    params: &mut BnParams<T>,
    mode: Mode,
    update_stats: bool,
) -> Result<Var> {
    let (fwd, stats) = params.forward(tape, input, mode)?;
    if let (Some(stats), true) = (stats, update_stats) {
        params.absorb(&stats);
    }
    Ok(fwd.output)
}

/// Weight (out × in) and bias (out) of a fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearForward {
    pub output: Var,
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> LinearParams<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Glorot-uniform weight, zero bias.
    pub fn xavier<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        LinearParams {
            weight: Tensor::from_fn(vec![out_dim, in_dim], |_| {
                T::lit(rng.random_range(-bound..bound))
            }),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<LinearForward> {
        let weight = tape.leaf(&self.weight);
        let bias = tape.leaf(&self.bias);
        let output = tape.linear(input, weight, bias)?;
        Ok(LinearForward {
            output,
            weight,
            bias,
        })
    }

    pub fn cast<U: Real>(&self) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

pub fn linear_forward<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    params: &LinearParams<T>,
) -> Result<Var> {
    params.forward(tape, input).map(|f| f.output)
}

pub fn cross_entropy_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn binary_cross_entropy_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[T],
) -> Result<Var> {
    tape.binary_cross_entropy(logits, targets)
}

/// He-uniform kernel of shape `out × in × k × k`.
pub fn he_uniform_kernel<T: Real, R: Rng>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
    Tensor::from_fn(vec![out_ch, in_ch, k, k], |_| {
        T::lit(rng.random_range(-bound..bound))
    })
}
