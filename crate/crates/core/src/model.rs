//! Shared convolutional trunk with per-domain parameter banks.
//!
//! Convolution kernels and the base classifier are shared by every domain.
//! Each domain owns a [`DomainBank`]: one set of batch-norm parameters per
//! conv layer plus a classifier head over the domain's classes. A forward
//! pass for domain `t` swaps bank `t` into the trunk.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DilError, Result};
use crate::nn::{he_uniform_kernel, BnParams, LinearParams, Mode};
use crate::strategy::{HeadMode, Layout, Strategy};
use crate::tensor::{BnBatchStats, Real, Tape, Tensor, Var};

/// Convolutional trunk description. Each block is `convs_per_block` ×
/// (conv3×3 → BN → ReLU) followed by 2×2 average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub mel_bins: usize,
    pub frames: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![16, 32, 64],
            convs_per_block: 2,
            mel_bins: 32,
            frames: 32,
        }
    }
}

pub const KERNEL_SIZE: usize = 3;

/// Parameter bookkeeping for the shared/per-domain split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub shared_count: usize,
    pub per_domain_count: usize,
    pub shared_fraction: f64,
}

impl ParamAudit {
    pub fn from_counts(shared_count: usize, per_domain_count: usize) -> Self {
        let total = shared_count + per_domain_count;
        ParamAudit {
            shared_count,
            per_domain_count,
            shared_fraction: if total == 0 {
                1.0
            } else {
                shared_count as f64 / total as f64
            },
        }
    }
}

impl ArchConfig {
    /// Six blocks with the CNN14 channel widths over 64 mel bins.
    pub fn cnn14() -> Self {
        ArchConfig {
            channels: vec![64, 128, 256, 512, 1024, 2048],
            convs_per_block: 2,
            mel_bins: 64,
            frames: 1000,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn bn_layers(&self) -> usize {
        self.n_blocks() * self.convs_per_block
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated arch has blocks")
    }

    /// (in, out) channels of every conv layer in trunk order.
    pub fn conv_channels(&self) -> Vec<(usize, usize)> {
        let mut prev = 1;
        let mut out = Vec::with_capacity(self.bn_layers());
        for &c in &self.channels {
            for _ in 0..self.convs_per_block {
                out.push((prev, c));
                prev = c;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(DilError::Config(
                "architecture needs at least one block".into(),
            ));
        }
        if self.convs_per_block == 0 || self.channels.contains(&0) {
            return Err(DilError::Config(
                "conv counts and channel widths must be positive".into(),
            ));
        }
        let shrink = 1usize
            .checked_shl(self.n_blocks() as u32)
            .filter(|&s| s <= self.mel_bins && s <= self.frames);
        if shrink.is_none() {
            return Err(DilError::Config(format!(
                "input {}x{} underflows after {} 2x2 pools",
                self.mel_bins,
                self.frames,
                self.n_blocks()
            )));
        }
        Ok(())
    }

    pub fn shared_param_count(&self, base_classes: usize) -> usize {
        let convs: usize = self
            .conv_channels()
            .iter()
            .map(|&(i, o)| i * o * KERNEL_SIZE * KERNEL_SIZE)
            .sum();
        convs + self.feature_dim() * base_classes + base_classes
    }

    pub fn bank_param_count(&self, domain_classes: usize) -> usize {
        let bn: usize = self.conv_channels().iter().map(|&(_, o)| 2 * o).sum();
        bn + self.feature_dim() * domain_classes + domain_classes
    }

    /// Closed-form audit without allocating a model.
    pub fn audit(&self, base_classes: usize, domain_classes: usize) -> ParamAudit {
        ParamAudit::from_counts(
            self.shared_param_count(base_classes),
            self.bank_param_count(domain_classes),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

/// One domain of the incremental sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub class_list: Vec<String>,
    pub task_kind: TaskKind,
}

impl DomainSpec {
    pub fn validate(&self, vocabulary: &[String]) -> Result<()> {
        if self.class_list.is_empty() {
            return Err(DilError::Config(format!(
                "domain '{}' has no classes",
                self.name
            )));
        }
        for (i, c) in self.class_list.iter().enumerate() {
            if self.class_list[..i].contains(c) {
                return Err(DilError::Config(format!(
                    "domain '{}' lists class '{c}' twice",
                    self.name
                )));
            }
            if !vocabulary.contains(c) {
                return Err(DilError::Config(format!(
                    "domain '{}' uses class '{c}' missing from the vocabulary",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Parameters exclusive to one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBank<T: Real = f32> {
    pub spec: DomainSpec,
    pub bn: Vec<BnParams<T>>,
    pub head: LinearParams<T>,
    /// For each class of this domain, its column in the base classifier.
    pub class_map: Vec<Option<usize>>,
}

/// Addresses one tensor of a [`DilModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    Conv(usize),
    BaseWeight,
    BaseBias,
    Gamma { bank: usize, layer: usize },
    Beta { bank: usize, layer: usize },
    RunningMean { bank: usize, layer: usize },
    RunningVar { bank: usize, layer: usize },
    HeadWeight(usize),
    HeadBias(usize),
}

impl ParamRef {
    pub fn is_learnable(self) -> bool {
        !matches!(
            self,
            ParamRef::RunningMean { .. } | ParamRef::RunningVar { .. }
        )
    }

    pub fn bank(self) -> Option<usize> {
        match self {
            ParamRef::Gamma { bank, .. }
            | ParamRef::Beta { bank, .. }
            | ParamRef::RunningMean { bank, .. }
            | ParamRef::RunningVar { bank, .. } => Some(bank),
            ParamRef::HeadWeight(b) | ParamRef::HeadBias(b) => Some(b),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Option<ParamRef> {
        let parts: Vec<&str> = name.split('.').collect();
        let num = |s: &str| s.parse::<usize>().ok();
        match parts.as_slice() {
            ["trunk", "conv", i, "weight"] => Some(ParamRef::Conv(num(i)?)),
            ["base_head", "weight"] => Some(ParamRef::BaseWeight),
            ["base_head", "bias"] => Some(ParamRef::BaseBias),
            ["bank", b, "bn", l, field] => {
                let (bank, layer) = (num(b)?, num(l)?);
                match *field {
                    "gamma" => Some(ParamRef::Gamma { bank, layer }),
                    "beta" => Some(ParamRef::Beta { bank, layer }),
                    "running_mean" => Some(ParamRef::RunningMean { bank, layer }),
                    "running_var" => Some(ParamRef::RunningVar { bank, layer }),
                    _ => None,
                }
            }
            ["bank", b, "head", "weight"] => Some(ParamRef::HeadWeight(num(b)?)),
            ["bank", b, "head", "bias"] => Some(ParamRef::HeadBias(num(b)?)),
            _ => None,
        }
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamRef::Conv(i) => write!(f, "trunk.conv.{i}.weight"),
            ParamRef::BaseWeight => write!(f, "base_head.weight"),
            ParamRef::BaseBias => write!(f, "base_head.bias"),
            ParamRef::Gamma { bank, layer } => write!(f, "bank.{bank}.bn.{layer}.gamma"),
            ParamRef::Beta { bank, layer } => write!(f, "bank.{bank}.bn.{layer}.beta"),
            ParamRef::RunningMean { bank, layer } => {
                write!(f, "bank.{bank}.bn.{layer}.running_mean")
            }
            ParamRef::RunningVar { bank, layer } => write!(f, "bank.{bank}.bn.{layer}.running_var"),
            ParamRef::HeadWeight(b) => write!(f, "bank.{b}.head.weight"),
            ParamRef::HeadBias(b) => write!(f, "bank.{b}.head.bias"),
        }
    }
}

/// Which bank supplies batch norm and which supplies the class set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub bn_bank: usize,
    pub class_bank: usize,
}

/// Result of recording a forward pass on a tape.
pub struct ForwardPass<T: Real> {
    pub logits: Var,
    /// Every parameter leaf registered during the pass.
    pub bindings: Vec<(ParamRef, Var)>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub bn_stats: Vec<BnBatchStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DilModel<T: Real = f32> {
    pub arch: ArchConfig,
    pub vocabulary: Vec<String>,
    pub convs: Vec<Tensor<T>>,
    pub base_head: LinearParams<T>,
    pub banks: Vec<DomainBank<T>>,
    pub layout: Layout,
}

pub(crate) fn class_map(base: &DomainSpec, spec: &DomainSpec) -> Vec<Option<usize>> {
    spec.class_list
        .iter()
        .map(|c| base.class_list.iter().position(|b| b == c))
        .collect()
}

/// Builds the base model: He-uniform kernels, Glorot base classifier with
/// zero bias, and bank 0 (γ = 1, β = 0, μ = 0, σ² = 1) for the base domain.
pub fn build_model<T: Real>(
    arch: &ArchConfig,
    vocabulary: &[String],
    base_domain: &DomainSpec,
    seed: u64,
) -> Result<DilModel<T>> {
    arch.validate()?;
    base_domain.validate(vocabulary)?;
    if base_domain.domain_id != 0 {
        return Err(DilError::Config(format!(
            "base domain must have domain_id 0, got {}",
            base_domain.domain_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = arch
        .conv_channels()
        .into_iter()
        .map(|(i, o)| he_uniform_kernel(o, i, KERNEL_SIZE, &mut rng))
        .collect();
    let n_classes = base_domain.class_list.len();
    let base_head = LinearParams::xavier(arch.feature_dim(), n_classes, &mut rng);
    let bank = DomainBank {
        spec: base_domain.clone(),
        bn: arch
            .conv_channels()
            .into_iter()
            .map(|(_, o)| BnParams::new(o))
            .collect(),
        head: LinearParams::zeros(arch.feature_dim(), n_classes),
        class_map: (0..n_classes).map(Some).collect(),
    };
    Ok(DilModel {
        arch: arch.clone(),
        vocabulary: vocabulary.to_vec(),
        convs,
        base_head,
        banks: vec![bank],
        layout: Layout::default(),
    })
}

impl<T: Real> DilModel<T> {
    pub fn n_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn base_domain(&self) -> &DomainSpec {
        &self.banks[0].spec
    }

    pub fn bank(&self, bank_id: usize) -> Result<&DomainBank<T>> {
        self.banks.get(bank_id).ok_or_else(|| {
            DilError::InvalidArgument(format!(
                "bank {bank_id} does not exist (model has {})",
                self.banks.len()
            ))
        })
    }

    /// Appends a bank for `spec`. Batch-norm parameters and statistics are
    /// copied from the previous bank; the head starts at zero so that the
    /// new bank initially reproduces the base classifier on mapped classes.
    pub fn add_domain(&mut self, spec: DomainSpec) -> Result<usize> {
        spec.validate(&self.vocabulary)?;
        let next = self.banks.len();
        if spec.domain_id != next {
            return Err(DilError::InvalidArgument(format!(
                "domain '{}' has domain_id {} but the next bank index is {next}{}",
                spec.name,
                spec.domain_id,
                if spec.domain_id < next {
                    " (duplicate domain_id)"
                } else {
                    ""
                }
            )));
        }
        let prev = &self.banks[next - 1];
        let map = class_map(self.base_domain(), &spec);
        let bank = DomainBank {
            bn: prev.bn.clone(),
            head: LinearParams::zeros(self.arch.feature_dim(), spec.class_list.len()),
            class_map: map,
            spec,
        };
        self.banks.push(bank);
        Ok(next)
    }

    pub fn route(&self, bank_id: usize) -> Route {
        Route {
            bn_bank: if self.layout.shared_bn { 0 } else { bank_id },
            class_bank: bank_id,
        }
    }

    /// Records the forward pass of `input` (N×1×F×T) through `route`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        route: Route,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        let bn_bank = self.bank(route.bn_bank)?;
        let class_bank = self.bank(route.class_bank)?;
        let mut bindings = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = input;
        let mut layer = 0;
        for _ in 0..self.arch.n_blocks() {
            for _ in 0..self.arch.convs_per_block {
                let kernel = tape.leaf(&self.convs[layer]);
                bindings.push((ParamRef::Conv(layer), kernel));
                h = tape.conv2d(h, kernel, 1, KERNEL_SIZE / 2)?;
                let (bn, stats) = bn_bank.bn[layer].forward(tape, h, mode)?;
                bindings.push((
                    ParamRef::Gamma {
                        bank: route.bn_bank,
                        layer,
                    },
                    bn.gamma,
                ));
                bindings.push((
                    ParamRef::Beta {
                        bank: route.bn_bank,
                        layer,
                    },
                    bn.beta,
                ));
                bn_stats.extend(stats);
                h = tape.relu(bn.output)?;
                layer += 1;
            }
            h = tape.avg_pool2d(h, 2)?;
        }
        let features = tape.global_pool(h)?;

        let base_logits =
            |tape: &mut Tape<T>, bindings: &mut Vec<(ParamRef, Var)>| -> Result<Var> {
                let g = self.base_head.forward(tape, features)?;
                bindings.push((ParamRef::BaseWeight, g.weight));
                bindings.push((ParamRef::BaseBias, g.bias));
                tape.gather_cols(g.output, &class_bank.class_map)
            };
        let own_logits = |tape: &mut Tape<T>, bindings: &mut Vec<(ParamRef, Var)>| -> Result<Var> {
            let h = class_bank.head.forward(tape, features)?;
            bindings.push((ParamRef::HeadWeight(route.class_bank), h.weight));
            bindings.push((ParamRef::HeadBias(route.class_bank), h.bias));
            Ok(h.output)
        };
        let logits = match (route.class_bank, self.layout.head) {
            (0, _) | (_, HeadMode::Base) => base_logits(tape, &mut bindings)?,
            (_, HeadMode::Own) => own_logits(tape, &mut bindings)?,
            (_, HeadMode::Residual) => {
                let own = own_logits(tape, &mut bindings)?;
                let base = base_logits(tape, &mut bindings)?;
                tape.add(own, base)?
            }
        };
        Ok(ForwardPass {
            logits,
            bindings,
            bn_stats,
        })
    }

    /// Evaluation-mode logits of `batch` through bank `bank_id`.
    pub fn forward(&self, bank_id: usize, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.bank(bank_id)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let pass = self.forward_on_tape(&mut tape, self.route(bank_id), x, Mode::Eval)?;
        Ok(tape.to_tensor(pass.logits))
    }

    /// Folds training-mode batch statistics into a bank's running estimates.
    pub fn absorb_stats(&mut self, bank_id: usize, stats: &[BnBatchStats<T>]) -> Result<()> {
        let bank = self
            .banks
            .get_mut(bank_id)
            .ok_or_else(|| DilError::InvalidArgument(format!("bank {bank_id} does not exist")))?;
        if stats.len() != bank.bn.len() {
            return Err(DilError::shape(
                "absorb_stats",
                format!("{} statistics for {} layers", stats.len(), bank.bn.len()),
            ));
        }
        for (bn, s) in bank.bn.iter_mut().zip(stats) {
            bn.absorb(s);
        }
        Ok(())
    }

    /// Every tensor of the model in a fixed order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs: Vec<ParamRef> = (0..self.convs.len()).map(ParamRef::Conv).collect();
        refs.push(ParamRef::BaseWeight);
        refs.push(ParamRef::BaseBias);
        for (b, bank) in self.banks.iter().enumerate() {
            for layer in 0..bank.bn.len() {
                refs.push(ParamRef::Gamma { bank: b, layer });
                refs.push(ParamRef::Beta { bank: b, layer });
                refs.push(ParamRef::RunningMean { bank: b, layer });
                refs.push(ParamRef::RunningVar { bank: b, layer });
            }
            refs.push(ParamRef::HeadWeight(b));
            refs.push(ParamRef::HeadBias(b));
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor<T>> {
        Some(match r {
            ParamRef::Conv(i) => self.convs.get(i)?,
            ParamRef::BaseWeight => &self.base_head.weight,
            ParamRef::BaseBias => &self.base_head.bias,
            ParamRef::Gamma { bank, layer } => &self.banks.get(bank)?.bn.get(layer)?.gamma,
            ParamRef::Beta { bank, layer } => &self.banks.get(bank)?.bn.get(layer)?.beta,
            ParamRef::RunningMean { bank, layer } => {
                &self.banks.get(bank)?.bn.get(layer)?.running_mean
            }
            ParamRef::RunningVar { bank, layer } => {
                &self.banks.get(bank)?.bn.get(layer)?.running_var
            }
            ParamRef::HeadWeight(b) => &self.banks.get(b)?.head.weight,
            ParamRef::HeadBias(b) => &self.banks.get(b)?.head.bias,
        })
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor<T>> {
        Some(match r {
            ParamRef::Conv(i) => self.convs.get_mut(i)?,
            ParamRef::BaseWeight => &mut self.base_head.weight,
            ParamRef::BaseBias => &mut self.base_head.bias,
            ParamRef::Gamma { bank, layer } => {
                &mut self.banks.get_mut(bank)?.bn.get_mut(layer)?.gamma
            }
            ParamRef::Beta { bank, layer } => {
                &mut self.banks.get_mut(bank)?.bn.get_mut(layer)?.beta
            }
            ParamRef::RunningMean { bank, layer } => {
                &mut self.banks.get_mut(bank)?.bn.get_mut(layer)?.running_mean
            }
            ParamRef::RunningVar { bank, layer } => {
                &mut self.banks.get_mut(bank)?.bn.get_mut(layer)?.running_var
            }
            ParamRef::HeadWeight(b) => &mut self.banks.get_mut(b)?.head.weight,
            ParamRef::HeadBias(b) => &mut self.banks.get_mut(b)?.head.bias,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.param_refs()
            .into_iter()
            .map(|r| (r.to_string(), self.param(r).expect("listed ref exists")))
            .collect()
    }

    /// Parameters updated at `step` (bank index) under `strategy`. Step 0
    /// trains the base model in full.
    pub fn trainable_params(&self, strategy: Strategy, step: usize) -> Vec<ParamRef> {
        let learnable = || -> Vec<ParamRef> {
            self.param_refs()
                .into_iter()
                .filter(|r| r.is_learnable())
                .collect()
        };
        if step == 0 {
            return learnable();
        }
        let bn = || -> Vec<ParamRef> {
            (0..self.arch.bn_layers())
                .flat_map(|layer| {
                    [
                        ParamRef::Gamma { bank: step, layer },
                        ParamRef::Beta { bank: step, layer },
                    ]
                })
                .collect()
        };
        let head = [ParamRef::HeadWeight(step), ParamRef::HeadBias(step)];
        match strategy {
            Strategy::Adil | Strategy::BnClf => {
                let mut v = bn();
                v.extend(head);
                v
            }
            Strategy::Bn => bn(),
            Strategy::Clf => head.to_vec(),
            Strategy::BnStats => Vec::new(),
            Strategy::Fe => vec![ParamRef::BaseWeight, ParamRef::BaseBias],
            Strategy::Ft | Strategy::Single | Strategy::Multi => learnable(),
        }
    }

    /// Marks exactly `trainable` as requiring grad.
    pub fn set_trainable(&mut self, trainable: &[ParamRef]) {
        for r in self.param_refs() {
            let flag = trainable.contains(&r);
            if let Some(t) = self.param_mut(r) {
                t.set_requires_grad(flag);
            }
        }
    }

    pub fn param_audit(&self) -> ParamAudit {
        let count = |refs: &mut dyn Iterator<Item = ParamRef>| -> usize {
            refs.filter_map(|r| self.param(r)).map(|t| t.numel()).sum()
        };
        let shared = count(
            &mut (0..self.convs.len())
                .map(ParamRef::Conv)
                .chain([ParamRef::BaseWeight, ParamRef::BaseBias]),
        );
        let last = self.banks.len() - 1;
        let per_domain = count(
            &mut self
                .param_refs()
                .into_iter()
                .filter(|r| r.is_learnable() && r.bank() == Some(last)),
        );
        ParamAudit::from_counts(shared, per_domain)
    }

    /// SHA-256 of each named tensor.
    pub fn digests(&self) -> BTreeMap<String, [u8; 32]> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.digest()))
            .collect()
    }

    /// One digest over the shared trunk, the base classifier and banks
    /// `0..banks_below`.
    pub fn frozen_digest(&self, banks_below: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        for r in self.param_refs() {
            if r.bank().is_none_or(|b| b < banks_below) {
                h.update(r.to_string().as_bytes());
                h.update(self.param(r).expect("listed ref exists").digest());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Real>(&self) -> DilModel<U> {
        DilModel {
            arch: self.arch.clone(),
            vocabulary: self.vocabulary.clone(),
            convs: self.convs.iter().map(|t| t.cast()).collect(),
            base_head: self.base_head.cast(),
            banks: self
                .banks
                .iter()
                .map(|b| DomainBank {
                    spec: b.spec.clone(),
                    bn: b.bn.iter().map(|p| p.cast()).collect(),
                    head: b.head.cast(),
                    class_map: b.class_map.clone(),
                })
                .collect(),
            layout: self.layout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn spec(id: usize, classes: &[&str]) -> DomainSpec {
        DomainSpec {
            domain_id: id,
            name: format!("d{id}"),
            class_list: classes.iter().map(|s| s.to_string()).collect(),
            task_kind: TaskKind::SingleLabel,
        }
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            channels: vec![4, 8],
            convs_per_block: 2,
            mel_bins: 8,
            frames: 8,
        }
    }

    #[test]
    fn deterministic_init() {
        let a: DilModel =
            build_model(&small_arch(), &vocab(3), &spec(0, &["c0", "c1", "c2"]), 5).unwrap();
        let b: DilModel =
            build_model(&small_arch(), &vocab(3), &spec(0, &["c0", "c1", "c2"]), 5).unwrap();
        assert_eq!(a.digests(), b.digests());
        let c: DilModel =
            build_model(&small_arch(), &vocab(3), &spec(0, &["c0", "c1", "c2"]), 6).unwrap();
        assert_ne!(a.digests(), c.digests());
        assert!(a.banks[0]
            .bn
            .iter()
            .all(|p| p.gamma.data().iter().all(|&g| g == 1.0)));
        assert!(a.base_head.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn closed_form_param_count() {
        // 3 blocks of [16, 32, 64] over 64×64 input, 10 classes.
        let arch = ArchConfig {
            channels: vec![16, 32, 64],
            convs_per_block: 2,
            mel_bins: 64,
            frames: 64,
        };
        let convs = 9 * (16 + 16 * 16 + 16 * 32 + 32 * 32 + 32 * 64 + 64 * 64);
        assert_eq!(convs, 71_568);
        let shared = convs + 64 * 10 + 10;
        let bank = 2 * (16 + 16 + 32 + 32 + 64 + 64) + 64 * 10 + 10;
        let model: DilModel = build_model(&arch, &vocab(10), &spec(0, &vocab_refs(10)), 1).unwrap();
        let audit = model.param_audit();
        assert_eq!(audit.shared_count, shared);
        assert_eq!(audit.per_domain_count, bank);
        assert_eq!(audit, arch.audit(10, 10));
        assert!((audit.shared_fraction - shared as f64 / (shared + bank) as f64).abs() < 1e-15);
    }

    fn vocab_refs(n: usize) -> Vec<&'static str> {
        ["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"][..n].to_vec()
    }

    #[test]
    fn degenerate_audit_is_fully_shared() {
        assert_eq!(ParamAudit::from_counts(100, 0).shared_fraction, 1.0);
    }

    #[test]
    fn spatial_underflow_is_rejected() {
        let arch = ArchConfig {
            channels: vec![4, 4, 4, 4],
            convs_per_block: 1,
            mel_bins: 8,
            frames: 64,
        };
        assert!(build_model::<f32>(&arch, &vocab(2), &spec(0, &["c0", "c1"]), 0).is_err());
    }

    #[test]
    fn add_domain_copies_bn_and_zeroes_head() {
        let mut m: DilModel =
            build_model(&small_arch(), &vocab(3), &spec(0, &["c0", "c1", "c2"]), 5).unwrap();
        m.banks[0].bn[1].running_mean.data_mut()[0] = 0.7;
        let id = m.add_domain(spec(1, &["c2", "c0"])).unwrap();
        assert_eq!(id, 1);
        assert_eq!(m.banks[1].bn, m.banks[0].bn);
        assert!(m.banks[1].head.weight.data().iter().all(|&w| w == 0.0));
        assert_eq!(m.banks[1].class_map, vec![Some(2), Some(0)]);
        assert!(m.add_domain(spec(1, &["c1"])).is_err());
        assert!(m.add_domain(spec(3, &["c1"])).is_err());
        assert!(m.add_domain(spec(2, &["zz"])).is_err());
    }

    #[test]
    fn adil_trainable_count() {
        let arch = ArchConfig {
            channels: vec![4, 8, 8],
            convs_per_block: 2,
            mel_bins: 8,
            frames: 8,
        };
        let mut m: DilModel = build_model(&arch, &vocab(2), &spec(0, &["c0", "c1"]), 0).unwrap();
        m.add_domain(spec(1, &["c0", "c1"])).unwrap();
        m.add_domain(spec(2, &["c0", "c1"])).unwrap();
        let p = m.trainable_params(Strategy::Adil, 2);
        assert_eq!(p.len(), 12 + 2);
        assert!(p.iter().all(|r| r.bank() == Some(2)));
        assert!(m.trainable_params(Strategy::BnStats, 2).is_empty());
        let all: Vec<_> = m
            .param_refs()
            .into_iter()
            .filter(|r| r.is_learnable())
            .collect();
        assert_eq!(m.trainable_params(Strategy::Ft, 2), all);
    }

    #[test]
    fn param_names_round_trip() {
        let mut m: DilModel =
            build_model(&small_arch(), &vocab(2), &spec(0, &["c0", "c1"]), 0).unwrap();
        m.add_domain(spec(1, &["c1"])).unwrap();
        for r in m.param_refs() {
            assert_eq!(ParamRef::parse(&r.to_string()), Some(r));
        }
        assert_eq!(ParamRef::parse("bank.x.head.bias"), None);
    }

    #[test]
    fn invalid_bank_is_an_error() {
        let m: DilModel =
            build_model(&small_arch(), &vocab(2), &spec(0, &["c0", "c1"]), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(m.forward(1, &x).is_err());
        assert_eq!(m.forward(0, &x).unwrap().shape(), &[1, 2]);
    }
}
