//! Per-domain training loops and the incremental protocol runner.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, epoch_seed, Dataset};
use crate::error::{DilError, Result};
use crate::inference::{bank_probabilities, choose_per_sample, AgnosticOptions};
use crate::metrics::{accuracy, build_report, lwlrap, AgnosticStep, MetricKind, MetricsReport};
use crate::model::{build_model, ArchConfig, DilModel, DomainSpec, ParamRef, TaskKind};
use crate::nn::Mode;
use crate::optim::{adam_step, cosine_lr, AdamState, TrainConfig};
use crate::strategy::{HeadMode, Strategy};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Accuracy (single-label) or per-class decision accuracy at logit 0
    /// (multi-label) on the training batches.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub bank_id: usize,
    pub strategy: String,
    pub lr_max: f64,
    pub epochs: Vec<EpochLog>,
    /// Tensors whose bytes differ after training.
    pub changed: Vec<String>,
}

/// Seed of the shuffle stream for bank `bank_id`.
pub fn shuffle_seed(seed: u64, bank_id: usize) -> u64 {
    epoch_seed(seed ^ 0x5348_5546_464c_4553, bank_id)
}

/// Initialization seed of the fresh model trained at `step` (0-based).
pub fn init_seed(seed: u64, step: usize) -> u64 {
    if step == 0 {
        seed
    } else {
        epoch_seed(seed ^ 0x494e_4954_5345_4544, step)
    }
}

/// Trains bank `bank_id` on `dataset` under `strategy` with the learning
/// rate and shuffle stream the configuration assigns to that bank.
pub fn train_domain<T: Real>(
    model: &mut DilModel<T>,
    bank_id: usize,
    dataset: &Dataset,
    strategy: Strategy,
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_domain_with(
        model,
        bank_id,
        dataset,
        strategy,
        config,
        config.lr_for_bank(bank_id),
        shuffle_seed(config.seed, bank_id),
    )
}

/// [`train_domain`] with an explicit peak learning rate and shuffle seed.
/// Fails if any parameter outside the strategy's trainable set changes.
pub fn train_domain_with<T: Real>(
    model: &mut DilModel<T>,
    bank_id: usize,
    dataset: &Dataset,
    strategy: Strategy,
    config: &TrainConfig,
    lr_max: f64,
    seed: u64,
) -> Result<TrainLog> {
    let bank = model.bank(bank_id)?;
    if dataset.is_empty() {
        return Err(DilError::Data(format!(
            "training set '{}' is empty",
            dataset.name
        )));
    }
    if dataset.n_classes != bank.spec.class_list.len() {
        return Err(DilError::InvalidArgument(format!(
            "dataset '{}' has {} classes but bank {bank_id} has {}",
            dataset.name,
            dataset.n_classes,
            bank.spec.class_list.len()
        )));
    }
    if (dataset.mel_bins, dataset.frames) != (model.arch.mel_bins, model.arch.frames) {
        return Err(DilError::Data(format!(
            "dataset '{}' is {}x{} but the model expects {}x{}",
            dataset.name, dataset.mel_bins, dataset.frames, model.arch.mel_bins, model.arch.frames
        )));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(DilError::Config(
            "batch_size and epochs must be >= 1".into(),
        ));
    }
    if !(lr_max >= 0.0 && lr_max.is_finite()) {
        return Err(DilError::InvalidArgument(format!(
            "learning rate {lr_max} is invalid"
        )));
    }

    let mode = if bank_id == 0 {
        Mode::Train
    } else {
        strategy.incremental_bn_mode()
    };
    let route = model.route(bank_id);
    let trainable = model.trainable_params(strategy, bank_id);
    let mut allowed: BTreeSet<ParamRef> = trainable.iter().copied().collect();
    if mode == Mode::Train {
        for layer in 0..model.arch.bn_layers() {
            allowed.insert(ParamRef::RunningMean {
                bank: route.bn_bank,
                layer,
            });
            allowed.insert(ParamRef::RunningVar {
                bank: route.bn_bank,
                layer,
            });
        }
    }
    let before = model.digests();
    model.set_trainable(&trainable);

    let kind = dataset.task_kind;
    let mut adam = AdamState::from_config(config);
    let mut slots: Option<Vec<ParamRef>> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let result = (|| -> Result<()> {
        for epoch in 0..config.epochs {
            let lr = cosine_lr(epoch, config.epochs, lr_max, config.eta_min)?;
            let mut loss_sum = 0.0;
            let (mut hits, mut total) = (0usize, 0usize);
            for idx in batch_iter(dataset.len(), config.batch_size, epoch_seed(seed, epoch))? {
                let x = dataset.batch::<T>(&idx);
                let mut tape = Tape::new();
                let xv = tape.constant(&x);
                let pass = model.forward_on_tape(&mut tape, route, xv, mode)?;
                let loss = match kind {
                    TaskKind::SingleLabel => {
                        tape.cross_entropy(pass.logits, &dataset.class_indices(&idx))?
                    }
                    TaskKind::MultiLabel => {
                        tape.binary_cross_entropy(pass.logits, &dataset.multi_hot::<T>(&idx))?
                    }
                };
                loss_sum += tape.value(loss)[0].as_f64() * idx.len() as f64;
                let (h, n) = batch_hits(tape.value(pass.logits), dataset, &idx);
                hits += h;
                total += n;

                if !trainable.is_empty() {
                    let grads = tape.backward(loss)?;
                    let mut refs = Vec::new();
                    let mut gs: Vec<Vec<T>> = Vec::new();
                    for (r, var) in &pass.bindings {
                        if allowed.contains(r) && r.is_learnable() {
                            if let Some(g) = grads.get(*var) {
                                refs.push(*r);
                                gs.push(g.to_vec());
                            }
                        }
                    }
                    match &slots {
                        None => slots = Some(refs.clone()),
                        Some(s) if *s != refs => {
                            return Err(DilError::Graph(
                                "trainable parameters changed between batches".into(),
                            ))
                        }
                        Some(_) => {}
                    }
                    let mut taken: Vec<Tensor<T>> = refs
                        .iter()
                        .map(|r| {
                            std::mem::replace(
                                model.param_mut(*r).expect("bound parameter exists"),
                                Tensor::scalar(T::zero()),
                            )
                        })
                        .collect();
                    let grad_refs: Vec<&[T]> = gs.iter().map(Vec::as_slice).collect();
                    let mut views: Vec<&mut Tensor<T>> = taken.iter_mut().collect();
                    let step = adam_step(&mut views, &grad_refs, &mut adam, lr);
                    for (r, t) in refs.iter().zip(taken) {
                        *model.param_mut(*r).expect("bound parameter exists") = t;
                    }
                    step?;
                }
                if mode == Mode::Train {
                    model.absorb_stats(route.bn_bank, &pass.bn_stats)?;
                }
            }
            epochs.push(EpochLog {
                epoch,
                lr,
                loss: loss_sum / dataset.len() as f64,
                train_accuracy: hits as f64 / total.max(1) as f64,
            });
        }
        Ok(())
    })();
    model.set_trainable(&[]);
    result?;

    let after = model.digests();
    let mut changed = Vec::new();
    for (name, digest) in &before {
        if after.get(name) != Some(digest) {
            let r = ParamRef::parse(name).expect("model names parse");
            if !allowed.contains(&r) {
                return Err(DilError::Graph(format!(
                    "frozen tensor {name} changed while training bank {bank_id}"
                )));
            }
            changed.push(name.clone());
        }
    }
    Ok(TrainLog {
        bank_id,
        strategy: strategy.name().to_string(),
        lr_max,
        epochs,
        changed,
    })
}

/// Re-estimates bank `bank_id`'s running statistics with training-mode
/// forward passes over `dataset`; no parameter receives a gradient.
pub fn recompute_bn_stats<T: Real>(
    model: &mut DilModel<T>,
    bank_id: usize,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<()> {
    model.bank(bank_id)?;
    if dataset.is_empty() {
        return Err(DilError::Data(format!(
            "dataset '{}' is empty",
            dataset.name
        )));
    }
    let route = model.route(bank_id);
    for epoch in 0..config.epochs {
        for idx in batch_iter(dataset.len(), config.batch_size, epoch_seed(seed, epoch))? {
            let x = dataset.batch::<T>(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let pass = model.forward_on_tape(&mut tape, route, xv, Mode::Train)?;
            model.absorb_stats(route.bn_bank, &pass.bn_stats)?;
        }
    }
    Ok(())
}

fn batch_hits<T: Real>(logits: &[T], dataset: &Dataset, idx: &[usize]) -> (usize, usize) {
    let c = dataset.n_classes;
    let mut hits = 0;
    match dataset.task_kind {
        TaskKind::SingleLabel => {
            for (row, &i) in logits.chunks(c).zip(idx) {
                if argmax(row.iter().map(|v| v.as_f64())) == dataset.labels(i)[0] {
                    hits += 1;
                }
            }
            (hits, idx.len())
        }
        TaskKind::MultiLabel => {
            for (row, &i) in logits.chunks(c).zip(idx) {
                let truth = dataset.truth_row(i);
                hits += row
                    .iter()
                    .zip(&truth)
                    .filter(|(z, &y)| (z.as_f64() > 0.0) == y)
                    .count();
            }
            (hits, idx.len() * c)
        }
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Train and test splits of one domain, labels indexing `spec.class_list`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Dataset,
    pub test: Dataset,
}

/// Everything `run_protocol_on` needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolPlan {
    pub strategy: Strategy,
    pub arch: ArchConfig,
    pub vocabulary: Vec<String>,
    pub train: TrainConfig,
    pub agnostic: bool,
    pub agnostic_options: AgnosticOptions,
    pub eval_batch_size: usize,
    /// Defaults to accuracy for single-label and lwlrap for multi-label
    /// base domains.
    pub metric: Option<MetricKind>,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub report: MetricsReport,
    pub logs: Vec<TrainLog>,
}

/// Percent score of bank `bank_id` of `model` on `test`, domain-aware.
pub fn evaluate_domain<T: Real>(
    model: &DilModel<T>,
    bank_id: usize,
    test: &Dataset,
    eval_batch_size: usize,
) -> Result<f64> {
    let probs = probabilities_over(model, bank_id, test, eval_batch_size)?;
    score_rows(&probs, test)
}

fn probabilities_over<T: Real>(
    model: &DilModel<T>,
    bank_id: usize,
    data: &Dataset,
    eval_batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(DilError::Data(format!("test set '{}' is empty", data.name)));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in order.chunks(eval_batch_size.max(1)) {
        out.extend(bank_probabilities(model, bank_id, &data.batch::<T>(chunk))?);
    }
    Ok(out)
}

/// Percent accuracy of argmax predictions or percent lwlrap of the scores.
fn score_rows(probs: &[Vec<f64>], data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let score = match data.task_kind {
        TaskKind::SingleLabel => {
            let preds: Vec<usize> = probs.iter().map(|p| argmax(p.iter().copied())).collect();
            accuracy(&preds, &data.class_indices(&all))?
        }
        TaskKind::MultiLabel => {
            let flat: Vec<f64> = probs.concat();
            let truth: Vec<bool> = all.iter().flat_map(|&i| data.truth_row(i)).collect();
            lwlrap(&flat, &truth, data.n_classes)?
        }
    };
    Ok(100.0 * score)
}

/// Checks that a strategy's layout can express every domain.
pub fn check_plan(plan: &ProtocolPlan, specs: &[DomainSpec]) -> Result<()> {
    let Some(base) = specs.first() else {
        return Err(DilError::Config(
            "protocol needs at least one domain".into(),
        ));
    };
    plan.arch.validate()?;
    plan.train.validate()?;
    if plan.eval_batch_size == 0 {
        return Err(DilError::Config("eval batch size must be >= 1".into()));
    }
    for (t, spec) in specs.iter().enumerate() {
        spec.validate(&plan.vocabulary)?;
        if spec.domain_id != t {
            return Err(DilError::Config(format!(
                "domain '{}' has domain_id {} at position {t}",
                spec.name, spec.domain_id
            )));
        }
        if specs[..t].iter().any(|s| s.name == spec.name) {
            return Err(DilError::Config(format!(
                "domain '{}' is listed twice",
                spec.name
            )));
        }
        let needs_base =
            plan.strategy.layout().head == HeadMode::Base && plan.strategy != Strategy::Single;
        if needs_base {
            if let Some(c) = spec
                .class_list
                .iter()
                .find(|c| !base.class_list.contains(c))
            {
                return Err(DilError::Config(format!(
                    "strategy {} classifies with the base classifier, but class '{c}' of \
                     domain '{}' is not a class of the base domain '{}'",
                    plan.strategy, spec.name, base.name
                )));
            }
        }
    }
    Ok(())
}

fn union_dataset<T: Real>(model: &DilModel<T>, data: &[DomainData]) -> Result<Dataset> {
    let base = &model.banks[0];
    let mut union = Dataset::new(
        "joint",
        model.arch.mel_bins,
        model.arch.frames,
        base.spec.task_kind,
        base.spec.class_list.len(),
    );
    for (b, d) in data.iter().enumerate() {
        let map = &model.bank(b)?.class_map;
        for i in 0..d.train.len() {
            let labels = d
                .train
                .labels(i)
                .iter()
                .map(|&l| map[l].expect("checked subset"))
                .collect();
            union.push(d.train.sample(i), labels)?;
        }
    }
    Ok(union)
}

/// Runs the incremental sequence over in-memory domains. `on_step` sees the
/// model used for the newest domain after each step (1-based).
pub fn run_protocol_on<T: Real>(
    plan: &ProtocolPlan,
    data: &[DomainData],
    mut on_step: impl FnMut(usize, &DilModel<T>) -> Result<()>,
) -> Result<ProtocolOutcome> {
    let specs: Vec<DomainSpec> = data.iter().map(|d| d.spec.clone()).collect();
    check_plan(plan, &specs)?;
    for d in data {
        for split in [&d.train, &d.test] {
            if split.n_classes != d.spec.class_list.len() || split.task_kind != d.spec.task_kind {
                return Err(DilError::Data(format!(
                    "data of domain '{}' does not match its class list",
                    d.spec.name
                )));
            }
        }
    }
    let strategy = plan.strategy;
    let layout = strategy.layout();
    let cfg = &plan.train;
    let mut logs = Vec::new();

    let mut model: DilModel<T> = build_model(&plan.arch, &plan.vocabulary, &specs[0], cfg.seed)?;
    model.layout = layout;
    logs.push(train_domain(&mut model, 0, &data[0].train, strategy, cfg)?);
    let base_snapshot = (strategy == Strategy::Multi).then(|| model.clone());
    let mut singles: Vec<DilModel<T>> = Vec::new();
    if strategy == Strategy::Single {
        singles.push(model.clone());
    }

    let metric = plan.metric.unwrap_or(match specs[0].task_kind {
        TaskKind::SingleLabel => MetricKind::Accuracy,
        TaskKind::MultiLabel => MetricKind::Lwlrap,
    });
    let mut cells = BTreeMap::new();
    let mut agnostic_steps = Vec::new();

    for t in 0..data.len() {
        if t > 0 {
            let log = match strategy {
                Strategy::Single => {
                    let mut spec = specs[t].clone();
                    spec.domain_id = 0;
                    let mut fresh: DilModel<T> =
                        build_model(&plan.arch, &plan.vocabulary, &spec, init_seed(cfg.seed, t))?;
                    fresh.layout = layout;
                    let log = train_domain_with(
                        &mut fresh,
                        0,
                        &data[t].train,
                        strategy,
                        cfg,
                        cfg.lr_base,
                        shuffle_seed(cfg.seed, t),
                    )?;
                    singles.push(fresh);
                    log
                }
                Strategy::Multi => {
                    let mut joint = base_snapshot.clone().expect("snapshot kept for multi");
                    for spec in &specs[1..=t] {
                        joint.add_domain(spec.clone())?;
                    }
                    let union = union_dataset(&joint, &data[..=t])?;
                    let log = train_domain_with(
                        &mut joint,
                        0,
                        &union,
                        strategy,
                        cfg,
                        cfg.lr_incremental,
                        shuffle_seed(cfg.seed, t),
                    )?;
                    // shared affine everywhere; statistics from each domain alone,
                    // bank 0 last so the others start from the joint estimate
                    for i in (0..=t).rev() {
                        if i > 0 {
                            let shared = joint.banks[0].bn.clone();
                            joint.banks[i].bn = shared;
                        }
                        recompute_bn_stats(
                            &mut joint,
                            i,
                            &data[i].train,
                            cfg,
                            shuffle_seed(cfg.seed, t),
                        )?;
                    }
                    model = joint;
                    log
                }
                _ => {
                    model.add_domain(specs[t].clone())?;
                    train_domain(&mut model, t, &data[t].train, strategy, cfg)?
                }
            };
            logs.push(log);
        }
        let newest = if strategy == Strategy::Single {
            &singles[t]
        } else {
            &model
        };
        on_step(t + 1, newest)?;

        // candidate (model, bank) pairs, one per domain seen so far
        let candidates: Vec<(&DilModel<T>, usize)> = (0..=t)
            .map(|i| {
                if strategy == Strategy::Single {
                    (&singles[i], 0)
                } else {
                    (&model, i)
                }
            })
            .collect();
        for (i, &(m, b)) in candidates.iter().enumerate() {
            let score = evaluate_domain(m, b, &data[i].test, plan.eval_batch_size)?;
            cells.insert((t + 1, i + 1), score);
        }
        if plan.agnostic {
            agnostic_steps.push(evaluate_agnostic(&candidates, data, plan)?);
        }
    }

    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let mut report = build_report(strategy.name(), metric, &names, &cells)?;
    for (step, agn) in report.steps.iter_mut().zip(agnostic_steps) {
        step.agnostic = Some(agn);
    }
    Ok(ProtocolOutcome { report, logs })
}

/// Routes every test sample of every seen domain through the bank with the
/// lowest entropy and scores it against the sample's own domain.
fn evaluate_agnostic<T: Real>(
    candidates: &[(&DilModel<T>, usize)],
    data: &[DomainData],
    plan: &ProtocolPlan,
) -> Result<AgnosticStep> {
    let groups: Vec<EvalGroup> = data[..candidates.len()]
        .iter()
        .enumerate()
        .map(|(i, d)| EvalGroup {
            true_bank: i,
            data: &d.test,
            classes: &d.spec.class_list,
        })
        .collect();
    agnostic_over(
        candidates,
        &groups,
        plan.agnostic_options,
        plan.eval_batch_size,
    )
}

/// Test samples of one domain for domain-agnostic scoring.
pub struct EvalGroup<'a> {
    /// Candidate index the samples belong to.
    pub true_bank: usize,
    pub data: &'a Dataset,
    /// Class names behind the dataset's label positions.
    pub classes: &'a [String],
}

/// Domain-agnostic scores of `groups` over every bank of `model`.
pub fn evaluate_agnostic_model<T: Real>(
    model: &DilModel<T>,
    groups: &[EvalGroup],
    options: AgnosticOptions,
    eval_batch_size: usize,
) -> Result<AgnosticStep> {
    let candidates: Vec<(&DilModel<T>, usize)> = (0..model.n_banks()).map(|b| (model, b)).collect();
    agnostic_over(&candidates, groups, options, eval_batch_size)
}

fn agnostic_over<T: Real>(
    candidates: &[(&DilModel<T>, usize)],
    groups: &[EvalGroup],
    options: AgnosticOptions,
    eval_batch_size: usize,
) -> Result<AgnosticStep> {
    let mut scores = Vec::with_capacity(groups.len());
    let mut confusion = vec![vec![0usize; candidates.len()]; groups.len()];
    let (mut correct, mut total) = (0usize, 0usize);
    for (g, group) in groups.iter().enumerate() {
        let test = group.data;
        let per_bank = candidates
            .iter()
            .enumerate()
            .map(|(b, &(m, bank))| {
                let kind = m.bank(bank)?.spec.task_kind;
                Ok((b, kind, probabilities_over(m, bank, test, eval_batch_size)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = choose_per_sample(&per_bank, options)?;
        let own = group.classes;
        let mut rows = Vec::with_capacity(preds.len());
        for p in &preds {
            confusion[g][p.chosen_bank] += 1;
            total += 1;
            if p.chosen_bank == group.true_bank {
                correct += 1;
            }
            let (m, bank) = candidates[p.chosen_bank];
            let chosen = &m.bank(bank)?.spec.class_list;
            rows.push(match test.task_kind {
                TaskKind::SingleLabel => {
                    // one-hot of the predicted class if this domain has it
                    let name = &chosen[argmax(p.probabilities.iter().copied())];
                    own.iter()
                        .map(|c| if c == name { 1.0 } else { 0.0 })
                        .collect()
                }
                TaskKind::MultiLabel => own
                    .iter()
                    .map(|c| {
                        chosen
                            .iter()
                            .position(|x| x == c)
                            .map_or(0.0, |k| p.probabilities[k])
                    })
                    .collect::<Vec<f64>>(),
            });
        }
        scores.push(match test.task_kind {
            TaskKind::SingleLabel => {
                let all: Vec<usize> = (0..test.len()).collect();
                let labels = test.class_indices(&all);
                let hits = rows
                    .iter()
                    .zip(&labels)
                    .filter(|(r, &l)| r[l] == 1.0)
                    .count();
                100.0 * (hits as f64 / labels.len() as f64)
            }
            TaskKind::MultiLabel => score_rows(&rows, test)?,
        });
    }
    Ok(AgnosticStep {
        average: scores.iter().sum::<f64>() / groups.len().max(1) as f64,
        scores,
        selection_accuracy: correct as f64 / total.max(1) as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domain, SyntheticDomainSpec};

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            channels: vec![4, 8],
            convs_per_block: 1,
            mel_bins: 8,
            frames: 8,
        }
    }

    fn domain(id: usize, name: &str, scale: f64) -> DomainData {
        let spec = SyntheticDomainSpec {
            name: name.into(),
            n_classes: 3,
            train_per_class: 6,
            test_per_class: 4,
            mel_bins: 8,
            frames: 8,
            prototype_seed: 5,
            scale,
            offset: 0.0,
            noise: 0.2,
            band_emphasis: None,
            specific_weight: 0.0,
            tilt: 0.0,
            level_spread: 0.0,
            specific_seed: 0,
            task_kind: TaskKind::SingleLabel,
        };
        let d = generate_synthetic_domain(&spec, 9 + id as u64).unwrap();
        DomainData {
            spec: DomainSpec {
                domain_id: id,
                name: name.into(),
                class_list: spec.class_names(),
                task_kind: TaskKind::SingleLabel,
            },
            train: d.train,
            test: d.test,
        }
    }

    fn plan(strategy: Strategy) -> ProtocolPlan {
        ProtocolPlan {
            strategy,
            arch: tiny_arch(),
            vocabulary: crate::data::class_names(3),
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            agnostic: true,
            agnostic_options: AgnosticOptions::default(),
            eval_batch_size: 16,
            metric: None,
        }
    }

    #[test]
    fn bn_stats_changes_only_running_statistics() {
        let data = [domain(0, "a", 1.0), domain(1, "b", 2.0)];
        let p = plan(Strategy::BnStats);
        let mut m: DilModel<f32> = build_model(&p.arch, &p.vocabulary, &data[0].spec, 0).unwrap();
        m.layout = Strategy::BnStats.layout();
        m.add_domain(data[1].spec.clone()).unwrap();
        let log = train_domain(&mut m, 1, &data[1].train, Strategy::BnStats, &p.train).unwrap();
        assert!(!log.changed.is_empty());
        assert!(
            log.changed.iter().all(|n| n.contains("running_")),
            "{:?}",
            log.changed
        );
    }

    #[test]
    fn zero_learning_rate_moves_nothing_learnable() {
        let data = [domain(0, "a", 1.0)];
        let p = plan(Strategy::Adil);
        let mut m: DilModel<f32> = build_model(&p.arch, &p.vocabulary, &data[0].spec, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..p.train.clone()
        };
        let log =
            train_domain_with(&mut m, 0, &data[0].train, Strategy::Adil, &cfg, 0.0, 1).unwrap();
        assert!(
            log.changed.iter().all(|n| n.contains("running_")),
            "{:?}",
            log.changed
        );
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = [domain(0, "a", 1.0)];
        let p = plan(Strategy::Adil);
        let mut m: DilModel<f32> = build_model(&p.arch, &p.vocabulary, &data[0].spec, 0).unwrap();
        let empty = Dataset::new("e", 8, 8, TaskKind::SingleLabel, 3);
        assert!(matches!(
            train_domain(&mut m, 0, &empty, Strategy::Adil, &p.train),
            Err(DilError::Data(_))
        ));
    }

    #[test]
    fn single_domain_protocol_has_one_cell() {
        let data = [domain(0, "a", 1.0)];
        let out = run_protocol_on::<f32>(&plan(Strategy::Adil), &data, |_, _| Ok(())).unwrap();
        assert_eq!(out.report.steps.len(), 1);
        assert_eq!(out.report.steps[0].forgetting, None);
        let agn = out.report.steps[0].agnostic.as_ref().unwrap();
        assert_eq!(agn.scores, out.report.steps[0].scores);
    }

    #[test]
    fn every_strategy_runs_two_steps() {
        let data = [domain(0, "a", 1.0), domain(1, "b", 2.0)];
        for s in Strategy::ALL {
            let out = run_protocol_on::<f32>(&plan(s), &data, |_, _| Ok(())).unwrap();
            assert_eq!(out.report.steps.len(), 2, "{s}");
            assert_eq!(out.logs.len(), 2);
            if s.is_frozen_family() {
                assert_eq!(out.report.steps[1].forgetting, Some(0.0), "{s}");
            }
        }
    }

    #[test]
    fn base_head_strategies_need_base_classes() {
        let mut data = vec![domain(0, "a", 1.0), domain(1, "b", 2.0)];
        let mut p = plan(Strategy::Bn);
        p.vocabulary.push("extra".into());
        data[1].spec.class_list[2] = "extra".into();
        let err = run_protocol_on::<f32>(&p, &data, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, DilError::Config(_)), "{err}");
        p.strategy = Strategy::Adil;
        run_protocol_on::<f32>(&p, &data, |_, _| Ok(())).unwrap();
    }
}
