//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs without the libtest harness so the
//! lines are always shown.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use common::grad::all_cases;
use common::{centroids, nearest_centroid_accuracy};
use dil_core::checkpoint;
use dil_core::config::GenerateConfig;
use dil_core::inference::{choose_per_sample, AgnosticOptions};
use dil_core::metrics::{forgetting, lwlrap, MetricsReport};
use dil_core::model::{DilModel, DomainSpec, TaskKind};
use dil_core::strategy::Strategy;
use dil_core::tensor::Tensor;
use dil_core::trainer::{run_protocol_on, DomainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// One protocol run with the digests of every tensor after each step.
struct Run {
    report: MetricsReport,
    digests: Vec<BTreeMap<String, [u8; 32]>>,
    models: Vec<DilModel>,
    elapsed: Duration,
}

fn run(gen: &GenerateConfig, strategy: Strategy, seed: u64, data: &[DomainData]) -> Run {
    let mut cfg = gen.protocol();
    cfg.strategy = strategy.name().into();
    cfg.train.seed = seed;
    let (plan, _) = cfg.plan().unwrap();
    let mut digests = Vec::new();
    let mut models = Vec::new();
    let start = Instant::now();
    let out = run_protocol_on::<f32>(&plan, data, |_, m| {
        digests.push(m.digests());
        models.push(m.clone());
        Ok(())
    })
    .unwrap();
    Run {
        report: out.report,
        digests,
        models,
        elapsed: start.elapsed(),
    }
}

fn with_seed(base: &GenerateConfig, seed: u64) -> GenerateConfig {
    GenerateConfig {
        seed,
        ..base.clone()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Largest nearest-centroid accuracy of one domain's centroids on another
/// domain's test split.
fn max_cross_domain(data: &[DomainData]) -> f64 {
    let mut worst = 0.0f64;
    for a in data {
        let c = centroids(&a.train);
        for b in data.iter().filter(|b| b.spec.name != a.spec.name) {
            worst = worst.max(nearest_centroid_accuracy(&c, &b.test));
        }
    }
    worst
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = all_cases();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| c.name.as_str())
        .collect();
    let worst = cases
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let checked: usize = cases.iter().map(|c| c.report.checked).sum();
    outcome(
        cases.len() >= 100 && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} cases, {checked} coordinates, worst rel err {worst:.1e}, failed {failed:?}, {:.1}s",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    )
}

const FROZEN: [Strategy; 5] = [
    Strategy::Adil,
    Strategy::Bn,
    Strategy::BnClf,
    Strategy::Clf,
    Strategy::BnStats,
];

fn zero_forgetting(runs: &HashMap<(Strategy, u64), Run>) -> Outcome {
    let mut bad = Vec::new();
    for s in FROZEN {
        for seed in 0..SEEDS {
            let r = &runs[&(s, seed)];
            for step in &r.report.steps[1..] {
                if step.forgetting != Some(0.0) {
                    bad.push(format!(
                        "{} seed {seed} step {} Fr {:?}",
                        s.name(),
                        step.step,
                        step.forgetting
                    ));
                }
            }
            for (t, pair) in r.digests.windows(2).enumerate() {
                let changed: Vec<&String> = pair[0]
                    .iter()
                    .filter(|(name, d)| pair[1].get(*name) != Some(*d))
                    .map(|(name, _)| name)
                    .collect();
                if !changed.is_empty() {
                    bad.push(format!(
                        "{} seed {seed} step {}: {changed:?} changed",
                        s.name(),
                        t + 2
                    ));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("Fr == 0 and earlier tensors bit-identical at every step, 5 strategies x {SEEDS} seeds")
        } else {
            bad.join("; ")
        },
    )
}

fn catastrophic_forgetting(runs: &HashMap<(Strategy, u64), Run>, cross: f64) -> Outcome {
    let fr = mean((0..SEEDS).map(|s| {
        runs[&(Strategy::Ft, s)]
            .report
            .final_step()
            .forgetting
            .unwrap()
    }));
    outcome(
        cross <= 0.80 && fr >= 5.0,
        format!("ft final Fr {fr:.2} (mean of {SEEDS} seeds), max cross-domain centroid accuracy {cross:.3}"),
    )
}

fn plasticity(runs: &HashMap<(Strategy, u64), Run>) -> Outcome {
    let avg =
        |s: Strategy| mean((0..SEEDS).map(|seed| runs[&(s, seed)].report.final_step().average));
    let cur = |s: Strategy| {
        mean((0..SEEDS).map(|seed| *runs[&(s, seed)].report.final_step().scores.last().unwrap()))
    };
    let [stats, clf, bn, bn_clf, adil] = [
        Strategy::BnStats,
        Strategy::Clf,
        Strategy::Bn,
        Strategy::BnClf,
        Strategy::Adil,
    ]
    .map(avg);
    let (adil_cur, single_cur) = (cur(Strategy::Adil), cur(Strategy::Single));
    let ordered = stats < clf && clf < bn && bn <= bn_clf && bn_clf <= adil + 1e-9;
    outcome(
        ordered && (adil_cur - single_cur).abs() <= 2.0,
        format!(
            "bn_stats {stats:.2} < clf {clf:.2} < bn {bn:.2} <= bn_clf {bn_clf:.2} <= adil {adil:.2}; \
             current domain adil {adil_cur:.2} vs single {single_cur:.2}"
        ),
    )
}

fn forgetting_formula() -> Outcome {
    let rows = vec![vec![49.7], vec![34.1, 60.0]];
    let fr = forgetting(&rows, 2).unwrap();
    outcome((fr - 15.6).abs() <= 1e-12, format!("Fr = {fr}"))
}

/// Average over positive (sample, class) pairs of the share of positives
/// among the classes scoring at least as high.
fn brute_force_lwlrap(scores: &[f64], labels: &[bool], n: usize) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0;
    for (row, truth) in scores.chunks(n).zip(labels.chunks(n)) {
        for c in (0..n).filter(|&c| truth[c]) {
            let above: Vec<usize> = (0..n).filter(|&k| row[k] >= row[c]).collect();
            let hits = above.iter().filter(|&&k| truth[k]).count();
            sum += hits as f64 / above.len() as f64;
            pairs += 1;
        }
    }
    sum / pairs as f64
}

fn lwlrap_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (samples, n) = (rng.random_range(1..12), rng.random_range(2..10));
        let scores: Vec<f64> = (0..samples * n).map(|_| rng.random::<f64>()).collect();
        let mut labels: Vec<bool> = (0..samples * n).map(|_| rng.random_bool(0.3)).collect();
        labels[rng.random_range(0..samples * n)] = true;
        let got = lwlrap(&scores, &labels, n).unwrap();
        worst = worst.max((got - brute_force_lwlrap(&scores, &labels, n)).abs());
    }
    let perfect = lwlrap(
        &[0.9, 0.8, 0.1, 0.2, 0.7, 0.6],
        &[true, true, false, false, true, true],
        3,
    )
    .unwrap();
    outcome(
        worst <= 1e-9 && perfect == 1.0,
        format!("200 cases, max |diff| {worst:.1e}, perfect ranking {perfect}"),
    )
}

fn entropy_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut misses = 0;
    for _ in 0..200 {
        let banks = rng.random_range(2..6);
        let confident = rng.random_range(0..banks);
        let kind = if rng.random_bool(0.5) {
            TaskKind::SingleLabel
        } else {
            TaskKind::MultiLabel
        };
        let candidates: Vec<(usize, TaskKind, Vec<Vec<f64>>)> = (0..banks)
            .map(|b| {
                let c = rng.random_range(2..8);
                let p = if b == confident {
                    let hot = rng.random_range(0..c);
                    (0..c).map(|k| if k == hot { 1.0 } else { 0.0 }).collect()
                } else if kind == TaskKind::SingleLabel {
                    vec![1.0 / c as f64; c]
                } else {
                    vec![0.5; c]
                };
                (b, kind, vec![p])
            })
            .collect();
        for normalize in [false, true] {
            let opts = AgnosticOptions {
                normalize_by_classes: normalize,
            };
            if choose_per_sample(&candidates, opts).unwrap()[0].chosen_bank != confident {
                misses += 1;
            }
        }
    }

    let gen = GenerateConfig::from_toml(include_str!("../../../configs/generate_class_shift.toml"))
        .unwrap();
    let mut sel = Vec::new();
    let mut cross = 0.0f64;
    let mut order_ok = true;
    for seed in 0..SEEDS {
        let g = with_seed(&gen, seed);
        let data = g.generate().unwrap();
        cross = cross.max(max_cross_domain(&data));
        let r = run(&g, Strategy::Adil, seed, &data);
        let last = r.report.final_step();
        let agn = last.agnostic.as_ref().expect("agnostic evaluation enabled");
        sel.push(agn.selection_accuracy);
        order_ok &= agn.average <= last.average;
    }
    let mean_sel = mean(sel.iter().copied());
    outcome(
        misses == 0 && mean_sel >= 0.90 && order_ok && cross <= 0.80,
        format!(
            "one-hot picked in {}/400; class-shift data (max cross {cross:.2}): selection {mean_sel:.3} \
             (per seed {sel:.3?}), agnostic <= aware on every seed: {order_ok}",
            400 - misses
        ),
    )
}

fn residual_identity(base: &DilModel) -> Outcome {
    let mut m = base.clone();
    let classes: Vec<String> = ["class_07", "class_02", "class_09", "class_00"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let id = m
        .add_domain(DomainSpec {
            domain_id: 1,
            name: "probe".into(),
            class_list: classes,
            task_kind: TaskKind::SingleLabel,
        })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (f, t) = (m.arch.mel_bins, m.arch.frames);
    let x = Tensor::from_fn(vec![16, 1, f, t], |_| rng.random_range(-3.0f32..3.0));
    let new = m.forward(id, &x).unwrap();
    let old = m.forward(0, &x).unwrap();
    let map = &m.banks[id].class_map;
    let (k, c0) = (map.len(), old.shape()[1]);
    let mut same = true;
    let mut argmax_same = true;
    for s in 0..16 {
        let row = &new.data()[s * k..(s + 1) * k];
        let base_row = &old.data()[s * c0..(s + 1) * c0];
        let restricted: Vec<f32> = map.iter().map(|c| base_row[c.unwrap()]).collect();
        same &= row
            .iter()
            .zip(&restricted)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let am = |v: &[f32]| {
            (0..v.len())
                .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
                .unwrap()
        };
        argmax_same &= am(row) == am(&restricted);
    }
    outcome(
        same && argmax_same,
        format!("16 samples, 4 mapped classes: logits bit-identical {same}, predictions identical {argmax_same}"),
    )
}

fn determinism(first: &Run, gen: &GenerateConfig, data: &[DomainData]) -> Outcome {
    let again = run(gen, Strategy::Adil, 0, data);
    let reports = first.report.to_json() == again.report.to_json();
    let model = first.models.last().unwrap();
    let bytes = checkpoint::to_bytes(model).unwrap();
    let back: DilModel = checkpoint::from_bytes(&bytes).unwrap();
    let round = checkpoint::to_bytes(&back).unwrap() == bytes;
    let models = checkpoint::to_bytes(again.models.last().unwrap()).unwrap() == bytes;
    outcome(
        reports && round && models,
        format!("report bytes equal {reports}, rerun checkpoint equal {models}, save-load-save equal {round}"),
    )
}

fn runtime(first: &Run, gen: &GenerateConfig) -> Outcome {
    let p = gen.protocol();
    let secs = first.elapsed.as_secs_f64();
    outcome(
        secs < 600.0
            && p.arch.channels.len() == 3
            && p.train.epochs == 20
            && p.train.batch_size == 32,
        format!(
            "adil, 3 domains, {} blocks, {} epochs, batch {}: {secs:.1}s",
            p.arch.channels.len(),
            p.train.epochs,
            p.train.batch_size
        ),
    )
}

fn main() {
    let gen = GenerateConfig::default();
    let strategies = [
        Strategy::BnStats,
        Strategy::Clf,
        Strategy::Bn,
        Strategy::BnClf,
        Strategy::Adil,
        Strategy::Single,
        Strategy::Ft,
    ];
    let mut runs = HashMap::new();
    let mut cross = 0.0f64;
    let mut seed0 = Vec::new();
    for seed in 0..SEEDS {
        let g = with_seed(&gen, seed);
        let data = g.generate().unwrap();
        cross = cross.max(max_cross_domain(&data));
        for s in strategies {
            runs.insert((s, seed), run(&g, s, seed, &data));
        }
        if seed == 0 {
            seed0 = data;
        }
    }
    let adil0 = &runs[&(Strategy::Adil, 0)];

    let results = [
        ("1 gradient correctness", gradients()),
        ("2 zero forgetting by construction", zero_forgetting(&runs)),
        (
            "3 catastrophic forgetting under fine-tuning",
            catastrophic_forgetting(&runs, cross),
        ),
        ("4 plasticity ordering", plasticity(&runs)),
        ("5 forgetting formula", forgetting_formula()),
        ("6 lwlrap oracle equivalence", lwlrap_oracle()),
        ("7 entropy bank selection", entropy_selection()),
        (
            "8 residual head identity",
            residual_identity(&adil0.models[0]),
        ),
        (
            "9 determinism and persistence",
            determinism(adil0, &gen, &seed0),
        ),
        ("10 runtime budget", runtime(adil0, &gen)),
    ];
    for (name, o) in &results {
        println!(
            "{} criterion {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
