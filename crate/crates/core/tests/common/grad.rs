//! Seeded gradient-check cases over every differentiable op.

use dil_core::tensor::{gradient_check, BnMode, GradCheckReport, Tape, Tensor, Var};
use dil_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub struct Case {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, grad: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_requires_grad(grad)
}

/// Contracts `out` with a fixed random weight so every output coordinate
/// contributes a distinct slope.
fn project(tape: &mut Tape<f64>, out: Var, weight: Var) -> Result<Var> {
    let prod = tape.mul(out, weight)?;
    tape.sum(prod)
}

fn check(
    name: String,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Case {
    let report = gradient_check(inputs, build, EPS, TOL).expect("graph builds");
    Case { name, report }
}

fn conv_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, o) = (
        rng.random_range(1..3),
        rng.random_range(1..3),
        rng.random_range(1..4),
    );
    let k = [1, 3][rng.random_range(0..2)];
    let (h, w) = (rng.random_range(k..k + 3), rng.random_range(k..k + 3));
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..k.min(2));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let inputs = [
        random(vec![n, c, h, w], &mut rng, true),
        random(vec![o, c, k, k], &mut rng, true),
        random(vec![n, o, ho, wo], &mut rng, false),
    ];
    check(format!("conv2d#{seed}"), &inputs, move |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad)?;
        project(t, y, v[2])
    })
}

fn bn_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(2..4), rng.random_range(1..4));
    let spatial = rng.random_bool(0.5);
    let shape = if spatial {
        vec![n, c, rng.random_range(1..4), rng.random_range(1..4)]
    } else {
        vec![n, c]
    };
    let inputs = [
        random(shape.clone(), &mut rng, true),
        random(vec![c], &mut rng, true),
        random(vec![c], &mut rng, true),
        random(shape, &mut rng, false),
    ];
    check(format!("batch_norm#{seed}"), &inputs, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
        project(t, y, v[3])
    })
}

fn linear_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..5),
    );
    let inputs = [
        random(vec![n, i], &mut rng, true),
        random(vec![o, i], &mut rng, true),
        random(vec![o], &mut rng, true),
        random(vec![n, o], &mut rng, false),
    ];
    check(format!("linear#{seed}"), &inputs, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, v[3])
    })
}

fn relu_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![rng.random_range(1..3), rng.random_range(1..3), 3, 3];
    let inputs = [
        random(shape.clone(), &mut rng, true),
        random(shape, &mut rng, false),
    ];
    check(format!("relu#{seed}"), &inputs, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, v[1])
    })
}

fn pool_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..3), rng.random_range(1..4));
    let inputs = [
        random(
            vec![n, c, rng.random_range(1..5), rng.random_range(1..5)],
            &mut rng,
            true,
        ),
        random(vec![n, c], &mut rng, false),
    ];
    check(format!("global_pool#{seed}"), &inputs, |t, v| {
        let y = t.global_pool(v[0])?;
        project(t, y, v[1])
    })
}

fn ce_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..5), rng.random_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut logits = random(vec![n, c], &mut rng, true);
    logits.data_mut().iter_mut().for_each(|z| *z *= 3.0);
    check(format!("cross_entropy#{seed}"), &[logits], move |t, v| {
        t.cross_entropy(v[0], &labels)
    })
}

fn bce_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..5), rng.random_range(1..6));
    let targets: Vec<f64> = (0..n * c).map(|_| rng.random_range(0..2) as f64).collect();
    let mut logits = random(vec![n, c], &mut rng, true);
    logits.data_mut().iter_mut().for_each(|z| *z *= 4.0);
    check(
        format!("binary_cross_entropy#{seed}"),
        &[logits],
        move |t, v| t.binary_cross_entropy(v[0], &targets),
    )
}

/// conv → batch norm → ReLU → pool → linear → loss, the model's block shape.
fn chain_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, o, classes) = (3, 2, 3, 4);
    let multi = seed % 2 == 1;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let targets: Vec<f64> = (0..n * classes)
        .map(|_| rng.random_range(0..2) as f64)
        .collect();
    let inputs = [
        random(vec![n, c, 4, 4], &mut rng, true),
        random(vec![o, c, 3, 3], &mut rng, true),
        random(vec![o], &mut rng, true),
        random(vec![o], &mut rng, true),
        random(vec![classes, o], &mut rng, true),
        random(vec![classes], &mut rng, true),
    ];
    check(format!("chain#{seed}"), &inputs, move |t, v| {
        let x = t.conv2d(v[0], v[1], 1, 1)?;
        let (x, _) = t.batch_norm(x, v[2], v[3], BnMode::Train { eps: 1e-5 })?;
        let x = t.relu(x)?;
        let x = t.avg_pool2d(x, 2)?;
        let x = t.global_pool(x)?;
        let z = t.linear(x, v[4], v[5])?;
        if multi {
            t.binary_cross_entropy(z, &targets)
        } else {
            t.cross_entropy(z, &labels)
        }
    })
}

/// Every seeded case: 15 per op plus 20 end-to-end chains.
pub fn all_cases() -> Vec<Case> {
    let ops: [fn(u64) -> Case; 7] = [
        conv_case,
        bn_case,
        linear_case,
        relu_case,
        pool_case,
        ce_case,
        bce_case,
    ];
    let mut out = Vec::new();
    for (k, op) in ops.iter().enumerate() {
        for s in 0..15 {
            out.push(op(1000 * k as u64 + s));
        }
    }
    for s in 0..20 {
        out.push(chain_case(9000 + s));
    }
    out
}
