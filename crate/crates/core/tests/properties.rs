//! Algebraic properties of the numeric building blocks.

use dil_core::inference::entropy_uncertainty;
use dil_core::metrics::{forgetting, lwlrap};
use dil_core::model::TaskKind;
use dil_core::optim::{adam_step, cosine_lr, AdamState};
use dil_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * 1f64.max(x.abs()))
}

fn conv(x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(&Tensor::new(vec![1, 2, 4, 4], x.to_vec()).unwrap());
    let kv = tape.constant(&Tensor::new(vec![3, 2, 3, 3], k.to_vec()).unwrap());
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    tape.value(y).to_vec()
}

fn ce(z: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape
        .constant(&Tensor::new(vec![labels.len(), z.len() / labels.len()], z.to_vec()).unwrap());
    let l = tape.cross_entropy(v, labels).unwrap();
    tape.value(l)[0]
}

fn bce(z: &[f64], t: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&Tensor::new(vec![1, z.len()], z.to_vec()).unwrap());
    let l = tape.binary_cross_entropy(v, t).unwrap();
    tape.value(l)[0]
}

proptest! {
    #[test]
    fn conv_is_linear_in_the_input(x in vals(32), y in vals(32), k in vals(54), a in -2.0f64..2.0) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let expect: Vec<f64> = conv(&x, &k).iter().zip(conv(&y, &k)).map(|(p, q)| a * p + q).collect();
        prop_assert!(close(&conv(&mix, &k), &expect, 1e-10));
    }

    #[test]
    fn cross_entropy_ignores_a_per_row_shift(z in vals(8), shift in -20.0f64..20.0, l0 in 0usize..4, l1 in 0usize..4) {
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        prop_assert!((ce(&z, &[l0, l1]) - ce(&shifted, &[l0, l1])).abs() < 1e-10);
    }

    #[test]
    fn binary_cross_entropy_is_symmetric(z in vals(6), bits in prop::collection::vec(0u8..2, 6)) {
        let t: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        let flip: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        prop_assert!((bce(&z, &t) - bce(&neg, &flip)).abs() < 1e-12);
    }

    #[test]
    fn lwlrap_depends_only_on_ranks(
        raw in prop::collection::vec(0u8..6, 20),
        bits in prop::collection::vec(any::<bool>(), 20),
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let mut labels = bits.clone();
        labels[0] = true;
        let warped: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() * 3.0 - 1.0).collect();
        let a = lwlrap(&scores, &labels, 5).unwrap();
        let b = lwlrap(&warped, &labels, 5).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn entropy_ignores_class_order(raw in prop::collection::vec(0.01f64..1.0, 2..8), rot in 0usize..8) {
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut q = p.clone();
        let r = rot % q.len();
        q.rotate_left(r);
        q.reverse();
        for kind in [TaskKind::SingleLabel, TaskKind::MultiLabel] {
            let a = entropy_uncertainty(&p, kind).unwrap();
            let b = entropy_uncertainty(&q, kind).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forgetting_ignores_a_constant_shift(m in vals(9), c in -50.0f64..50.0) {
        let rows: Vec<Vec<f64>> = (0..3).map(|s| m[3 * s..3 * s + s + 1].to_vec()).collect();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        for t in 2..=3 {
            let a = forgetting(&rows, t).unwrap();
            let b = forgetting(&shifted, t).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1usize..60, lr in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let eta_min = lr * frac;
        let mut prev = f64::INFINITY;
        for e in 0..=total {
            let v = cosine_lr(e, total, lr, eta_min).unwrap();
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v >= eta_min - 1e-15 && v <= lr + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn adam_is_odd_in_the_gradient(g in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..5)) {
        let mut p = Tensor::<f64>::zeros(vec![4]);
        let mut q = Tensor::<f64>::zeros(vec![4]);
        let (mut sp, mut sq) = (AdamState::new(0.9, 0.999, 1e-8), AdamState::new(0.9, 0.999, 1e-8));
        for step in &g {
            let neg: Vec<f64> = step.iter().map(|v| -v).collect();
            adam_step(&mut [&mut p], &[step.as_slice()], &mut sp, 1e-2).unwrap();
            adam_step(&mut [&mut q], &[neg.as_slice()], &mut sq, 1e-2).unwrap();
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert_eq!(*a, -*b);
        }
    }
}
