//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use dil_core::data::Dataset;

/// Per-class mean feature vectors of a single-label dataset.
pub fn centroids(ds: &Dataset) -> Vec<Vec<f64>> {
    let d = ds.sample_len();
    let mut sums = vec![vec![0.0; d]; ds.n_classes];
    let mut counts = vec![0usize; ds.n_classes];
    for i in 0..ds.len() {
        let c = ds.labels(i)[0];
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(ds.sample(i)) {
            *s += x as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        assert!(n > 0, "every class needs a training sample");
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

/// Accuracy of assigning each sample of `test` to the nearest centroid.
pub fn nearest_centroid_accuracy(centroids: &[Vec<f64>], test: &Dataset) -> f64 {
    let mut hits = 0;
    for i in 0..test.len() {
        let x = test.sample(i);
        let dist =
            |c: &Vec<f64>| -> f64 { c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
        let best = (0..centroids.len())
            .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
            .unwrap();
        if best == test.labels(i)[0] {
            hits += 1;
        }
    }
    hits as f64 / test.len() as f64
}
