mod common;

use common::{centroids, nearest_centroid_accuracy};
use dil_core::config::GenerateConfig;

#[test]
fn default_domains_are_separable_and_shifted() {
    for seed in 0..5 {
        let cfg = GenerateConfig {
            seed,
            ..GenerateConfig::default()
        };
        let domains = cfg.generate().unwrap();
        for a in &domains {
            let c = centroids(&a.train);
            let within = nearest_centroid_accuracy(&c, &a.test);
            println!("seed {seed} {}: within {within:.3}", a.spec.name);
            assert!(
                within >= 0.99,
                "seed {seed} {} within-domain {within}",
                a.spec.name
            );
            for b in domains.iter().filter(|b| b.spec.name != a.spec.name) {
                let cross = nearest_centroid_accuracy(&c, &b.test);
                println!(
                    "seed {seed} {} -> {}: cross {cross:.3}",
                    a.spec.name, b.spec.name
                );
                assert!(
                    cross <= 0.80,
                    "seed {seed} {} -> {} cross {cross}",
                    a.spec.name,
                    b.spec.name
                );
            }
        }
    }
}
