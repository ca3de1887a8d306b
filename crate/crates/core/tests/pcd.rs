mod common;

use acan::losses::SigmaPolicy;
use acan::seed::rng_for;
use common::PcdInstance;
use proptest::prelude::*;

#[test]
fn matches_triple_loop_on_random_instances() {
    let mut rng = rng_for(11, "tests/pcd", 0);
    for case in 0..200 {
        let inst = PcdInstance::random(&mut rng);
        let (value, sigma) = inst.evaluate(SigmaPolicy::Median);
        let expected_sigma = inst.oracle_median_sigma();
        assert!(
            (sigma - expected_sigma).abs() <= 1e-12 * expected_sigma.max(1.0),
            "case {case}: σ {sigma} vs {expected_sigma}"
        );
        let expected = inst.oracle(expected_sigma);
        assert!(
            (value - expected).abs() <= 1e-12,
            "case {case}: {value} vs {expected}"
        );

        let (fixed, _) = inst.evaluate(SigmaPolicy::Fixed(0.3));
        assert!(
            (fixed - inst.oracle(0.3)).abs() <= 1e-12,
            "case {case} fixed σ"
        );
    }
}

#[test]
fn matched_samples_give_zero() {
    let mut rng = rng_for(12, "tests/pcd", 0);
    for _ in 0..50 {
        let inst = PcdInstance::matched(&mut rng);
        let (value, _) = inst.evaluate(SigmaPolicy::Median);
        assert!(value.abs() <= 1e-12, "{value}");
    }
}

#[test]
fn no_jointly_active_class_gives_zero() {
    let mut rng = rng_for(13, "tests/pcd", 0);
    let mut inst = PcdInstance::random(&mut rng);
    inst.classes = 2;
    inst.labels = vec![0; inst.source.len()];
    inst.pseudo = vec![vec![0.0, 1.0]; inst.target.len()];
    assert_eq!(inst.evaluate(SigmaPolicy::Median).0, 0.0);
}

fn hard_instance(seed: u64) -> PcdInstance {
    let mut rng = rng_for(seed, "tests/pcd/hard", 0);
    let mut inst = PcdInstance::random(&mut rng);
    inst.pseudo = inst
        .pseudo
        .iter()
        .map(|p| {
            let best = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            (0..p.len())
                .map(|c| if c == best { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    inst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn never_negative(seed in any::<u64>(), sigma in 0.05f64..5.0) {
        let mut rng = rng_for(seed, "tests/pcd/prop", 0);
        let inst = PcdInstance::random(&mut rng);
        prop_assert!(inst.evaluate(SigmaPolicy::Fixed(sigma)).0 >= -1e-12);
        prop_assert!(inst.evaluate(SigmaPolicy::Median).0 >= -1e-12);
    }

    #[test]
    fn symmetric_under_swapping_domains(seed in any::<u64>()) {
        let inst = hard_instance(seed);
        let swapped = PcdInstance {
            classes: inst.classes,
            source: inst.target.clone(),
            labels: inst.pseudo.iter().map(|p| p.iter().position(|&v| v == 1.0).unwrap()).collect(),
            target: inst.source.clone(),
            pseudo: inst
                .labels
                .iter()
                .map(|&l| (0..inst.classes).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        let (a, _) = inst.evaluate(SigmaPolicy::Median);
        let (b, _) = swapped.evaluate(SigmaPolicy::Median);
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }
}
