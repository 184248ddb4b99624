use dpcore::adapt::OptimConfig;
use dpcore::simplified::*;

/// Half the instances fit the exhaustive budget, half use sampled orders.
fn instances() -> Vec<SeparatedInstance> {
    (0..60u64)
        .map(|seed| {
            let k = 2 + (seed % 3) as usize;
            let n = if seed % 2 == 0 { k + (seed as usize / 2) % (8 - k) } else { 9 + (seed as usize % 4) };
            random_separated_instance(k, n, 3, seed).unwrap()
        })
        .collect()
}

#[test]
fn harmonic_runs_are_correct_and_order_free() {
    let mut exhaustive = 0;
    for (seed, inst) in instances().iter().enumerate() {
        let cfg = SimplifiedConfig::harmonic(inst.theta);
        assert!(check_prop1(&inst.batch_means, &inst.truth, &cfg).unwrap(), "seed {seed}");
        let r = order_report(&inst.batch_means, &inst.truth, &cfg, None, seed as u64).unwrap();
        assert!(r.holds(true), "seed {seed}: {r:?}");
        if inst.batch_means.len() <= EXHAUSTIVE_LIMIT {
            let n = inst.batch_means.len();
            assert_eq!(r.permutations, (1..=n).product::<usize>());
            exhaustive += 1;
        } else {
            assert_eq!(r.permutations, SAMPLED_PERMUTATIONS);
        }
    }
    assert!(exhaustive >= 20);
}

#[test]
fn cluster_count_matches_truth_for_every_order() {
    let inst = random_separated_instance(3, 6, 2, 42).unwrap();
    let cfg = SimplifiedConfig::harmonic(inst.theta);
    for order in all_permutations(6) {
        let means: Vec<Vec<f64>> = order.iter().map(|&i| inst.batch_means[i].clone()).collect();
        assert_eq!(run_simplified(&means, &cfg).unwrap().num_clusters(), 3);
    }
}

#[test]
fn scratch_prompts_from_cluster_means_are_order_free() {
    let learner = MeanShiftLearner { source_mean: vec![0.5, -0.5, 0.0], optim: OptimConfig { lr: 0.1, ..OptimConfig::default() } };
    for seed in 0..5 {
        let inst = random_separated_instance(2, 7, 3, 100 + seed).unwrap();
        let cfg = SimplifiedConfig::harmonic(inst.theta);
        let r = order_report(&inst.batch_means, &inst.truth, &cfg, Some(&learner), seed).unwrap();
        assert!(r.max_prompt_diff < 1e-9, "{r:?}");
    }
}

#[test]
fn theta_below_diameter_is_rejected() {
    let inst = random_separated_instance(2, 6, 3, 7).unwrap();
    let cfg = SimplifiedConfig::harmonic(1e-6);
    assert!(matches!(check_prop1(&inst.batch_means, &inst.truth, &cfg), Err(dpcore::Error::Precondition(_))));
}
