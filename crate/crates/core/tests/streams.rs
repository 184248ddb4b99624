use dpcore::streams::*;
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = StreamKind> {
    prop_oneof![
        Just(StreamKind::Csc { order: None }),
        (1e-4..100.0f64, prop::option::of(1usize..12))
            .prop_map(|(delta, num_slots)| StreamKind::CdcDirichlet { delta, num_slots }),
        prop::option::of(1usize..8).prop_map(|max_run| StreamKind::Cdc2d { domain_probs: None, max_run }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_generator_conserves_pools(
        counts in prop::collection::vec(0usize..12, 1..7),
        kind in kind_strategy(),
        seed in any::<u64>(),
    ) {
        let spec = StreamSpec { batches_per_domain: counts.clone(), kind, seed };
        let stream = generate(&spec).unwrap();
        prop_assert!(is_conserving(&spec, &stream));
        prop_assert_eq!(stream.len(), counts.iter().sum::<usize>());
        prop_assert_eq!(&generate(&spec).unwrap(), &stream);
    }

    #[test]
    fn csc_is_one_run_per_domain(counts in prop::collection::vec(1usize..6, 1..8)) {
        let spec = StreamSpec { batches_per_domain: counts.clone(), kind: StreamKind::Csc { order: None }, seed: 0 };
        let diag = stream_diagnostics(&generate(&spec).unwrap());
        prop_assert_eq!(diag.switch_count, counts.len() - 1);
        prop_assert_eq!(diag.run_length_histogram.values().sum::<usize>(), counts.len());
    }

    #[test]
    fn pools_are_drawn_in_id_order(seed in any::<u64>(), max_run in 1usize..5) {
        let spec = StreamSpec::uniform(3, 10, StreamKind::Cdc2d { domain_probs: None, max_run: Some(max_run) }, seed);
        let stream = generate(&spec).unwrap();
        let mut last = [None::<usize>; 3];
        for e in &stream.entries {
            prop_assert_eq!(e.batch_id, last[e.domain].map_or(0, |v| v + 1));
            last[e.domain] = Some(e.batch_id);
        }
    }
}

fn mean_switches(delta: f64, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let spec = StreamSpec::uniform(15, 20, StreamKind::CdcDirichlet { delta, num_slots: None }, seed);
            stream_diagnostics(&generate(&spec).unwrap()).switch_count as f64
        })
        .sum::<f64>()
        / seeds as f64
}

#[test]
fn switches_grow_with_delta() {
    let means: Vec<f64> = [0.01, 0.1, 1.0, 10.0].iter().map(|&d| mean_switches(d, 50)).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn tiny_delta_is_structured() {
    let mut dominated = 0usize;
    let mut total = 0usize;
    for seed in 0..100 {
        let spec = StreamSpec::uniform(2, 20, StreamKind::CdcDirichlet { delta: 1e-6, num_slots: None }, seed);
        for slot in dirichlet_slots(&spec).unwrap() {
            let zeros = slot.iter().filter(|e| e.domain == 0).count();
            let top = zeros.max(slot.len() - zeros);
            dominated += usize::from(top as f64 >= 0.95 * slot.len() as f64);
            total += 1;
        }
    }
    assert!(dominated as f64 / total as f64 > 0.9, "{dominated}/{total}");
}

#[test]
fn cdc_2d_first_picks_follow_probs() {
    let probs = vec![0.5, 0.3, 0.2];
    let mut counts = [0usize; 3];
    let n = 1000;
    for seed in 0..n {
        let spec = StreamSpec::uniform(3, 5, StreamKind::Cdc2d { domain_probs: Some(probs.clone()), max_run: None }, seed);
        counts[generate(&spec).unwrap().entries[0].domain] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 0.999 quantile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
}
