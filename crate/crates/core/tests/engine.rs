use dpcore::adapt::{AdaptState, ComputeCounters, GateMode, OptimConfig, Path, Policy, run_policy};
use dpcore::coreset::CoresetConfig;
use dpcore::extractor::{ExtractorSpec, InputBatch};
use dpcore::stats::compute_stats;
use dpcore::streams::{generate, random_orders, StreamKind, StreamSpec};
use dpcore::testbed::{realize_stream, sample_domain_batch, LabeledBatch, Testbed, TestbedConfig, DEFAULT_N_REF};

fn testbed() -> Testbed {
    Testbed::build(&TestbedConfig::default(), DEFAULT_N_REF).unwrap()
}

fn state(tb: &Testbed, seed: u64) -> AdaptState {
    tb.state(CoresetConfig::default(), OptimConfig::default(), 8, seed).unwrap()
}

fn csc(tb: &Testbed, per_domain: usize, seed: u64) -> Vec<LabeledBatch> {
    let m = tb.model.num_domains();
    let order = random_orders(m, 1, seed).remove(0);
    let spec = StreamSpec::uniform(m, per_domain, StreamKind::Csc { order: Some(order) }, seed);
    realize_stream(&tb.model, &generate(&spec).unwrap(), 64, seed).unwrap()
}

#[test]
fn first_batch_scratch_then_repeat_refines() {
    let tb = testbed();
    let mut st = state(&tb, 0);
    let b = sample_domain_batch(&tb.model, 3, 64, 1).unwrap();
    let first = st.dpcore_step(&b.input).unwrap().decision;
    assert_eq!(first.path, Path::Scratch);
    assert_eq!(first.coreset_size, 1);
    assert_eq!((first.cost.backward, first.cost.forward), (50, 52));

    let again = st.dpcore_step(&b.input).unwrap().decision;
    assert_eq!(again.path, Path::Refine);
    assert_eq!(again.coreset_size, 1);
    assert!(again.ratio.unwrap() < 0.3, "{:?}", again.ratio);
    assert_eq!((again.cost.backward, again.cost.forward), (1, 3));
}

#[test]
fn far_domain_opens_new_element_even_at_rho_one() {
    let tb = testbed();
    let cfg = CoresetConfig { rho: 1.0, ..CoresetConfig::default() };
    let mut st = tb.state(cfg, OptimConfig::default(), 8, 0).unwrap();
    let g0 = (0..tb.model.num_domains()).find(|&d| tb.model.group_of(d) == 0).unwrap();
    let g1 = (0..tb.model.num_domains()).find(|&d| tb.model.group_of(d) == 1).unwrap();
    st.dpcore_step(&sample_domain_batch(&tb.model, g0, 64, 1).unwrap().input).unwrap();
    let d = st.dpcore_step(&sample_domain_batch(&tb.model, g1, 64, 2).unwrap().input).unwrap().decision;
    assert!(d.ratio.unwrap() > 1.0, "stored prompt should worsen alignment: {:?}", d.ratio);
    assert_eq!(d.path, Path::Scratch);
    assert_eq!(d.coreset_size, 2);
}

#[test]
fn scratch_prompt_lowers_distance() {
    let tb = testbed();
    let mut st = state(&tb, 4);
    let b = sample_domain_batch(&tb.model, 0, 64, 1).unwrap();
    let (_, trace) = st.learn_prompt_from_scratch(&b.input).unwrap();
    assert_eq!(trace.len(), 51);
    assert!(trace[50] < 0.5 * trace[0]);
    assert_eq!(st.counters().backward, 50);
}

#[test]
fn aligned_target_keeps_prompt_near_init() {
    let tb = testbed();
    let ex = ExtractorSpec::random_linear(16, 0.1, 7);
    let src = dpcore::testbed::sample_source(&tb.model, 300, 1).unwrap();
    let stats = compute_stats(&ex.extract(&src.input, None).unwrap()).unwrap();
    let mut st = AdaptState::new(ex, stats, CoresetConfig::default(), OptimConfig::default(), 8, 0).unwrap();
    let (p, trace) = st.learn_prompt_from_scratch(&src.input).unwrap();
    // Only the summed init tokens separate the batch from its own statistics.
    assert!(trace[0] < 0.5 && trace[50] <= trace[0], "{trace:?}");
    // 50 steps of at most ~lr per coordinate each.
    assert!(p.values().iter().all(|v| v.abs() < 0.02 * 5.0 + 50.0 * 0.01));
}

#[test]
fn accounting_identity_holds_on_real_runs() {
    let tb = testbed();
    let stream = csc(&tb, 4, 2);
    let report = run_policy(&Policy::DpCore, &stream, state(&tb, 2), &tb.classifier).unwrap();
    let s = &report.summary;
    assert_eq!(s.total_bp, (s.scratch_count * 50 + s.refine_count) as u64);
    assert_eq!(s.total_fp, s.total_bp + 2 * s.batches as u64);
    let replay = ComputeCounters::from_paths(report.records.iter().map(|r| &r.path), 50, 1);
    assert_eq!((replay.forward, replay.backward), (s.total_fp, s.total_bp));
}

#[test]
fn baseline_accounting() {
    let tb = testbed();
    let stream = csc(&tb, 1, 3);
    let src = run_policy(&Policy::SourceOnly, &stream, state(&tb, 3), &tb.classifier).unwrap();
    assert_eq!(src.summary.total_bp, 0);
    assert_eq!(src.summary.total_fp, stream.len() as u64);
    let pbs = run_policy(&Policy::PerBatchScratch, &stream, state(&tb, 3), &tb.classifier).unwrap();
    assert_eq!(pbs.summary.total_bp, 50 * stream.len() as u64);
    assert_eq!(pbs.summary.final_k, stream.len());
}

#[test]
fn runs_are_bit_identical() {
    let tb = testbed();
    let stream = csc(&tb, 3, 5);
    for policy in [Policy::DpCore, Policy::SinglePrompt, Policy::DpCoreB { buffer: 16 }] {
        let a = run_policy(&policy, &stream, state(&tb, 5), &tb.classifier).unwrap();
        let b = run_policy(&policy, &stream, state(&tb, 5), &tb.classifier).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }
}

#[test]
fn coreset_never_shrinks_without_a_cap() {
    let tb = testbed();
    let report = run_policy(&Policy::DpCore, &csc(&tb, 3, 8), state(&tb, 8), &tb.classifier).unwrap();
    let sizes: Vec<usize> = report.coreset_size_trace().into_iter().map(|(_, k)| k).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*sizes.last().unwrap(), report.summary.scratch_count);
}

#[test]
fn fixed_cap_is_respected() {
    let tb = testbed();
    let stream = csc(&tb, 2, 9);
    for overflow_policy in [dpcore::OverflowPolicy::DiscardOldest, dpcore::OverflowPolicy::MergeSimilar] {
        let report = run_policy(&Policy::DpCoreFixedK { max_size: 2, overflow_policy }, &stream, state(&tb, 9), &tb.classifier).unwrap();
        assert!(report.records.iter().all(|r| r.k <= 2));
        assert_eq!(report.coreset.unwrap().elements.len(), 2);
    }
}

#[test]
fn single_prompt_matches_refine_only_dpcore() {
    let tb = testbed();
    let stream = csc(&tb, 2, 6);
    let sp = run_policy(&Policy::SinglePrompt, &stream, state(&tb, 6), &tb.classifier).unwrap();
    let always = state(&tb, 6).with_gate_mode(GateMode::AlwaysRefine);
    let dp = run_policy(&Policy::DpCore, &stream, always, &tb.classifier).unwrap();
    assert_eq!(dp.summary.final_k, 1);
    for (a, b) in sp.records.iter().zip(&dp.records) {
        assert_eq!(a.path, b.path);
        assert_eq!(a.error, b.error);
        assert!((a.d_post - b.d_post).abs() < 1e-12);
        assert_eq!((a.fp, a.bp), (b.fp, b.bp));
    }
}

#[test]
fn labels_and_domains_do_not_leak_into_adaptation() {
    let tb = testbed();
    let stream = csc(&tb, 2, 10);
    let tainted: Vec<LabeledBatch> = stream
        .iter()
        .map(|b| {
            let mut labels = b.labels.clone();
            labels.reverse();
            let input = InputBatch::new(b.input.rows(), b.input.dims(), b.input.values().to_vec()).unwrap();
            LabeledBatch { input, labels }
        })
        .collect();
    let a = run_policy(&Policy::DpCore, &stream, state(&tb, 10), &tb.classifier).unwrap();
    let b = run_policy(&Policy::DpCore, &tainted, state(&tb, 10), &tb.classifier).unwrap();
    assert_eq!(a.coreset, b.coreset);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.path, x.ratio, x.d_post, x.k), (y.path, y.ratio, y.d_post, y.k));
    }
}

#[test]
fn buffer_of_one_is_plain_dpcore_per_sample() {
    let tb = testbed();
    let batch = sample_domain_batch(&tb.model, 2, 6, 1).unwrap();
    let mut plain = state(&tb, 1);
    let mut buffered = state(&tb, 1).with_buffer(1).unwrap();
    for row in batch.split_rows() {
        let a = plain.dpcore_step(&row.input).unwrap();
        let b = buffered.dpcore_b_step(&row.input).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(Some(a.decision), b.decision);
    }
}

#[test]
fn full_buffer_makes_exactly_one_decision() {
    let tb = testbed();
    let batch = sample_domain_batch(&tb.model, 2, 64, 1).unwrap();
    let mut st = state(&tb, 1).with_buffer(64).unwrap();
    let decisions = batch
        .split_rows()
        .iter()
        .filter_map(|r| st.dpcore_b_step(&r.input).unwrap().decision)
        .count();
    assert_eq!(decisions, 1);
    assert_eq!(st.coreset.len(), 1);
    assert_eq!(st.buffered_len(), 0);
}

#[test]
fn dpcore_beats_source_and_tracks_oracle() {
    let tb = testbed();
    let stream = csc(&tb, 6, 11);
    let src = run_policy(&Policy::SourceOnly, &stream, state(&tb, 11), &tb.classifier).unwrap();
    let dp = run_policy(&Policy::DpCore, &stream, state(&tb, 11), &tb.classifier).unwrap();
    assert!(dp.summary.mean_error < 0.5 * src.summary.mean_error);
    let oracle = dpcore::testbed::oracle_domain_prompts(
        &tb.model,
        &tb.extractor,
        &tb.source_stats,
        &tb.classifier,
        &dpcore::testbed::OracleOptions::default(),
    )
    .unwrap();
    let m = tb.model.num_domains();
    let oracle_mean = (0..m).map(|g| oracle.own_error(g)).sum::<f64>() / m as f64;
    assert!(dp.summary.mean_error <= oracle_mean + 0.02, "{} vs {}", dp.summary.mean_error, oracle_mean);
}
