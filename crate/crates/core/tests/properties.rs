use forgedit_core::diffusion::{add_noise, ddim_step, NoiseSchedule};
use forgedit_core::editor::{SweepKind, SweepSpec};
use forgedit_core::embedding::{project, vector_projection_per_token, vector_subtraction};
use forgedit_core::forgetting::{merge_parameters, ForgettingStrategy, BUILTIN_NAMES};
use forgedit_core::{Array, DenoiserParams, PathPredicate, PromptEmbedding, Provenance, StageLayout};
use proptest::prelude::*;
use std::sync::OnceLock;

fn small_layout() -> StageLayout {
    StageLayout { widths: [4, 4, 8, 8], embed_dim: 8, time_features: 4, ..StageLayout::default() }
}

fn pair() -> &'static (DenoiserParams, DenoiserParams) {
    static P: OnceLock<(DenoiserParams, DenoiserParams)> = OnceLock::new();
    P.get_or_init(|| {
        (DenoiserParams::init(StageLayout::default(), 11).unwrap(), DenoiserParams::init(StageLayout::default(), 12).unwrap())
    })
}

fn emb(n: usize, c: usize, v: Vec<f64>) -> PromptEmbedding {
    PromptEmbedding::new(Array::from_vec(&[1, n, c], v).unwrap(), Provenance::Encoded).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn forward_reverse_consistency(
        x0 in prop::collection::vec(-2.0..2.0f64, 8),
        eps in prop::collection::vec(-3.0..3.0f64, 8),
        t in 1usize..=99,
        back in 1usize..=99,
    ) {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let t_prev = t.saturating_sub(back);
        let x0 = Array::from_vec(&[2, 2, 2], x0).unwrap();
        let eps = Array::from_vec(&[2, 2, 2], eps).unwrap();
        let xt = add_noise(&x0, &eps, t, &sched).unwrap();
        let stepped = ddim_step(&xt, &eps, t, t_prev, &sched).unwrap();
        let direct = add_noise(&x0, &eps, t_prev, &sched).unwrap();
        for (a, b) in stepped.data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(steps in 2usize..400) {
        let s = NoiseSchedule::cosine(steps).unwrap();
        prop_assert_eq!(s.alphas()[0], 1.0);
        prop_assert_eq!(s.alphas()[steps], 0.0);
        prop_assert!(s.alphas().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn projection_is_orthogonal_and_complete(
        s in prop::collection::vec(-5.0..5.0f64, 24),
        t in prop::collection::vec(-5.0..5.0f64, 24),
    ) {
        prop_assume!(s.chunks(8).all(|c| c.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let (es, et) = (emb(3, 8, s.clone()), emb(3, 8, t.clone()));
        let p = project(&es, &et).unwrap();
        for (k, ((sv, tv), ev)) in s.chunks(8).zip(t.chunks(8)).zip(p.edit.data().data().chunks(8)).enumerate() {
            let dot: f64 = ev.iter().zip(sv).map(|(a, b)| a * b).sum();
            let ne = ev.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ns = sv.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(dot.abs() <= 1e-9 * ne * ns + f64::MIN_POSITIVE);
            let nt = tv.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..8 {
                prop_assert!((p.ratios[k] * sv[i] + ev[i] - tv[i]).abs() <= 1e-10 * nt.max(1e-300));
            }
        }
        let rebuilt = vector_projection_per_token(&es, &et, &p.ratios, 1.0).unwrap();
        let sub = vector_subtraction(&es, &et, 1.0).unwrap();
        prop_assert_eq!(sub.data(), et.data());
        prop_assert!(rebuilt.data().max_abs_diff(sub.data()).unwrap() <= 1e-10 * 5.0 * 8.0);
    }

    #[test]
    fn subtraction_endpoints(s in prop::collection::vec(-5.0..5.0f64, 16), t in prop::collection::vec(-5.0..5.0f64, 16)) {
        let (es, et) = (emb(2, 8, s), emb(2, 8, t));
        let lo = vector_subtraction(&es, &et, 0.0).unwrap();
        prop_assert_eq!(lo.data(), es.data());
        let hi = vector_subtraction(&es, &et, 1.0).unwrap();
        prop_assert_eq!(hi.data(), et.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merge_partitions_paths(idx in 0usize..BUILTIN_NAMES.len(), sigma in 0.0..=1.0f64) {
        let (l, o) = pair();
        let s = ForgettingStrategy::parse(BUILTIN_NAMES[idx]).unwrap().with_sigma(sigma).unwrap();
        let m = merge_parameters(l, o, &s).unwrap();
        prop_assert!(m.paths().eq(l.paths()));
        for (p, w) in m.entries() {
            prop_assert_eq!(w.shape(), l.get(p).unwrap().shape());
            if !s.forget.matches(p) {
                prop_assert_eq!(w, l.get(p).unwrap());
            }
        }
        let zero = s.clone().with_sigma(0.0).unwrap();
        let once = merge_parameters(l, o, &zero).unwrap();
        prop_assert_eq!(merge_parameters(&once, o, &zero).unwrap(), once);
    }

    #[test]
    fn custom_glob_strategies_round_trip(stage in 0usize..4, leaf in prop::sample::select(vec!["w1", "qw", "b_in", "*"])) {
        let spec = format!("custom:encoder.{stage}.*.{leaf};sigma=0.5");
        let s = ForgettingStrategy::parse(&spec).unwrap();
        prop_assert_eq!(ForgettingStrategy::parse(&s.spec()).unwrap(), s.clone());
        let (l, _) = pair();
        let prefix = format!("encoder.{stage}.");
        prop_assert!(l.select_paths(&s.forget).iter().all(|p| p.starts_with(&prefix)));
    }
}

#[test]
fn encoder_and_decoder_strategies_are_disjoint() {
    let (l, o) = pair();
    let enc = ForgettingStrategy::builtin("encoderattn").unwrap();
    let dec = ForgettingStrategy::builtin("decoderattn").unwrap();
    let e = l.select_paths(&enc.forget);
    let d = l.select_paths(&dec.forget);
    assert!(e.is_disjoint(&d));
    let both = merge_parameters(&merge_parameters(l, o, &enc).unwrap(), o, &dec).unwrap();
    let attn = PathPredicate::attention();
    for (p, w) in both.entries() {
        let learned = attn.matches(p) || p.starts_with("mid.");
        assert_eq!(w, if learned { l.get(p).unwrap() } else { o.get(p).unwrap() }, "{p}");
    }
}

#[test]
fn trainable_and_frozen_partition() {
    let (l, _) = pair();
    let trainable = l.trainable_paths();
    let frozen: Vec<&str> = l.paths().filter(|p| !trainable.contains(*p)).collect();
    assert_eq!(trainable.len() + frozen.len(), l.entries().len());
    assert!(frozen.iter().all(|p| p.starts_with("encoder.3.") || p.starts_with("mid.") || p.starts_with("decoder.0.")));
    assert!(trainable.iter().all(|p| !(p.starts_with("encoder.3.") || p.starts_with("mid.") || p.starts_with("decoder.0."))));
}

#[test]
fn conditioning_changes_prediction() {
    let lay = small_layout();
    let params = DenoiserParams::init(lay, 4).unwrap();
    let x = Array::from_vec(&lay.input_shape(), (0..256).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
    let e1 = emb(8, 8, (0..64).map(|i| (i as f64 * 0.13).sin()).collect());
    let e2 = emb(8, 8, (0..64).map(|i| (i as f64 * 0.29).cos()).collect());
    for t in [1, 50, 99] {
        let a = params.predict_noise(&x, t, &e1).unwrap();
        let b = params.predict_noise(&x, t, &e2).unwrap();
        assert_eq!(a.shape(), lay.input_shape());
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        assert_eq!(a, params.predict_noise(&x, t, &e1).unwrap());
    }
}

#[test]
fn sweep_cardinality_depends_only_on_spec() {
    for _ in 0..3 {
        assert_eq!(SweepSpec::for_kind(SweepKind::Subtraction, false).grid.len(), 9);
        assert_eq!(SweepSpec::for_kind(SweepKind::Subtraction, true).grid.len(), 15);
        assert_eq!(SweepSpec::for_kind(SweepKind::Projection, false).grid.len(), 12);
        assert_eq!(SweepSpec::for_kind(SweepKind::Projection, true).grid.len(), 12);
    }
}
