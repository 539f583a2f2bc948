mod common;

use common::{random_stack, scene_generator_for, shape_a};
use objprune::attention::build_oracle;
use objprune::gapnet::{loss, rank_hinge, GapNet};
use objprune::importance::descending_order;
use objprune::sap::{build_schedule, retention_count, PruningStrategy};
use objprune::scenesim::{teacher_oracle, SceneSample, Split, TeacherConfig};
use objprune::search::{batch_cost, BaselineThresholds, BatchItem};
use objprune::{ImportanceMap, ModelDims};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(max_len: usize) -> impl Strategy<Value = ImportanceMap> {
    prop::collection::vec(0.0f64..1.0, 1..max_len).prop_filter_map("zero mass", |raw| {
        ImportanceMap::normalize(&raw).ok()
    })
}

fn strict_simplex(max_len: usize) -> impl Strategy<Value = ImportanceMap> {
    prop::collection::vec(1e-3f64..1.0, 1..max_len).prop_map(|raw| ImportanceMap::normalize(&raw).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sharpen_keeps_simplex_and_ranking(a in strict_simplex(40), t in 0.05f64..4.0) {
        let s = a.sharpen(t).unwrap();
        prop_assert!((s.scores().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(s.ranking(), a.ranking());
    }

    #[test]
    fn retention_is_monotone_in_theta(a in simplex(40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, m in 0usize..4) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(retention_count(&a, lo, m) <= retention_count(&a, hi, m));
        let r = retention_count(&a, lo, m);
        prop_assert!(r >= m.min(a.len()) && r <= a.len());
    }

    #[test]
    fn monotone_schedules_nest(a in simplex(30), th in prop::collection::vec(0.0f64..1.0, 1..8), m in 1usize..3) {
        let strategy = PruningStrategy::new(th, m, true).unwrap();
        let s = build_schedule(&a, &strategy);
        prop_assert!(s.is_nested());
        let counts = s.counts();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cost_is_monotone_in_alpha(
        maps in prop::collection::vec(simplex(20), 1..6),
        base in prop::collection::vec(0.0f64..1.0, 4),
        a1 in 0.0f64..2.0,
        a2 in 0.0f64..2.0,
    ) {
        let dims = ModelDims { depth: 4, d_model: 64, d_ff: 128 };
        let batch: Vec<BatchItem> = maps.into_iter().map(|importance| BatchItem { importance, text_len: 7 }).collect();
        let b = BaselineThresholds(base);
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let c_lo = batch_cost(&batch, &b.scaled(lo, 1, true), &dims).unwrap();
        let c_hi = batch_cost(&batch, &b.scaled(hi, 1, true), &dims).unwrap();
        prop_assert!(c_lo <= c_hi);
    }

    #[test]
    fn loss_is_non_negative(a in strict_simplex(12), lam in 0.0f64..2.0, margin in 0.0f64..0.1) {
        let q = ImportanceMap::new(a.scores().iter().rev().cloned().collect()).unwrap();
        prop_assert!(loss(&a, &q, lam, margin).total >= -1e-12);
        prop_assert!(loss(&a, &a, lam, 0.0).total.abs() < 1e-12);
    }

    #[test]
    fn rank_term_vanishes_for_matching_order(raw in prop::collection::vec(0.0f64..1.0, 2..10), margin in 0.0f64..0.05) {
        // predicted map orders every pair like the target with gaps >= margin
        let a = ImportanceMap::normalize(&raw).unwrap();
        let order = descending_order(a.scores());
        let n = raw.len();
        let mut pred = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            pred[i] = (n - rank) as f64;
        }
        // tie groups in the target share a value
        for w in order.windows(2) {
            if a.scores()[w[0]] == a.scores()[w[1]] {
                pred[w[1]] = pred[w[0]];
            }
        }
        let total: f64 = pred.iter().sum();
        let step = 1.0 / total;
        prop_assume!(step >= margin);
        let pred: Vec<f64> = pred.iter().map(|p| p / total).collect();
        prop_assert_eq!(rank_hinge(a.scores(), &pred, margin), 0.0);
    }

    #[test]
    fn oracle_of_random_stack_is_simplex(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, t in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(&mut rng, 2, 2, n, m, t);
        let a = build_oracle(&stack).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!((a.scores().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn permuted(sample: &SceneSample, perm: &[usize]) -> SceneSample {
    let mut s = sample.clone();
    s.objects = perm.iter().map(|&i| sample.objects[i].clone()).collect();
    s.targets = sample
        .targets
        .iter()
        .map(|t| perm.iter().position(|p| p == t).unwrap())
        .collect();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictor_is_permutation_equivariant(seed in 0u64..1000, shuffle in any::<u64>()) {
        let cfg = shape_a();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = common::jittered_params(&net, seed);
        let s = scene_generator_for(&cfg, 2, 9).generate(seed, seed + 1, Split::Test);
        let mut perm: Vec<usize> = (0..s.n_objects()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let a = net.predict(&s, &params).unwrap();
        let b = net.predict(&permuted(&s, &perm), &params).unwrap();
        prop_assert!((a.scores().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((b.scores()[new] - a.scores()[old]).abs() < 1e-9);
        }
    }

    #[test]
    fn twins_score_and_backpropagate_alike(seed in 0u64..1000) {
        let cfg = shape_a();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = common::jittered_params(&net, seed);
        let mut s = scene_generator_for(&cfg, 3, 9).generate(seed, seed + 5, Split::Test);
        let n = s.n_objects();
        s.objects[n - 1] = s.objects[0].clone();
        let (a, cache) = net.forward(&s, &params).unwrap();
        prop_assert!((a.scores()[0] - a.scores()[n - 1]).abs() < 1e-9);
        // symmetric target over the twins
        let mut raw: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        raw[n - 1] = raw[0];
        let target = ImportanceMap::normalize(&raw).unwrap();
        let grad = objprune::gapnet::loss_gradient(&target, &a, cfg.lambda, cfg.margin);
        let inner: f64 = grad.iter().zip(a.scores()).map(|(g, p)| g * p).sum();
        let dlogits: Vec<f64> = grad.iter().zip(a.scores()).map(|(g, p)| p * (g - inner)).collect();
        let rows = net.embedding_gradient(&params, &cache, &dlogits).unwrap();
        for (x, y) in rows.row(0).iter().zip(rows.row(n - 1).iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn dataset_round_trips_through_json() {
    let cfg = shape_a();
    let gen = scene_generator_for(&cfg, 1, 20);
    for s in gen.generate_split(50, 3, Split::Val) {
        let line = serde_json::to_string(&s).unwrap();
        let back: SceneSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
        back.validate().unwrap();
    }
}

#[test]
fn teacher_stacks_satisfy_invariants() {
    let cfg = shape_a();
    let gen = scene_generator_for(&cfg, 1, 30);
    for s in gen.generate_split(30, 9, Split::Train) {
        let teacher = TeacherConfig { noise_sigma: 1.0, ..TeacherConfig::default() };
        // construction validates causality and row sums
        let (_, oracle) = teacher_oracle(&s, &teacher).unwrap();
        assert_eq!(oracle.len(), s.n_objects());
    }
}
