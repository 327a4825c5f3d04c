use madod_core::datasets::LabeledPool;
use madod_core::dual::{dual_update, DualState};
use madod_core::gda::quantile;
use madod_core::meta::{build_task, gi_distance, GiDistance, MetaConfig};
use madod_core::metrics::{aupr_out, auroc, ScoredSample};
use madod_core::model::{energy_of_logits, Predictor};
use madod_core::rng::seeded;
use madod_core::tensor::Tensor;
use madod_core::verify::{pairwise_auroc, threshold_sweep_aupr};
use proptest::prelude::*;

fn samples() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((0u8..12, any::<bool>()), 2..80).prop_map(|v| {
        let mut s: Vec<ScoredSample> = v
            .into_iter()
            .map(|(q, o)| ScoredSample::new(f64::from(q) / 4.0, o))
            .collect();
        s[0].is_ood = true;
        s[1].is_ood = false;
        s
    })
}

proptest! {
    #[test]
    fn auroc_is_a_rank_statistic(s in samples()) {
        let warped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(x.score.powi(3) + 2.0 * x.score - 7.0, x.is_ood)).collect();
        prop_assert_eq!(auroc(&s).unwrap(), auroc(&warped).unwrap());
        prop_assert_eq!(aupr_out(&s).unwrap(), aupr_out(&warped).unwrap());
    }

    #[test]
    fn sweeps_equal_brute_force(s in samples()) {
        prop_assert_eq!(Some(auroc(&s).unwrap()), pairwise_auroc(&s));
        prop_assert_eq!(Some(aupr_out(&s).unwrap()), threshold_sweep_aupr(&s));
    }

    #[test]
    fn metrics_stay_in_unit_interval(s in samples()) {
        let a = auroc(&s).unwrap();
        let p = aupr_out(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn energy_shift_and_bounds(l in prop::collection::vec(-50.0f64..50.0, 1..12), r in -100.0f64..100.0, t in 0.1f64..5.0) {
        let shifted: Vec<f64> = l.iter().map(|v| v + r).collect();
        let e = energy_of_logits(&l, t);
        prop_assert!((energy_of_logits(&shifted, t) - (e - r)).abs() < 1e-9);
        // -max(l) - T ln K <= E <= -max(l)
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e <= -max + 1e-12);
        prop_assert!(e >= -max - t * (l.len() as f64).ln() - 1e-12);
    }

    #[test]
    fn dual_variables_stay_nonnegative(
        start in (0.0f64..5.0, 0.0f64..5.0),
        updates in prop::collection::vec((0.0f64..1.0, 0.0f64..4.0, 0.0f64..3.0), 1..50),
    ) {
        let mut s = DualState { beta_sgi: start.0, beta_ood: start.1, ..DualState::default() };
        for (r1, r2, lr) in updates {
            s.lr_sgi = lr;
            s.lr_ood = lr;
            s = dual_update(&s, r1, r2).unwrap();
            prop_assert!(s.beta_sgi >= 0.0 && s.beta_ood >= 0.0);
        }
    }

    #[test]
    fn gi_distance_is_symmetric_and_zero_on_diagonal(a in prop::collection::vec(-3.0f64..3.0, 12), b in prop::collection::vec(-3.0f64..3.0, 12)) {
        let ta = Tensor::matrix(3, 4, a).unwrap();
        let tb = Tensor::matrix(3, 4, b).unwrap();
        for d in [GiDistance::L1, GiDistance::SquaredL2] {
            prop_assert_eq!(gi_distance(&ta, &ta, d).unwrap(), 0.0);
            prop_assert_eq!(gi_distance(&ta, &tb, d).unwrap(), gi_distance(&tb, &ta, d).unwrap());
            prop_assert!(gi_distance(&ta, &tb, d).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sampled_tasks_respect_invariants(k in 3usize..7, per_class in 10usize..20, shots in 1usize..5, seed in any::<u64>()) {
        let n = k * per_class;
        let pool = LabeledPool {
            x: Tensor::zeros(&[n, 2]),
            y: (0..n).map(|i| i % k).collect(),
            domain: vec![0; n],
            num_classes: k,
            class_ids: (0..k).collect(),
        };
        let cfg = MetaConfig { shots, pseudo_ood_count: 1 + (seed as usize) % (k - 2), ..MetaConfig::default() };
        let task = build_task(&pool, &cfg, &mut seeded(seed)).unwrap();
        prop_assert!(task.check_invariants(&pool.y));
        prop_assert_eq!(task.keep.iter().filter(|k| !**k).count(), cfg.pseudo_ood_count);
    }

    #[test]
    fn softmax_outputs_are_distributions(seed in any::<u64>(), rows in 1usize..6) {
        let p = Predictor::new(5, &[7], 4, &mut seeded(seed));
        let x = Tensor::matrix(rows, 5, (0..rows * 5).map(|i| ((i * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let probs = p.forward(&x).unwrap();
        for i in 0..rows {
            prop_assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(probs.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let p = Predictor::new(3, &hidden, 2, &mut seeded(seed));
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        prop_assert_eq!(Predictor::read_checkpoint(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn quantile_is_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..40), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
    }

    #[test]
    fn transpose_reverses_products(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 12)) {
        let ta = Tensor::matrix(2, 3, a).unwrap();
        let tb = Tensor::matrix(3, 4, b).unwrap();
        let left = ta.matmul(&tb).unwrap().transpose().unwrap();
        let right = tb.transpose().unwrap().matmul(&ta.transpose().unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
