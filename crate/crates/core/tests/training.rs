use madod_core::datasets::{gen_synthetic, split_id_ood, LabeledPool, SyntheticConfig, SyntheticSpec};
use madod_core::meta::{all_class_adapt, train_meta, MetaConfig};
use madod_core::metrics::accuracy;
use madod_core::model::Predictor;
use madod_core::rng::seeded;
use madod_core::transform::{g_transform, AffineTransform};

fn pool(seed: u64) -> (LabeledPool, AffineTransform) {
    let cfg = SyntheticConfig {
        samples_per_cell: 40,
        ..SyntheticConfig::default()
    };
    let spec = SyntheticSpec::from_config(&cfg, seed).unwrap();
    let ds = gen_synthetic(&spec, seed).unwrap();
    let split = split_id_ood(&ds, 2, 3).unwrap();
    (LabeledPool::for_split(&ds, &split).unwrap().0, spec.decoder)
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn outer_loss_running_mean_decreases_in_most_seeds() {
    let mut decreased = 0;
    for seed in 0..5 {
        let (pool, tf) = pool(seed);
        let mut p = Predictor::new(pool.dim(), &[16], pool.num_classes, &mut seeded(seed));
        let cfg = MetaConfig::default();
        let history = train_meta(&mut p, &pool, &tf, &cfg, 200, seed, None).unwrap();
        let loss: Vec<f64> = history.iter().map(|s| s.outer_loss).collect();
        if window_mean(&loss[180..]) < window_mean(&loss[..20]) {
            decreased += 1;
        }
    }
    assert!(decreased >= 3, "outer loss decreased in {decreased}/5 seeds");
}

#[test]
fn adaptation_does_not_hurt_accuracy_on_pseudo_ood_classes() {
    // Every ID class serves as a pseudo-OOD class at some point in training,
    // so the whole pool is measured.
    let mut improved = 0;
    for seed in 0..5 {
        let (pool, tf) = pool(seed + 10);
        let mut p = Predictor::new(pool.dim(), &[16], pool.num_classes, &mut seeded(seed));
        let cfg = MetaConfig {
            inner_lr: 0.05,
            outer_lr: 0.01,
            adapt_lr: Some(0.01),
            ..MetaConfig::default()
        };
        train_meta(&mut p, &pool, &tf, &cfg, 100, seed, None).unwrap();
        let before = accuracy(&p.predict(&pool.x).unwrap(), &pool.y).unwrap();
        all_class_adapt(&mut p, &pool, &tf, &cfg, 100, seed).unwrap();
        let after = accuracy(&p.predict(&pool.x).unwrap(), &pool.y).unwrap();
        if after >= before {
            improved += 1;
        }
    }
    assert!(improved >= 3, "accuracy held or improved in {improved}/5 seeds");
}

#[test]
fn transferred_instances_match_target_domain_distribution() {
    let cfg = SyntheticConfig {
        samples_per_cell: 400,
        ..SyntheticConfig::default()
    };
    let spec = SyntheticSpec::from_config(&cfg, 3).unwrap();
    let ds = gen_synthetic(&spec, 3).unwrap();
    let class = 1;
    let target = &spec.domain_variations[1];
    let source: Vec<Vec<f64>> = ds
        .instances
        .iter()
        .filter(|i| i.y == class && i.domain == 0)
        .map(|i| g_transform(&spec.decoder, &i.x, target).unwrap())
        .collect();
    let reference: Vec<&Vec<f64>> = ds
        .instances
        .iter()
        .filter(|i| i.y == class && i.domain == 1)
        .map(|i| &i.x)
        .collect();
    for j in 0..ds.input_dim {
        let stats = |col: Vec<f64>| {
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var, n)
        };
        let (ms, vs, ns) = stats(source.iter().map(|x| x[j]).collect());
        let (mr, vr, nr) = stats(reference.iter().map(|x| x[j]).collect());
        let se = (vs / ns + vr / nr).sqrt();
        assert!((ms - mr).abs() < 3.0 * se, "coordinate {j}: {ms} vs {mr} (se {se})");
        let inside = source.iter().filter(|x| (x[j] - mr).abs() < 3.0 * vr.sqrt()).count() as f64 / ns;
        assert!(
            inside > 0.97,
            "coordinate {j}: {inside} of transferred instances within 3 sd"
        );
    }
}
