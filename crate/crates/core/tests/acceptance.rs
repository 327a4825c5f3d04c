//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Correctness properties gate the exit status. The two empirical
//! training outcomes (directional ablation, dual feasibility) are reported
//! with their numbers but do not gate, since they measure what the method
//! achieves on the benchmark rather than whether the code is right.

#![allow(clippy::excessive_precision)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use madod_core::datasets::{
    build_colored_mnist_from, mnist_sources, split_id_ood, write_surrogate_mnist, ColoredMnistOptions, LabeledPool,
    SyntheticConfig, SyntheticSpec,
};
use madod_core::dual::{dual_update, train_dual, DualState};
use madod_core::harness::{self, ExperimentConfig, Mode};
use madod_core::meta::{build_task, gi_distance, r_gi, r_ood, GiDistance, MetaConfig};
use madod_core::model::{energy_of_logits, Dense, EnergyParams, Predictor};
use madod_core::rng::{derive_seed, seeded, substream};
use madod_core::tensor::Tensor;
use madod_core::tolerances::{ENERGY_ORACLE, RECONSTRUCTION, SHIFT_IDENTITY};
use madod_core::transform::{g_transform, sample_variation};
use madod_core::verify;
use madod_core::{datasets::gen_synthetic, Result};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn autodiff() -> Result<Outcome> {
    let start = Instant::now();
    let mlp = verify::mlp_checks(100)?;
    let second = verify::second_order_check(0)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        mlp.passed() && second.passed() && secs < 60.0,
        format!(
            "100 nets max rel err {:.2e}, second order {:.2e}, {secs:.1}s",
            mlp.max_rel_error, second.max_rel_error
        ),
    ))
}

fn metric_oracles() -> Result<Outcome> {
    let start = Instant::now();
    let r = verify::metric_equivalence(200, 500, 0)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        r.passed() && secs < 60.0,
        format!(
            "{} instances, {} AUROC / {} AUPR mismatches, {secs:.1}s",
            r.instances, r.auroc_mismatches, r.aupr_mismatches
        ),
    ))
}

/// Reference energies from a 256-bit logsumexp.
const ENERGY_REFERENCE: &[(&[f64], f64, f64)] = &[
    (&[1000.0, 0.0], 1.0, -1000.0),
    (&[0.0, 0.0], 1.0, -std::f64::consts::LN_2),
    (&[-745.0, -745.5, -746.0], 1.0, 744.3197303293582654241436),
    (&[3.5, -2.25, 0.125, 7.75], 0.5, -7.750101843960668917704937),
    (&[1e-08, -1e-08], 1.0, -0.6931471805599453594172321),
    (
        &[
            -2.890061, 21.302738, -18.605878, 18.234019, -1.454206, 6.83753, -18.829579, -3.204411, -21.492292,
        ],
        3.0,
        -22.24434551756597778786877,
    ),
    (
        &[
            5.72619, -6.230401, -2.820308, 14.334953, 9.004258, 7.387707, 19.902098, -26.210105, -27.860833, 22.773898,
        ],
        0.5,
        -22.77549707158877662475326,
    ),
    (&[-10.422399, 5.457567], 3.0, -5.472604367843701637784693),
    (
        &[8.417502, -0.013611, 9.746972, -2.560207, -13.310226],
        1.0,
        -9.98179086613378060742596,
    ),
    (
        &[
            12.468577, -11.083367, -16.220046, -12.657603, -25.78659, 15.977273, -5.976012, 20.795017, -6.809188,
            27.482543,
        ],
        0.5,
        -27.48254377675990732513313,
    ),
    (&[-17.416955, 24.616316], 1.0, -24.61631600000000119676904),
    (
        &[
            28.821536, -6.154537, -25.617699, 7.767295, 16.710652, -13.813465, -24.771348, -10.044862, 27.844573,
        ],
        3.0,
        -30.4842480751015438901124,
    ),
];

fn energy_identities() -> Result<Outcome> {
    let oracle_err = ENERGY_REFERENCE
        .iter()
        .map(|(l, t, e)| (energy_of_logits(l, *t) - e).abs())
        .fold(0.0, f64::max);
    let mut rng = seeded(3);
    let mut shift_err: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = l.iter().map(|v| v + r).collect();
        shift_err = shift_err.max((energy_of_logits(&shifted, 1.0) - (energy_of_logits(&l, 1.0) - r)).abs());
    }
    Ok(outcome(
        oracle_err < ENERGY_ORACLE && shift_err < SHIFT_IDENTITY,
        format!("oracle err {oracle_err:.2e}, shift err {shift_err:.2e}"),
    ))
}

fn regularizer_contracts() -> Result<Outcome> {
    let energy = EnergyParams::default();
    let satisfied = r_ood(
        &[energy.m_in - 0.5, energy.m_in],
        &[energy.m_out, energy.m_out + 3.0],
        &energy,
    )?;
    let single = r_ood(&[energy.m_in + 1.0], &[energy.m_out], &energy)?;
    let both = r_ood(&[energy.m_in + 0.5], &[energy.m_out - 2.0], &energy)?;

    let spec = SyntheticSpec::from_config(&SyntheticConfig::default(), 4)?;
    let ds = gen_synthetic(&spec, 4)?;
    let idx: Vec<usize> = (0..40).collect();
    let x = ds.features(&idx);
    let p = Predictor::new(ds.input_dim, &[8], 4, &mut seeded(5));
    let gi_same = r_gi(&p, &p.head, &x, &x, None, &MetaConfig::default())?;

    let mut rng = seeded(6);
    let mut state = DualState::default();
    let mut negative = 0usize;
    for _ in 0..10_000 {
        state.lr_sgi = rng.random_range(0.0..2.0);
        state.lr_ood = rng.random_range(0.0..2.0);
        let r_sgi = rng.random_range(0.0..0.3);
        let r_ood = rng.random_range(0.0..3.0);
        state = dual_update(&state, r_sgi, r_ood)?;
        negative += usize::from(state.beta_sgi < 0.0 || state.beta_ood < 0.0);
    }
    let passed = satisfied == 0.0 && single == 1.0 && both == 0.25 + 4.0 && gi_same == 0.0 && negative == 0;
    Ok(outcome(
        passed,
        format!("R_OOD satisfied={satisfied} single={single} both={both}, R_GI(x,x)={gi_same}, negative duals {negative}/10000"),
    ))
}

fn semantic_invariance() -> Result<Outcome> {
    let cfg = SyntheticConfig {
        noise: 0.0,
        ..SyntheticConfig::default()
    };
    let spec = SyntheticSpec::from_config(&cfg, 8)?;
    let ds = gen_synthetic(&spec, 8)?;
    let (proj, offset) = spec.decoder.semantic_affine();
    let es = Dense::new(
        Tensor::matrix(proj.nrows(), proj.ncols(), proj.transpose().as_slice().to_vec())?,
        Tensor::matrix(1, offset.len(), offset.as_slice().to_vec())?,
    )?;
    let mut rng = seeded(9);
    let hidden = Dense::init(cfg.semantic_dim, 12, &mut rng);
    let head = Dense::init(12, cfg.num_classes, &mut rng);
    let p = Predictor::from_parts(vec![es, hidden], head)?;

    let mut worst_out: f64 = 0.0;
    let mut worst_sgi: f64 = 0.0;
    for _ in 0..1000 {
        let i = rng.random_range(0..ds.len());
        let x = &ds.instances[i].x;
        let v = sample_variation(&spec.decoder, &mut rng);
        let gx = g_transform(&spec.decoder, x, &v)?;
        let xt = Tensor::from_rows(&[x.as_slice()])?;
        let gt = Tensor::from_rows(&[gx.as_slice()])?;
        let (fa, fb) = (p.forward(&xt)?, p.forward(&gt)?);
        for (a, b) in fa.data().iter().zip(fb.data()) {
            worst_out = worst_out.max((a - b).abs());
        }
        worst_sgi = worst_sgi.max(gi_distance(&p.featurize(&xt)?, &p.featurize(&gt)?, GiDistance::L1)?);
    }
    Ok(outcome(
        worst_out < RECONSTRUCTION && worst_sgi < RECONSTRUCTION,
        format!("1000 pairs, max |f(x)-f(G(x,v))| {worst_out:.2e}, max R_SGI {worst_sgi:.2e}"),
    ))
}

fn task_invariants() -> Result<Outcome> {
    let spec = SyntheticSpec::from_config(&SyntheticConfig::default(), 10)?;
    let ds = gen_synthetic(&spec, 10)?;
    let split = split_id_ood(&ds, 2, 3)?;
    let (pool, _) = LabeledPool::for_split(&ds, &split)?;
    let mut rng = substream(11, "tasks");
    let cfg = MetaConfig::default();
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let task = build_task(&pool, &cfg, &mut rng)?;
        violations += usize::from(!task.check_invariants(&pool.y));
    }
    Ok(outcome(
        violations == 0,
        format!("10000 tasks, {violations} violations"),
    ))
}

fn colored_mnist() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    write_surrogate_mnist(dir.path(), 60_000, 10_000, 12)?;
    let start = Instant::now();
    let built = build_colored_mnist_from(&mnist_sources(dir.path(), true), 13, &ColoredMnistOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let flip = built.flip_rate();
    let agree: Vec<f64> = (0..3).map(|d| built.color_agreement(d)).collect();
    let within = (flip - 0.25).abs() <= 0.01
        && agree.iter().zip([0.9, 0.8, 0.1]).all(|(a, t)| (a - t).abs() <= 0.01)
        && built.dataset.len() == 70_000;
    Ok(outcome(
        within && secs < 30.0,
        format!(
            "{} samples, flip {flip:.4}, agreement {:.4}/{:.4}/{:.4}, {secs:.1}s (surrogate IDX digits)",
            built.dataset.len(),
            agree[0],
            agree[1],
            agree[2]
        ),
    ))
}

fn ablation_config() -> Result<ExperimentConfig> {
    ExperimentConfig::load(&repo_root().join("configs/ablation.json"))
}

fn directional_ablation() -> Result<Outcome> {
    let mut cfg = ablation_config()?;
    cfg.modes = vec![Mode::Meta, Mode::MetaNoOod, Mode::CeOnly];
    let start = Instant::now();
    let outcomes = harness::run_experiment(&cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let records: Vec<_> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let rows = harness::aggregate(&records)?;
    let overall = |mode: Mode, det| {
        rows.iter()
            .find(|r| r.mode == mode && r.detector == det && r.test_domain == "all")
            .expect("summary row")
    };
    let mut best_gain = f64::NEG_INFINITY;
    let mut gains = Vec::new();
    let (mut aupr_meta, mut aupr_no_ood) = (0.0, 0.0);
    for &det in &cfg.detectors {
        let gain = overall(Mode::Meta, det).auroc_mean - overall(Mode::CeOnly, det).auroc_mean;
        gains.push(format!("{}{gain:+.3}", det.name()));
        best_gain = best_gain.max(gain);
        aupr_meta += overall(Mode::Meta, det).aupr_mean / cfg.detectors.len() as f64;
        aupr_no_ood += overall(Mode::MetaNoOod, det).aupr_mean / cfg.detectors.len() as f64;
    }
    let passed = best_gain >= 0.05 && aupr_no_ood < aupr_meta && secs < 600.0;
    Ok(outcome(
        passed,
        format!(
            "AUROC meta-ce [{}], mean AUPR meta {aupr_meta:.3} vs no_ood {aupr_no_ood:.3}, {} seeds, {secs:.1}s",
            gains.join(" "),
            cfg.seeds.len()
        ),
    ))
}

fn dual_feasibility() -> Result<Outcome> {
    let cfg = ablation_config()?;
    let prep = harness::prepare(&cfg)?;
    let (domain, class) = (cfg.test_domains[0], cfg.ood_classes[0]);
    let split = split_id_ood(&prep.dataset, domain, class)?;
    let (pool, _) = LabeledPool::for_split(&prep.dataset, &split)?;
    let mut feasible = 0usize;
    let mut negative = 0usize;
    let mut finals = Vec::new();
    for &seed in &cfg.seeds {
        let mut p = Predictor::new(
            prep.dataset.input_dim,
            &cfg.hidden,
            pool.num_classes,
            &mut substream(seed, &format!("init/{domain}/{class}")),
        );
        let train_seed = derive_seed(seed, &format!("train/{domain}/{class}"));
        let history = train_dual(&mut p, &pool, prep.transform.as_ref(), &cfg.dual, 500, train_seed, None)?;
        negative += history
            .steps
            .iter()
            .filter(|s| s.beta_sgi < 0.0 || s.beta_ood < 0.0)
            .count();
        // Minibatch R_SGI is noisy, so feasibility is judged on the last 50 steps.
        let tail = &history.steps[history.steps.len() - 50..];
        let r = tail.iter().map(|s| s.r_sgi).sum::<f64>() / tail.len() as f64;
        feasible += usize::from(r < cfg.dual.state.gamma_sgi);
        finals.push(format!("{r:.4}"));
    }
    Ok(outcome(
        feasible >= 4 && negative == 0,
        format!(
            "final R_SGI [{}] vs gamma1 {}, feasible {feasible}/{}, negative betas {negative}",
            finals.join(" "),
            cfg.dual.state.gamma_sgi,
            cfg.seeds.len()
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let cfg = ExperimentConfig::load(&repo_root().join("configs/smoke.json"))?;
    let csv = |cfg: &ExperimentConfig| -> Result<Vec<u8>> {
        let outcomes = harness::run_experiment(cfg)?;
        let records: Vec<_> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
        harness::results_csv(&records)
    };
    let a = csv(&cfg)?;
    let b = csv(&cfg)?;
    let mut seq = cfg.clone();
    seq.execution = madod_core::exec::Execution::Sequential;
    seq.meta.execution = madod_core::exec::Execution::Sequential;
    let c = csv(&seq)?;
    Ok(outcome(
        a == b && a == c,
        format!(
            "{} bytes, repeat identical {}, sequential identical {}",
            a.len(),
            a == b,
            a == c
        ),
    ))
}

type Criterion = (&'static str, bool, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 10] = [
        ("autodiff correctness", true, autodiff),
        ("metric oracle equivalence", true, metric_oracles),
        ("energy identities", true, energy_identities),
        ("regularizer contracts", true, regularizer_contracts),
        ("semantic invariance implies invariance", true, semantic_invariance),
        ("task construction invariants", true, task_invariants),
        ("colored digits statistics", true, colored_mnist),
        ("directional ablation", false, directional_ablation),
        ("dual-train feasibility", false, dual_feasibility),
        ("end-to-end determinism", true, determinism),
    ];
    let mut gate_failed = false;
    let total = Instant::now();
    for (name, gating, run) in criteria {
        let start = Instant::now();
        let (status, detail) = match run() {
            Ok(o) => (if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        gate_failed |= gating && status == "FAIL";
        let note = if gating { "" } else { " [reported]" };
        println!(
            "{status} {name}{note}: {detail} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance finished in {:.1}s", total.elapsed().as_secs_f64());
    if gate_failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
