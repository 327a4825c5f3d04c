//! Independent checks: central finite differences against reverse-mode
//! gradients, and brute-force references for the ranking metrics.

use rand::Rng;

use crate::datasets::{gen_synthetic, split_id_ood, LabeledPool, SyntheticConfig, SyntheticSpec};
use crate::error::Result;
use crate::meta::{build_task, task_objective, MetaConfig};
use crate::metrics::{aupr_out, auroc, precision_step, ScoredSample};
use crate::model::{cross_entropy_graph, logits_graph, Predictor};
use crate::rng::{seeded, substream, StreamRng};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::tolerances::{FD_STEP, GRADCHECK_FLOOR, GRADCHECK_REL, SECOND_ORDER_REL};

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Result of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Max relative error between reverse-mode and central-difference
/// gradients of the scalar `f` with respect to every entry of `inputs`.
pub fn check_function<F>(inputs: &[Tensor], f: F) -> std::result::Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> std::result::Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values at least `gap` away from zero, with random sign.
fn away_from_zero<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, gap: f64) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data).expect("sized")
}

type Primitive = (
    &'static str,
    fn(&mut StreamRng) -> Vec<Tensor>,
    fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>,
);

fn weighted_sum(g: &mut Graph, v: Var) -> std::result::Result<Var, TensorError> {
    // Non-uniform weights so every output entry carries a distinct adjoint.
    let (r, c) = (g.value(v).rows(), g.value(v).cols());
    let w = Tensor::matrix(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    g.sum(m)
}

fn primitives() -> Vec<Primitive> {
    vec![
        (
            "add",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0), random_matrix(r, 1, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        (
            "sub",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0), random_matrix(r, 3, 1, -1.0, 1.0)],
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        (
            "mul",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0), random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        (
            "matmul",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0), random_matrix(r, 4, 2, -1.0, 1.0)],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        (
            "transpose",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "relu",
            |r| vec![away_from_zero(r, 3, 4, 0.05)],
            |g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "exp",
            |r| vec![random_matrix(r, 3, 4, -2.0, 2.0)],
            |g, v| {
                let y = g.exp(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "log",
            |r| vec![random_matrix(r, 3, 4, 0.2, 3.0)],
            |g, v| {
                let y = g.log(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "abs",
            |r| vec![away_from_zero(r, 3, 4, 0.05)],
            |g, v| {
                let y = g.abs(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "sum",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
        ),
        (
            "mean",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            },
        ),
        (
            "sum_rows",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.sum_rows(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "sum_cols",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.sum_cols(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "max_rows",
            |r| {
                // Distinct entries per row keep the argmax stable under the probe.
                let mut t = random_matrix(r, 3, 4, -1.0, 1.0);
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    *x += 0.1 * i as f64;
                }
                vec![t]
            },
            |g, v| {
                let y = g.max_rows(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "softmax_rows",
            |r| vec![random_matrix(r, 3, 4, -2.0, 2.0)],
            |g, v| {
                let y = g.softmax_rows(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "logsumexp_rows",
            |r| vec![random_matrix(r, 3, 4, -2.0, 2.0)],
            |g, v| {
                let y = g.logsumexp_rows(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "l1_rows",
            |r| {
                let a = random_matrix(r, 3, 4, -1.0, 1.0);
                let d = away_from_zero(r, 3, 4, 0.05);
                let b = Tensor::new(vec![3, 4], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect())
                    .expect("sized");
                vec![a, b]
            },
            |g, v| {
                let y = g.l1_rows(v[0], v[1])?;
                weighted_sum(g, y)
            },
        ),
        (
            "sq_hinge",
            |r| vec![away_from_zero(r, 3, 4, 0.05)],
            |g, v| {
                let y = g.sq_hinge(v[0])?;
                weighted_sum(g, y)
            },
        ),
        (
            "scale_neg_add_scalar",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.scale(v[0], 1.7)?;
                let y = g.neg(y)?;
                let y = g.add_scalar(y, 0.3)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y)
            },
        ),
        (
            "mask_cols",
            |r| vec![random_matrix(r, 3, 4, -1.0, 1.0)],
            |g, v| {
                let y = g.mask_cols(v[0], &[true, false, true, true], -5.0)?;
                let y = g.softmax_rows(y)?;
                weighted_sum(g, y)
            },
        ),
    ]
}

/// Every primitive, checked once per seed.
pub fn primitive_checks(seeds: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, gen, f) in primitives() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let mut rng = substream(s as u64, name);
            let inputs = gen(&mut rng);
            worst = worst.max(check_function(&inputs, f)?);
        }
        out.push(GradCheck {
            name: name.to_string(),
            max_rel_error: worst,
            tolerance: GRADCHECK_REL,
        });
    }
    Ok(out)
}

/// Smallest |pre-activation| over every featurizer unit, used to keep
/// finite-difference probes clear of ReLU kinks.
fn min_preactivation(p: &Predictor, x: &Tensor) -> Result<f64> {
    let mut h = x.clone();
    let mut closest = f64::INFINITY;
    for layer in &p.featurizer {
        let a = layer.apply(&h)?;
        closest = closest.min(a.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        h = a.relu();
    }
    Ok(closest)
}

fn mlp_loss(p: &Predictor, x: &Tensor, y: &[usize]) -> std::result::Result<(Graph, Var, Vec<Var>), TensorError> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let z = vars.featurize(&mut g, xv)?;
    let l = logits_graph(&mut g, vars.head, z, None)?;
    let loss = cross_entropy_graph(&mut g, l, y)?;
    Ok((g, loss, vars.all()))
}

/// Central-difference check over every parameter of a predictor.
pub fn check_predictor<F>(p: &Predictor, loss: F) -> Result<f64>
where
    F: Fn(&Predictor) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = loss(p)?;
    let mut probe = p.clone();
    let mut worst: f64 = 0.0;
    for k in 0..analytic.len() {
        for j in 0..analytic[k].len() {
            let orig = probe.params()[k].data()[j];
            probe.params_mut()[k].data_mut()[j] = orig + FD_STEP;
            let up = loss(&probe)?.0;
            probe.params_mut()[k].data_mut()[j] = orig - FD_STEP;
            let down = loss(&probe)?.0;
            probe.params_mut()[k].data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic[k].data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Random small MLP with CE loss; inputs are redrawn until every
/// pre-activation sits at least 1e-3 from zero.
pub fn mlp_check(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "mlp");
    let input = rng.random_range(2..6);
    let hidden = rng.random_range(2..8);
    let classes = rng.random_range(2..5);
    let p = Predictor::new(input, &[hidden], classes, &mut rng);
    let n = 6;
    let x = loop {
        let x = random_matrix(&mut rng, n, input, -1.0, 1.0);
        if min_preactivation(&p, &x)? > 1e-3 {
            break x;
        }
    };
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    check_predictor(&p, |q| {
        let (g, loss, vars) = mlp_loss(q, &x, &y)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], vars.iter().map(|v| grads.wrt(*v)).collect()))
    })
}

pub fn mlp_checks(count: usize) -> Result<GradCheck> {
    let mut worst: f64 = 0.0;
    for s in 0..count {
        worst = worst.max(mlp_check(s as u64)?);
    }
    Ok(GradCheck {
        name: format!("mlp_cross_entropy_x{count}"),
        max_rel_error: worst,
        tolerance: GRADCHECK_REL,
    })
}

/// `grad(a·f + b·g) − (a·grad f + b·grad g)`, max absolute entry.
pub fn linearity_gap(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "linearity");
    let x = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let f = |g: &mut Graph, v: Var| -> std::result::Result<Var, TensorError> {
        let s = g.softmax_rows(v)?;
        weighted_sum(g, s)
    };
    let h = |g: &mut Graph, v: Var| -> std::result::Result<Var, TensorError> {
        let e = g.exp(v)?;
        g.mean(e)
    };
    let grad_of = |combine: &dyn Fn(&mut Graph, Var) -> std::result::Result<Var, TensorError>| -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let root = combine(&mut g, v)?;
        Ok(g.backward(root)?.wrt(v))
    };
    let both = grad_of(&|g, v| {
        let fv = f(g, v)?;
        let hv = h(g, v)?;
        let fa = g.scale(fv, a)?;
        let hb = g.scale(hv, b)?;
        g.add(fa, hb)
    })?;
    let gf = grad_of(&|g, v| f(g, v))?;
    let gh = grad_of(&|g, v| h(g, v))?;
    Ok(both
        .data()
        .iter()
        .zip(gf.data().iter().zip(gh.data()))
        .map(|(c, (p, q))| (c - (a * p + b * q)).abs())
        .fold(0.0, f64::max))
}

/// Synthetic pool and width-4 predictor used by the bi-level check.
pub fn second_order_fixture(seed: u64) -> Result<(LabeledPool, SyntheticSpec, Predictor)> {
    let cfg = SyntheticConfig {
        samples_per_cell: 12,
        ..SyntheticConfig::default()
    };
    let spec = SyntheticSpec::from_config(&cfg, seed)?;
    let ds = gen_synthetic(&spec, seed)?;
    let split = split_id_ood(&ds, 2, cfg.num_classes - 1)?;
    let (pool, _) = LabeledPool::for_split(&ds, &split)?;
    let p = Predictor::new(pool.dim(), &[4], pool.num_classes, &mut substream(seed, "init"));
    Ok((pool, spec, p))
}

/// Outer-loss gradient through one recorded inner step against central
/// differences of the full bi-level objective.
pub fn second_order_check(seed: u64) -> Result<GradCheck> {
    let (pool, spec, p) = second_order_fixture(seed)?;
    let cfg = MetaConfig {
        inner_lr: 0.5,
        lambda_gi: 0.5,
        lambda_ood: 0.1,
        shots: 3,
        ..MetaConfig::default()
    };
    let task = build_task(&pool, &cfg, &mut seeded(seed))?;
    let worst = check_predictor(&p, |q| {
        let out = task_objective(q, &pool, &task, &spec.decoder, &cfg, seed)?;
        Ok((out.loss, out.grads))
    })?;
    Ok(GradCheck {
        name: "bi_level_width4".into(),
        max_rel_error: worst,
        tolerance: SECOND_ORDER_REL,
    })
}

/// Full suite behind the `gradcheck` command.
pub fn gradcheck_suite(seeds: usize, nets: usize) -> Result<Vec<GradCheck>> {
    let mut out = primitive_checks(seeds)?;
    out.push(mlp_checks(nets)?);
    out.push(second_order_check(0)?);
    let gap = (0..seeds as u64).map(linearity_gap).collect::<Result<Vec<_>>>()?;
    out.push(GradCheck {
        name: "backward_linearity".into(),
        max_rel_error: gap.into_iter().fold(0.0, f64::max),
        tolerance: 1e-10,
    });
    Ok(out)
}

/// `(2·#{OOD > ID} + #{ties}) / (2·P·N)` by enumerating every pair.
pub fn pairwise_auroc(samples: &[ScoredSample]) -> Option<f64> {
    let (mut doubled, mut pos, mut neg) = (0u64, 0u64, 0u64);
    for s in samples {
        if s.is_ood {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        return None;
    }
    for o in samples.iter().filter(|s| s.is_ood) {
        for i in samples.iter().filter(|s| !s.is_ood) {
            doubled += if o.score > i.score {
                2
            } else if o.score == i.score {
                1
            } else {
                0
            };
        }
    }
    Some(doubled as f64 / (2 * pos * neg) as f64)
}

/// Average precision by recounting TP and FP from scratch at every
/// distinct threshold, highest first.
pub fn threshold_sweep_aupr(samples: &[ScoredSample]) -> Option<f64> {
    let pos = samples.iter().filter(|s| s.is_ood).count() as u64;
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = samples.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_tp = 0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = samples.iter().filter(|s| s.is_ood && s.score >= t).count() as u64;
        let fp = samples.iter().filter(|s| !s.is_ood && s.score >= t).count() as u64;
        ap += precision_step(tp - prev_tp, tp, fp, pos);
        prev_tp = tp;
    }
    Some(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricEquivalence {
    pub instances: usize,
    pub auroc_mismatches: usize,
    pub aupr_mismatches: usize,
}

impl MetricEquivalence {
    pub fn passed(&self) -> bool {
        self.auroc_mismatches == 0 && self.aupr_mismatches == 0
    }
}

/// Random tie-heavy instance with both classes present.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_n: usize) -> Vec<ScoredSample> {
    let n = rng.random_range(2..=max_n);
    let levels = rng.random_range(2..=20u32);
    let mut s: Vec<ScoredSample> = (0..n)
        .map(|_| {
            ScoredSample::new(
                f64::from(rng.random_range(0..levels)) / f64::from(levels),
                rng.random_bool(0.4),
            )
        })
        .collect();
    s[0].is_ood = true;
    s[1].is_ood = false;
    s
}

/// Exact (bitwise) comparison of the sorted-sweep metrics and the oracles.
pub fn metric_equivalence(instances: usize, max_n: usize, seed: u64) -> Result<MetricEquivalence> {
    let mut rng = substream(seed, "metric-oracle");
    let mut report = MetricEquivalence {
        instances,
        auroc_mismatches: 0,
        aupr_mismatches: 0,
    };
    for _ in 0..instances {
        let s = random_instance(&mut rng, max_n);
        if Some(auroc(&s)?) != pairwise_auroc(&s) {
            report.auroc_mismatches += 1;
        }
        if Some(aupr_out(&s)?) != threshold_sweep_aupr(&s) {
            report.aupr_mismatches += 1;
        }
    }
    Ok(report)
}
