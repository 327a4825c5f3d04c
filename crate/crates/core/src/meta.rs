//! Bi-level meta-training with pseudo-OOD tasks.
//!
//! Each task hides `pseudo_ood_count` classes. The head is adapted on the
//! support set with `L_cls + λ1·R_GI`, then the adapted head is scored on the
//! query set with `L_cls + λ2·R_OOD`, where the hidden classes play OOD.
//! The inner step touches only the linear head, so its gradient is written
//! out as graph ops and the outer gradient flows back into the featurizer
//! through it.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledPool;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{
    cross_entropy_graph, energy_graph, logits_graph, one_hot, Dense, DenseVars, EnergyParams, Predictor,
};
use crate::rng::{derive_seed, seeded, substream};
use crate::tensor::{Graph, Optimizer, OptimizerKind, Tensor, TensorError, Var};
use crate::transform::{augment_rows, DomainTransform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiDistance {
    #[default]
    L1,
    SquaredL2,
}

/// Where G-invariance is measured: head outputs or featurizer outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiSpace {
    #[default]
    Output,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub lambda_gi: f64,
    pub lambda_ood: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub energy: EnergyParams,
    pub tasks_per_batch: usize,
    pub shots: usize,
    pub pseudo_ood_count: usize,
    pub inner_steps: usize,
    pub distance: GiDistance,
    pub gi_space: GiSpace,
    pub outer_optimizer: OptimizerKind,
    pub adapt_steps: usize,
    /// Falls back to `inner_lr` when unset.
    pub adapt_lr: Option<f64>,
    pub adapt_optimizer: OptimizerKind,
    pub execution: Execution,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lambda_gi: 0.1,
            lambda_ood: 0.1,
            inner_lr: 10f64.powf(-3.5),
            outer_lr: 10f64.powf(-4.75),
            energy: EnergyParams::default(),
            tasks_per_batch: 4,
            shots: 5,
            pseudo_ood_count: 1,
            inner_steps: 1,
            distance: GiDistance::L1,
            gi_space: GiSpace::Output,
            outer_optimizer: OptimizerKind::Sgd,
            adapt_steps: 100,
            adapt_lr: None,
            adapt_optimizer: OptimizerKind::Sgd,
            execution: Execution::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gi >= 0.0 && self.lambda_ood >= 0.0) {
            return Err(Error::Config("regularizer weights must be nonnegative".into()));
        }
        let adapt_lr = self.adapt_lr.unwrap_or(self.inner_lr);
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0 && adapt_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.tasks_per_batch == 0 || self.shots == 0 || self.pseudo_ood_count == 0 {
            return Err(Error::Config(
                "tasks_per_batch, shots and pseudo_ood_count must be at least 1".into(),
            ));
        }
        self.energy.validate()
    }

    pub fn adapt_lr(&self) -> f64 {
        self.adapt_lr.unwrap_or(self.inner_lr)
    }
}

/// One episode over a [`LabeledPool`]; sets hold pool row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub ood: Vec<usize>,
    pub pseudo_ood_classes: Vec<usize>,
    /// Retained classes, in head-index order.
    pub retained: Vec<usize>,
    /// `keep[k]` is false for head outputs masked in this task.
    pub keep: Vec<bool>,
}

impl MetaTask {
    /// Checks the three set disjointness conditions and class disjointness.
    pub fn check_invariants(&self, labels: &[usize]) -> bool {
        let mut seen = std::collections::HashSet::new();
        let all_unique = self
            .support
            .iter()
            .chain(&self.query)
            .chain(&self.ood)
            .all(|i| seen.insert(*i));
        let classes_disjoint = self
            .support
            .iter()
            .chain(&self.query)
            .all(|&i| !self.pseudo_ood_classes.contains(&labels[i]))
            && self.ood.iter().all(|&i| self.pseudo_ood_classes.contains(&labels[i]));
        all_unique && classes_disjoint
    }
}

pub fn build_task<R: Rng + ?Sized>(pool: &LabeledPool, cfg: &MetaConfig, rng: &mut R) -> Result<MetaTask> {
    let k = pool.num_classes;
    let needed_classes = cfg.pseudo_ood_count + 2;
    if k < needed_classes {
        return Err(Error::InsufficientClasses {
            needed: needed_classes,
            available: k,
        });
    }
    let by_class = pool.by_class();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 * cfg.shots {
            return Err(Error::InsufficientInstances {
                class: pool.class_ids[class],
                available: members.len(),
                needed: 2 * cfg.shots,
            });
        }
    }
    let mut pseudo: Vec<usize> = sample(rng, k, cfg.pseudo_ood_count).into_vec();
    pseudo.sort_unstable();
    let retained: Vec<usize> = (0..k).filter(|c| !pseudo.contains(c)).collect();
    let mut support = Vec::with_capacity(cfg.shots * retained.len());
    let mut query = Vec::with_capacity(cfg.shots * retained.len());
    for &c in &retained {
        let members = &by_class[c];
        let picks = sample(rng, members.len(), 2 * cfg.shots);
        for (j, p) in picks.iter().enumerate() {
            if j < cfg.shots {
                support.push(members[p]);
            } else {
                query.push(members[p]);
            }
        }
    }
    let mut ood = Vec::with_capacity(cfg.shots * pseudo.len());
    for &c in &pseudo {
        let members = &by_class[c];
        ood.extend(sample(rng, members.len(), cfg.shots).iter().map(|p| members[p]));
    }
    let keep = (0..k).map(|c| !pseudo.contains(&c)).collect();
    Ok(MetaTask {
        support,
        query,
        ood,
        pseudo_ood_classes: pseudo,
        retained,
        keep,
    })
}

/// Plain per-row distances averaged over rows, for two equally shaped
/// matrices of head or feature outputs.
pub fn gi_distance(a: &Tensor, c: &Tensor, distance: GiDistance) -> Result<f64> {
    if a.shape() != c.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gi_distance",
            lhs: a.shape().to_vec(),
            rhs: c.shape().to_vec(),
        }
        .into());
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Empty("G-invariance batch".into()));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(c.data())
        .map(|(x, y)| match distance {
            GiDistance::L1 => (x - y).abs(),
            GiDistance::SquaredL2 => (x - y) * (x - y),
        })
        .sum();
    Ok(total / n as f64)
}

/// `R_GI` of predictor `p` (with head `head`) over original rows `x` and
/// their transformed counterparts `x_aug`.
pub fn r_gi(
    p: &Predictor,
    head: &Dense,
    x: &Tensor,
    x_aug: &Tensor,
    keep: Option<&[bool]>,
    cfg: &MetaConfig,
) -> Result<f64> {
    let z = p.featurize(x)?;
    let z_aug = p.featurize(x_aug)?;
    match cfg.gi_space {
        GiSpace::Feature => gi_distance(&z, &z_aug, cfg.distance),
        GiSpace::Output => {
            let mut g = Graph::new();
            let hv = head.bind_constant(&mut g);
            let zc = g.constant(z);
            let za = g.constant(z_aug);
            let l = logits_graph(&mut g, hv, zc, keep)?;
            let la = logits_graph(&mut g, hv, za, keep)?;
            let a = g.softmax_rows(l)?;
            let c = g.softmax_rows(la)?;
            gi_distance(g.value(a), g.value(c), cfg.distance)
        }
    }
}

/// Scalar-loop `R_OOD` from per-instance energies.
pub fn r_ood(e_in: &[f64], e_out: &[f64], energy: &EnergyParams) -> Result<f64> {
    if e_in.is_empty() {
        return Err(Error::Empty("R_OOD query set".into()));
    }
    if e_out.is_empty() {
        return Err(Error::Empty("R_OOD pseudo-OOD set".into()));
    }
    let hinge = |v: f64| v.max(0.0).powi(2);
    let id: f64 = e_in.iter().map(|&e| hinge(e - energy.m_in)).sum::<f64>() / e_in.len() as f64;
    let ood: f64 = e_out.iter().map(|&e| hinge(energy.m_out - e)).sum::<f64>() / e_out.len() as f64;
    Ok(id + ood)
}

/// Graph form of [`r_ood`] over `n × 1` energy columns. `e_out` may be
/// omitted, leaving only the ID term.
pub fn r_ood_graph(
    g: &mut Graph,
    e_in: Var,
    e_out: Option<Var>,
    energy: &EnergyParams,
) -> std::result::Result<Var, TensorError> {
    let shifted = g.add_scalar(e_in, -energy.m_in)?;
    let hinged = g.sq_hinge(shifted)?;
    let id = g.mean(hinged)?;
    match e_out {
        None => Ok(id),
        Some(e_out) => {
            let gap = g.neg(e_out)?;
            let gap = g.add_scalar(gap, energy.m_out)?;
            let hinged = g.sq_hinge(gap)?;
            let ood = g.mean(hinged)?;
            g.add(id, ood)
        }
    }
}

/// Graph form of [`gi_distance`]. The L1 sign is taken as a constant,
/// which is its derivative almost everywhere.
pub fn gi_distance_graph(g: &mut Graph, a: Var, c: Var, distance: GiDistance) -> std::result::Result<Var, TensorError> {
    match distance {
        GiDistance::L1 => {
            let d = g.l1_rows(a, c)?;
            g.mean(d)
        }
        GiDistance::SquaredL2 => {
            let diff = g.sub(a, c)?;
            let sq = g.mul(diff, diff)?;
            let rows = g.sum_rows(sq)?;
            g.mean(rows)
        }
    }
}

/// `probs ⊙ (up − rowsum(up ⊙ probs))`: the pullback of `up` through a
/// row softmax with output `probs`.
fn softmax_pullback(g: &mut Graph, probs: Var, up: Var) -> std::result::Result<Var, TensorError> {
    let weighted = g.mul(up, probs)?;
    let dot = g.sum_rows(weighted)?;
    let centered = g.sub(up, dot)?;
    g.mul(probs, centered)
}

/// `∂R_GI/∂a` for output-space distances between softmax rows `a` and `c`.
fn gi_upstream(g: &mut Graph, a: Var, c: Var, distance: GiDistance) -> std::result::Result<Var, TensorError> {
    let n = g.value(a).rows() as f64;
    match distance {
        GiDistance::L1 => {
            let (ta, tc) = (g.value(a), g.value(c));
            let sign = Tensor::new(
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .zip(tc.data())
                    .map(|(x, y)| {
                        if x > y {
                            1.0 / n
                        } else if x < y {
                            -1.0 / n
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
            Ok(g.constant(sign))
        }
        GiDistance::SquaredL2 => {
            let diff = g.sub(a, c)?;
            g.scale(diff, 2.0 / n)
        }
    }
}

/// Values recorded by one inner step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InnerStats {
    pub l_cls: f64,
    pub r_gi: f64,
}

/// Recorded inner update: head `(w, b)` after `cfg.inner_steps` steps of
/// `L_cls + λ1·R_GI` on the support features `z_s`. `z_aug` holds one
/// featurized transformed copy of the support rows per step.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_graph(
    g: &mut Graph,
    head: DenseVars,
    z_s: Var,
    z_aug: &[Var],
    labels: &[usize],
    keep: &[bool],
    cfg: &MetaConfig,
) -> std::result::Result<(DenseVars, Vec<InnerStats>), TensorError> {
    let n = labels.len() as f64;
    let classes = keep.len();
    let targets = g.constant(one_hot(labels, classes));
    let mut head = head;
    let mut stats = Vec::with_capacity(z_aug.len());
    for &za in z_aug {
        let l = logits_graph(g, head, z_s, Some(keep))?;
        let ce = cross_entropy_graph(g, l, labels)?;
        let a = g.softmax_rows(l)?;
        let resid = g.sub(a, targets)?;
        let mut dl = g.scale(resid, 1.0 / n)?;
        let r_gi;
        let mut extra: Option<Var> = None;
        match cfg.gi_space {
            GiSpace::Output => {
                let la = logits_graph(g, head, za, Some(keep))?;
                let c = g.softmax_rows(la)?;
                let r = gi_distance_graph(g, a, c, cfg.distance)?;
                r_gi = g.value(r).data()[0];
                if cfg.lambda_gi != 0.0 {
                    let up = gi_upstream(g, a, c, cfg.distance)?;
                    let dla = softmax_pullback(g, a, up)?;
                    let dla = g.scale(dla, cfg.lambda_gi)?;
                    dl = g.add(dl, dla)?;
                    let neg_up = g.neg(up)?;
                    let dlc = softmax_pullback(g, c, neg_up)?;
                    extra = Some(g.scale(dlc, cfg.lambda_gi)?);
                }
            }
            GiSpace::Feature => {
                let r = gi_distance_graph(g, z_s, za, cfg.distance)?;
                r_gi = g.value(r).data()[0];
            }
        }
        let dlt = g.transpose(dl)?;
        let mut gw = g.matmul(dlt, z_s)?;
        let mut gb = g.sum_cols(dl)?;
        if let Some(dlc) = extra {
            let dlct = g.transpose(dlc)?;
            let gwc = g.matmul(dlct, za)?;
            gw = g.add(gw, gwc)?;
            let gbc = g.sum_cols(dlc)?;
            gb = g.add(gb, gbc)?;
        }
        let step_w = g.scale(gw, -cfg.inner_lr)?;
        let step_b = g.scale(gb, -cfg.inner_lr)?;
        head = DenseVars {
            weight: g.add(head.weight, step_w)?,
            bias: g.add(head.bias, step_b)?,
        };
        stats.push(InnerStats {
            l_cls: g.value(ce).data()[0],
            r_gi,
        });
    }
    Ok((head, stats))
}

/// Per-task result of the bi-level objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub loss: f64,
    pub l_cls: f64,
    pub r_gi: f64,
    pub r_ood: f64,
    /// Gradient of `loss` for every predictor parameter, in
    /// [`Predictor::params`] order.
    pub grads: Vec<Tensor>,
    pub adapted_head: Dense,
}

/// Evaluates `L_cls(φ, ψ′; Q) + λ2·R_OOD(φ, ψ′; Q, O)` for one task and its
/// gradient. Transformed support copies are drawn from `aug_seed`, so the
/// value is a deterministic function of the parameters.
pub fn task_objective(
    p: &Predictor,
    pool: &LabeledPool,
    task: &MetaTask,
    transform: &dyn DomainTransform,
    cfg: &MetaConfig,
    aug_seed: u64,
) -> Result<TaskOutcome> {
    if task.query.is_empty() || task.ood.is_empty() {
        return Err(Error::Empty("task query or pseudo-OOD set".into()));
    }
    let mut aug_rng = seeded(aug_seed);
    let x_s = pool.rows(&task.support);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xs = g.constant(x_s.clone());
    let z_s = vars.featurize(&mut g, xs)?;
    let mut z_aug = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let xa = g.constant(augment_rows(transform, &x_s, &mut aug_rng)?);
        z_aug.push(vars.featurize(&mut g, xa)?);
    }
    let (head, inner) = inner_adapt_graph(
        &mut g,
        vars.head,
        z_s,
        &z_aug,
        &pool.labels(&task.support),
        &task.keep,
        cfg,
    )?;

    let xq = g.constant(pool.rows(&task.query));
    let zq = vars.featurize(&mut g, xq)?;
    let lq = logits_graph(&mut g, head, zq, Some(&task.keep))?;
    let ce = cross_entropy_graph(&mut g, lq, &pool.labels(&task.query))?;
    let xo = g.constant(pool.rows(&task.ood));
    let zo = vars.featurize(&mut g, xo)?;
    let lo = logits_graph(&mut g, head, zo, Some(&task.keep))?;
    let eq = energy_graph(&mut g, lq, cfg.energy.temperature)?;
    let eo = energy_graph(&mut g, lo, cfg.energy.temperature)?;
    let rood = r_ood_graph(&mut g, eq, Some(eo), &cfg.energy)?;
    let loss = if cfg.lambda_ood != 0.0 {
        let weighted = g.scale(rood, cfg.lambda_ood)?;
        g.add(ce, weighted)?
    } else {
        ce
    };
    let grads = g.backward(loss)?;
    let value = |v: Var| g.value(v).data()[0];
    Ok(TaskOutcome {
        loss: value(loss),
        l_cls: value(ce),
        r_gi: inner.first().map_or(0.0, |s| s.r_gi),
        r_ood: value(rood),
        grads: vars.all().into_iter().map(|v| grads.wrt(v)).collect(),
        adapted_head: Dense {
            weight: g.value(head.weight).clone(),
            bias: g.value(head.bias).clone(),
        },
    })
}

/// The adapted head `ψ′` of one task, evaluated without the outer pass.
pub fn inner_adapt<R: Rng + ?Sized>(
    p: &Predictor,
    pool: &LabeledPool,
    task: &MetaTask,
    transform: &dyn DomainTransform,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<(Dense, Vec<InnerStats>)> {
    let x_s = pool.rows(&task.support);
    let z = p.featurize(&x_s)?;
    let mut g = Graph::new();
    let hv = p.head.bind(&mut g);
    let zs = g.constant(z);
    let mut z_aug = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        z_aug.push(g.constant(p.featurize(&augment_rows(transform, &x_s, rng)?)?));
    }
    let (head, stats) = inner_adapt_graph(&mut g, hv, zs, &z_aug, &pool.labels(&task.support), &task.keep, cfg)?;
    if stats.iter().any(|s| !s.l_cls.is_finite()) {
        return Err(Error::NonFinite("inner loss".into()));
    }
    Ok((
        Dense {
            weight: g.value(head.weight).clone(),
            bias: g.value(head.bias).clone(),
        },
        stats,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepStats {
    pub per_task: Vec<TaskOutcomeStats>,
    pub outer_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskOutcomeStats {
    pub l_cls: f64,
    pub r_gi: f64,
    pub r_ood: f64,
}

impl MetaStepStats {
    fn mean(&self, f: impl Fn(&TaskOutcomeStats) -> f64) -> f64 {
        self.per_task.iter().map(f).sum::<f64>() / self.per_task.len() as f64
    }

    pub fn mean_l_cls(&self) -> f64 {
        self.mean(|t| t.l_cls)
    }

    pub fn mean_r_gi(&self) -> f64 {
        self.mean(|t| t.r_gi)
    }

    pub fn mean_r_ood(&self) -> f64 {
        self.mean(|t| t.r_ood)
    }
}

/// One outer update from `tasks`. Task gradients are computed independently
/// and summed in task order, so the result does not depend on `cfg.execution`.
pub fn meta_step(
    p: &mut Predictor,
    optimizer: &mut Optimizer,
    pool: &LabeledPool,
    tasks: &[MetaTask],
    aug_seeds: &[u64],
    transform: &dyn DomainTransform,
    cfg: &MetaConfig,
) -> Result<MetaStepStats> {
    if tasks.len() != aug_seeds.len() {
        return Err(Error::LengthMismatch(tasks.len(), aug_seeds.len()));
    }
    let snapshot: &Predictor = p;
    let jobs: Vec<(usize, &MetaTask, u64)> = tasks
        .iter()
        .zip(aug_seeds)
        .enumerate()
        .map(|(i, (t, s))| (i, t, *s))
        .collect();
    let outcomes = exec::map(cfg.execution, &jobs, |&(i, task, seed)| {
        task_objective(snapshot, pool, task, transform, cfg, seed).map_err(|e| e.context(format!("task {i}")))
    });
    let mut total: Option<Vec<Tensor>> = None;
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut outer_loss = 0.0;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        if !outcome.loss.is_finite() || outcome.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("meta gradient of task {i}")));
        }
        outer_loss += outcome.loss;
        per_task.push(TaskOutcomeStats {
            l_cls: outcome.l_cls,
            r_gi: outcome.r_gi,
            r_ood: outcome.r_ood,
        });
        match total.as_mut() {
            None => total = Some(outcome.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&outcome.grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = total.ok_or_else(|| Error::Empty("meta batch".into()))?;
    optimizer.apply(&mut p.params_mut(), &grads)?;
    Ok(MetaStepStats { per_task, outer_loss })
}

pub fn log_line(step: usize, stats: &MetaStepStats, wall: f64) -> String {
    format!(
        "step={step} l_cls={:.6} r_gi={:.6} r_ood={:.6} outer_loss={:.6} wall_time={wall:.3}",
        stats.mean_l_cls(),
        stats.mean_r_gi(),
        stats.mean_r_ood(),
        stats.outer_loss
    )
}

/// Runs `steps` meta-updates. Tasks come from the `tasks` substream of
/// `seed`; augmentation draws from the `aug` substream.
pub fn train_meta(
    p: &mut Predictor,
    pool: &LabeledPool,
    transform: &dyn DomainTransform,
    cfg: &MetaConfig,
    steps: usize,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<MetaStepStats>> {
    let mut task_rng = substream(seed, "tasks");
    let aug_master = derive_seed(seed, "aug");
    let mut optimizer = Optimizer::new(cfg.outer_optimizer, cfg.outer_lr);
    let start = Instant::now();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let tasks = (0..cfg.tasks_per_batch)
            .map(|_| build_task(pool, cfg, &mut task_rng))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..tasks.len())
            .map(|t| derive_seed(aug_master, &format!("{step}/{t}")))
            .collect();
        let stats = meta_step(p, &mut optimizer, pool, &tasks, &seeds, transform, cfg)
            .map_err(|e| e.context(format!("meta step {step}")))?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", log_line(step, &stats, start.elapsed().as_secs_f64()))?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Head-only fine-tuning on every ID class with the featurizer frozen.
pub fn all_class_adapt(
    p: &mut Predictor,
    pool: &LabeledPool,
    transform: &dyn DomainTransform,
    cfg: &MetaConfig,
    steps: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = substream(seed, "adapt");
    let mut optimizer = Optimizer::new(cfg.adapt_optimizer, cfg.adapt_lr());
    let by_class = pool.by_class();
    for step in 0..steps {
        let mut idx = Vec::new();
        for members in by_class.iter().filter(|m| !m.is_empty()) {
            let take = cfg.shots.min(members.len());
            idx.extend(sample(&mut rng, members.len(), take).iter().map(|j| members[j]));
        }
        let x = pool.rows(&idx);
        let z = p.featurize(&x)?;
        let z_aug = p.featurize(&augment_rows(transform, &x, &mut rng)?)?;
        let mut g = Graph::new();
        let hv = p.head.bind(&mut g);
        let zc = g.constant(z);
        let l = logits_graph(&mut g, hv, zc, None)?;
        let mut loss = cross_entropy_graph(&mut g, l, &pool.labels(&idx))?;
        if cfg.lambda_gi != 0.0 && cfg.gi_space == GiSpace::Output {
            let za = g.constant(z_aug);
            let la = logits_graph(&mut g, hv, za, None)?;
            let a = g.softmax_rows(l)?;
            let c = g.softmax_rows(la)?;
            let r = gi_distance_graph(&mut g, a, c, cfg.distance)?;
            let r = g.scale(r, cfg.lambda_gi)?;
            loss = g.add(loss, r)?;
        }
        let grads = g.backward(loss)?;
        let gw = [grads.wrt(hv.weight), grads.wrt(hv.bias)];
        optimizer
            .apply(&mut [&mut p.head.weight, &mut p.head.bias], &gw)
            .map_err(|e| Error::from(e).context(format!("adapt step {step}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic, split_id_ood, SyntheticConfig, SyntheticSpec};
    use crate::transform::AffineTransform;

    fn setup(seed: u64) -> (LabeledPool, AffineTransform) {
        let cfg = SyntheticConfig {
            num_classes: 5,
            samples_per_cell: 20,
            ..SyntheticConfig::default()
        };
        let spec = SyntheticSpec::from_config(&cfg, seed).unwrap();
        let ds = gen_synthetic(&spec, seed).unwrap();
        let split = split_id_ood(&ds, 2, 4).unwrap();
        let (train, _) = LabeledPool::for_split(&ds, &split).unwrap();
        (train, spec.decoder.clone())
    }

    fn pool_with_classes(k: usize, per_class: usize) -> LabeledPool {
        let n = k * per_class;
        LabeledPool {
            x: Tensor::matrix(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap(),
            y: (0..n).map(|i| i % k).collect(),
            domain: (0..n).map(|i| i % 3).collect(),
            num_classes: k,
            class_ids: (0..k).collect(),
        }
    }

    #[test]
    fn task_counts_for_seven_classes() {
        let pool = pool_with_classes(7, 12);
        let cfg = MetaConfig::default();
        let t = build_task(&pool, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(t.retained.len(), 6);
        assert_eq!(t.pseudo_ood_classes.len(), 1);
        assert_eq!(t.support.len(), 30);
        assert_eq!(t.query.len(), 30);
        assert_eq!(t.ood.len(), 5);
        assert!(t.check_invariants(&pool.y));
    }

    #[test]
    fn sampled_tasks_are_disjoint() {
        let pool = pool_with_classes(5, 10);
        let cfg = MetaConfig {
            pseudo_ood_count: 2,
            ..MetaConfig::default()
        };
        let mut rng = seeded(1);
        for _ in 0..1000 {
            assert!(build_task(&pool, &cfg, &mut rng).unwrap().check_invariants(&pool.y));
        }
    }

    #[test]
    fn pseudo_ood_choice_differs_six_sevenths_of_the_time() {
        let pool = pool_with_classes(7, 10);
        let cfg = MetaConfig::default();
        let trials = 7000;
        let mut differ = 0;
        for i in 0..trials {
            let a = build_task(&pool, &cfg, &mut substream(i, "a")).unwrap();
            let b = build_task(&pool, &cfg, &mut substream(i, "b")).unwrap();
            differ += usize::from(a.pseudo_ood_classes != b.pseudo_ood_classes);
        }
        let p = 6.0 / 7.0;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((differ as f64 / trials as f64 - p).abs() < 4.0 * sd);
    }

    #[test]
    fn too_few_instances_names_the_class() {
        let mut pool = pool_with_classes(4, 10);
        pool.class_ids = vec![0, 1, 2, 6];
        pool.y[3] = 0;
        pool.y[7] = 0;
        match build_task(&pool, &MetaConfig::default(), &mut seeded(0)) {
            Err(Error::InsufficientInstances { class, available, .. }) => {
                assert_eq!(class, 6);
                assert_eq!(available, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
        let tiny = pool_with_classes(2, 10);
        assert!(matches!(
            build_task(&tiny, &MetaConfig::default(), &mut seeded(0)),
            Err(Error::InsufficientClasses {
                needed: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn r_ood_examples() {
        let e = EnergyParams::default();
        assert_eq!(r_ood(&[-12.0, -10.0], &[-8.0, -3.0], &e).unwrap(), 0.0);
        assert_eq!(r_ood(&[e.m_in + 1.0], &[e.m_out], &e).unwrap(), 1.0);
        assert!(r_ood(&[], &[0.0], &e).is_err());
        assert!(r_ood(&[0.0], &[], &e).is_err());
    }

    #[test]
    fn r_ood_graph_matches_scalar_loop() {
        let e = EnergyParams::default();
        let mut rng = seeded(3);
        for _ in 0..50 {
            let ein: Vec<f64> = (0..7).map(|_| rng.random_range(-14.0..-6.0)).collect();
            let eout: Vec<f64> = (0..3).map(|_| rng.random_range(-12.0..-4.0)).collect();
            let mut g = Graph::new();
            let a = g.constant(Tensor::matrix(7, 1, ein.clone()).unwrap());
            let b = g.constant(Tensor::matrix(3, 1, eout.clone()).unwrap());
            let r = r_ood_graph(&mut g, a, Some(b), &e).unwrap();
            assert!((g.value(r).data()[0] - r_ood(&ein, &eout, &e).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn gi_distance_examples() {
        let a = Tensor::matrix(2, 2, vec![0.2, 0.8, 0.2, 0.8]).unwrap();
        let c = Tensor::matrix(2, 2, vec![0.4, 0.6, 0.2, 0.8]).unwrap();
        assert!((gi_distance(&a, &c, GiDistance::L1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(gi_distance(&a, &a, GiDistance::L1).unwrap(), 0.0);
    }

    #[test]
    fn r_gi_vanishes_for_identical_pairs() {
        let (pool, _) = setup(0);
        let p = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(0));
        let x = pool.rows(&[0, 1, 2, 3]);
        for space in [GiSpace::Output, GiSpace::Feature] {
            let cfg = MetaConfig {
                gi_space: space,
                ..MetaConfig::default()
            };
            assert_eq!(r_gi(&p, &p.head, &x, &x, None, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_inner_rate_keeps_head() {
        let (pool, tf) = setup(1);
        let p = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(1));
        let cfg = MetaConfig {
            inner_lr: 0.0,
            ..MetaConfig::default()
        };
        let task = build_task(&pool, &cfg, &mut seeded(2)).unwrap();
        let (head, _) = inner_adapt(&p, &pool, &task, &tf, &cfg, &mut seeded(3)).unwrap();
        assert_eq!(head, p.head);
    }

    #[test]
    fn single_instance_update_is_softmax_minus_onehot_outer_z() {
        let (pool, tf) = setup(2);
        let p = Predictor::new(pool.dim(), &[6], pool.num_classes, &mut seeded(2));
        let cfg = MetaConfig {
            lambda_gi: 0.0,
            inner_lr: 0.5,
            ..MetaConfig::default()
        };
        let mut task = build_task(&pool, &cfg, &mut seeded(4)).unwrap();
        task.support.truncate(1);
        let (head, _) = inner_adapt(&p, &pool, &task, &tf, &cfg, &mut seeded(5)).unwrap();

        let x = pool.rows(&task.support);
        let z = p.featurize(&x).unwrap();
        let mut logits = p.logits(&x).unwrap().into_data();
        for (l, &k) in logits.iter_mut().zip(&task.keep) {
            if !k {
                *l = f64::NEG_INFINITY;
            }
        }
        crate::tensor::softmax_in_place(&mut logits);
        let y = pool.y[task.support[0]];
        for k in 0..pool.num_classes {
            let d = logits[k] - f64::from(u8::from(k == y));
            for j in 0..z.cols() {
                let expected = p.head.weight.get(k, j) - 0.5 * d * z.data()[j];
                assert!((head.weight.get(k, j) - expected).abs() < 1e-10);
            }
            assert!((head.bias.data()[k] - (p.head.bias.data()[k] - 0.5 * d)).abs() < 1e-10);
        }
    }

    #[test]
    fn recorded_inner_step_matches_autodiff_of_inner_loss() {
        let (pool, _) = setup(3);
        let p = Predictor::new(pool.dim(), &[6], pool.num_classes, &mut seeded(3));
        for distance in [GiDistance::L1, GiDistance::SquaredL2] {
            let cfg = MetaConfig {
                lambda_gi: 0.7,
                inner_lr: 0.3,
                distance,
                ..MetaConfig::default()
            };
            let task = build_task(&pool, &cfg, &mut seeded(6)).unwrap();
            let x = pool.rows(&task.support);
            let z = p.featurize(&x).unwrap();
            let za = p.featurize(&x.map(|v| v * 1.1 + 0.05)).unwrap();
            let labels = pool.labels(&task.support);

            let mut g = Graph::new();
            let hv = p.head.bind(&mut g);
            let zs = g.constant(z.clone());
            let zav = g.constant(za.clone());
            let (new_head, _) = inner_adapt_graph(&mut g, hv, zs, &[zav], &labels, &task.keep, &cfg).unwrap();

            let mut h = Graph::new();
            let hv2 = p.head.bind(&mut h);
            let zs2 = h.constant(z);
            let za2 = h.constant(za);
            let l = logits_graph(&mut h, hv2, zs2, Some(&task.keep)).unwrap();
            let la = logits_graph(&mut h, hv2, za2, Some(&task.keep)).unwrap();
            let ce = cross_entropy_graph(&mut h, l, &labels).unwrap();
            let a = h.softmax_rows(l).unwrap();
            let c = h.softmax_rows(la).unwrap();
            let r = gi_distance_graph(&mut h, a, c, distance).unwrap();
            let r = h.scale(r, 0.7).unwrap();
            let loss = h.add(ce, r).unwrap();
            let grads = h.backward(loss).unwrap();
            for (new, old, v) in [
                (new_head.weight, &p.head.weight, hv2.weight),
                (new_head.bias, &p.head.bias, hv2.bias),
            ] {
                let gv = grads.wrt(v);
                for ((n, o), d) in g.value(new).data().iter().zip(old.data()).zip(gv.data()) {
                    assert!((n - (o - 0.3 * d)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_outer_rate_keeps_parameters() {
        let (pool, tf) = setup(4);
        let mut p = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(4));
        let before = p.clone();
        let cfg = MetaConfig::default();
        let tasks: Vec<_> = (0..4)
            .map(|i| build_task(&pool, &cfg, &mut seeded(i)).unwrap())
            .collect();
        let mut opt = Optimizer::sgd(0.0);
        meta_step(&mut p, &mut opt, &pool, &tasks, &[1, 2, 3, 4], &tf, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn without_inner_steps_and_ood_weight_meta_step_is_query_sgd() {
        let (pool, tf) = setup(5);
        let mut p = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(5));
        let cfg = MetaConfig {
            lambda_ood: 0.0,
            inner_steps: 0,
            tasks_per_batch: 1,
            ..MetaConfig::default()
        };
        let task = build_task(&pool, &cfg, &mut seeded(7)).unwrap();

        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let xq = g.constant(pool.rows(&task.query));
        let zq = vars.featurize(&mut g, xq).unwrap();
        let l = logits_graph(&mut g, vars.head, zq, Some(&task.keep)).unwrap();
        let ce = cross_entropy_graph(&mut g, l, &pool.labels(&task.query)).unwrap();
        let grads = g.backward(ce).unwrap();
        let expected: Vec<Tensor> = p
            .params()
            .iter()
            .zip(vars.all())
            .map(|(w, v)| {
                let gv = grads.wrt(v);
                Tensor::new(
                    w.shape().to_vec(),
                    w.data().iter().zip(gv.data()).map(|(a, d)| a - 0.05 * d).collect(),
                )
                .unwrap()
            })
            .collect();

        let mut opt = Optimizer::sgd(0.05);
        meta_step(&mut p, &mut opt, &pool, &[task], &[0], &tf, &cfg).unwrap();
        for (got, want) in p.params().iter().zip(&expected) {
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn meta_step_is_independent_of_execution_strategy() {
        let (pool, tf) = setup(6);
        let base = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(6));
        let mut results = Vec::new();
        for execution in [Execution::Sequential, Execution::Parallel] {
            let cfg = MetaConfig {
                execution,
                outer_lr: 0.01,
                ..MetaConfig::default()
            };
            let mut p = base.clone();
            let history = train_meta(&mut p, &pool, &tf, &cfg, 3, 11, None).unwrap();
            results.push((p, history));
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn adaptation_freezes_featurizer() {
        let (pool, tf) = setup(7);
        let mut p = Predictor::new(pool.dim(), &[8], pool.num_classes, &mut seeded(7));
        let before = p.clone();
        let cfg = MetaConfig {
            adapt_lr: Some(0.1),
            ..MetaConfig::default()
        };
        all_class_adapt(&mut p, &pool, &tf, &cfg, 0, 1).unwrap();
        assert_eq!(p, before);
        all_class_adapt(&mut p, &pool, &tf, &cfg, 20, 1).unwrap();
        assert_eq!(p.featurizer_checksum(), before.featurizer_checksum());
        assert_ne!(p.head, before.head);
    }

    #[test]
    fn log_line_is_key_value() {
        let stats = MetaStepStats {
            per_task: vec![TaskOutcomeStats {
                l_cls: 1.0,
                r_gi: 0.5,
                r_ood: 0.25,
            }],
            outer_loss: 1.025,
        };
        let line = log_line(3, &stats, 0.5);
        let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["step", "l_cls", "r_gi", "r_ood", "outer_loss", "wall_time"]);
    }
}
