//! Single-loop primal-dual training. The loss is
//! `L_cls + β1·R_SGI + β2·R_OOD`, where the multipliers follow clamped
//! dual ascent on the constraint slacks and the pseudo-OOD set comes from
//! density-filtered semantic mixup.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledPool;
use crate::error::{Error, Result};
use crate::gda::{fit_gda, quantile, GdaModel, Ridge};
use crate::meta::{gi_distance_graph, r_ood_graph, GiDistance};
use crate::model::{cross_entropy_graph, energy_graph, logits_graph, EnergyParams, Predictor};
use crate::rng::substream;
use crate::tensor::{Graph, Optimizer, OptimizerKind, Tensor};
use crate::transform::{augment_rows, encode_semantic_rows, sample_variation, DomainTransform};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualState {
    pub beta_sgi: f64,
    pub beta_ood: f64,
    pub gamma_sgi: f64,
    pub gamma_ood: f64,
    pub lr_sgi: f64,
    pub lr_ood: f64,
}

impl Default for DualState {
    fn default() -> Self {
        Self {
            beta_sgi: 0.0,
            beta_ood: 0.0,
            gamma_sgi: 0.1,
            gamma_ood: 1.0,
            lr_sgi: 0.05,
            lr_ood: 0.01,
        }
    }
}

/// `β ← max(0, β + η·(R − γ))` for both constraints.
pub fn dual_update(state: &DualState, r_sgi: f64, r_ood: f64) -> Result<DualState> {
    if !(r_sgi.is_finite() && r_ood.is_finite()) {
        return Err(Error::NonFinite("dual update input".into()));
    }
    Ok(DualState {
        beta_sgi: (state.beta_sgi + state.lr_sgi * (r_sgi - state.gamma_sgi)).max(0.0),
        beta_ood: (state.beta_ood + state.lr_ood * (r_ood - state.gamma_ood)).max(0.0),
        ..*state
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    pub primal_lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub state: DualState,
    pub energy: EnergyParams,
    pub distance: GiDistance,
    pub mix_a: f64,
    pub mix_b: f64,
    /// Fixed density threshold; when unset, the `xi_quantile` of training
    /// semantic scores is used.
    pub xi: Option<f64>,
    pub xi_quantile: f64,
    pub ridge: Ridge,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            primal_lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 32,
            state: DualState::default(),
            energy: EnergyParams::default(),
            distance: GiDistance::L1,
            mix_a: 0.5,
            mix_b: 0.5,
            xi: None,
            xi_quantile: 0.01,
            ridge: Ridge::default(),
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.state;
        if !(self.primal_lr > 0.0 && s.lr_sgi >= 0.0 && s.lr_ood >= 0.0) {
            return Err(Error::Config("dual-train learning rates must be positive".into()));
        }
        if !(s.beta_sgi >= 0.0 && s.beta_ood >= 0.0) {
            return Err(Error::Config("dual variables must start nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.xi_quantile) {
            return Err(Error::Config("xi_quantile must lie in [0, 1]".into()));
        }
        self.energy.validate()
    }
}

/// Accepted pseudo-OOD rows plus filter bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupOutcome {
    pub x: Tensor,
    pub proposed: usize,
    /// Density score of every accepted mixed semantic code.
    pub scores: Vec<f64>,
}

impl MixupOutcome {
    pub fn accepted(&self) -> usize {
        self.x.rows()
    }
}

/// For each batch row `i`, mixes its semantic code with a partner of a
/// different label, keeps the mix if its density score is below `xi`, and
/// decodes it under a fresh variation draw.
#[allow(clippy::too_many_arguments)]
pub fn mixup_pseudo_ood<R: Rng + ?Sized>(
    batch: &[usize],
    pool: &LabeledPool,
    transform: &dyn DomainTransform,
    gda: &GdaModel,
    xi: f64,
    mix_a: f64,
    mix_b: f64,
    rng: &mut R,
) -> Result<MixupOutcome> {
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    let mut proposed = 0;
    for &i in batch {
        let yi = pool.y[i];
        if pool.y.iter().all(|&y| y == yi) {
            continue;
        }
        let j = loop {
            let j = rng.random_range(0..pool.len());
            if pool.y[j] != yi {
                break j;
            }
        };
        proposed += 1;
        let si = transform.encode_semantic(pool.x.row(i));
        let sj = transform.encode_semantic(pool.x.row(j));
        let mixed: Vec<f64> = si.iter().zip(&sj).map(|(a, b)| mix_a * a + mix_b * b).collect();
        let score = gda.score(&mixed)?;
        if score < xi {
            let v = sample_variation(transform, rng);
            rows.push(transform.decode(&mixed, &v));
            scores.push(score);
        }
    }
    let x = if rows.is_empty() {
        Tensor::zeros(&[0, pool.dim()])
    } else {
        Tensor::from_rows(&rows)?
    };
    Ok(MixupOutcome { x, proposed, scores })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualStepStats {
    pub l_cls: f64,
    pub r_sgi: f64,
    pub r_ood: f64,
    pub loss: f64,
    pub beta_sgi: f64,
    pub beta_ood: f64,
    pub pseudo_ood: usize,
}

/// One Adam step on `L_cls + β1·R_SGI + β2·R_OOD`, then the dual update
/// from the regularizer values seen by that step. An empty pseudo-OOD set
/// leaves only the ID term of `R_OOD`.
#[allow(clippy::too_many_arguments)]
pub fn dual_train_step(
    p: &mut Predictor,
    optimizer: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    x_aug: &Tensor,
    pseudo_ood: &Tensor,
    state: &mut DualState,
    cfg: &DualConfig,
) -> Result<DualStepStats> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let z = vars.featurize(&mut g, xv)?;
    let l = logits_graph(&mut g, vars.head, z, None)?;
    let ce = cross_entropy_graph(&mut g, l, labels)?;
    let xa = g.constant(x_aug.clone());
    let za = vars.featurize(&mut g, xa)?;
    let sgi = gi_distance_graph(&mut g, z, za, cfg.distance)?;
    let e_in = energy_graph(&mut g, l, cfg.energy.temperature)?;
    let e_out = if pseudo_ood.rows() > 0 {
        let xo = g.constant(pseudo_ood.clone());
        let zo = vars.featurize(&mut g, xo)?;
        let lo = logits_graph(&mut g, vars.head, zo, None)?;
        Some(energy_graph(&mut g, lo, cfg.energy.temperature)?)
    } else {
        None
    };
    let rood = r_ood_graph(&mut g, e_in, e_out, &cfg.energy)?;
    let mut loss = ce;
    if state.beta_sgi != 0.0 {
        let t = g.scale(sgi, state.beta_sgi)?;
        loss = g.add(loss, t)?;
    }
    if state.beta_ood != 0.0 {
        let t = g.scale(rood, state.beta_ood)?;
        loss = g.add(loss, t)?;
    }
    let value = |v| g.value(v).data()[0];
    let (l_cls, r_sgi, r_ood, total) = (value(ce), value(sgi), value(rood), value(loss));
    if !total.is_finite() {
        return Err(Error::NonFinite("dual-train loss".into()));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    optimizer.apply(&mut p.params_mut(), &grads)?;
    *state = dual_update(state, r_sgi, r_ood)?;
    Ok(DualStepStats {
        l_cls,
        r_sgi,
        r_ood,
        loss: total,
        beta_sgi: state.beta_sgi,
        beta_ood: state.beta_ood,
        pseudo_ood: pseudo_ood.rows(),
    })
}

pub fn log_line(step: usize, s: &DualStepStats, wall: f64) -> String {
    format!(
        "step={step} l_cls={:.6} r_sgi={:.6} r_ood={:.6} outer_loss={:.6} beta1={:.6} beta2={:.6} pseudo_ood={} wall_time={wall:.3}",
        s.l_cls, s.r_sgi, s.r_ood, s.loss, s.beta_sgi, s.beta_ood, s.pseudo_ood
    )
}

/// Semantic-space density filter fitted on the training pool, with its
/// acceptance threshold.
pub fn fit_filter(pool: &LabeledPool, transform: &dyn DomainTransform, cfg: &DualConfig) -> Result<(GdaModel, f64)> {
    let s = encode_semantic_rows(transform, &pool.x)?;
    let gda = fit_gda(&s, &pool.y, cfg.ridge)?;
    let xi = match cfg.xi {
        Some(v) => v,
        None => quantile(&gda.score_rows(&s)?, cfg.xi_quantile)?,
    };
    Ok((gda, xi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualHistory {
    pub steps: Vec<DualStepStats>,
    pub state: DualState,
}

pub fn train_dual(
    p: &mut Predictor,
    pool: &LabeledPool,
    transform: &dyn DomainTransform,
    cfg: &DualConfig,
    steps: usize,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<DualHistory> {
    if pool.is_empty() {
        return Err(Error::Empty("dual-train pool".into()));
    }
    let (gda, xi) = fit_filter(pool, transform, cfg)?;
    let mut batch_rng = substream(seed, "batches");
    let mut aug_rng = substream(seed, "aug");
    let mut mix_rng = substream(seed, "mixup");
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.primal_lr);
    let mut state = cfg.state;
    let start = Instant::now();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample(&mut batch_rng, pool.len(), cfg.batch_size.min(pool.len())).into_vec();
        let x = pool.rows(&batch);
        let x_aug = augment_rows(transform, &x, &mut aug_rng)?;
        let mix = mixup_pseudo_ood(&batch, pool, transform, &gda, xi, cfg.mix_a, cfg.mix_b, &mut mix_rng)?;
        let stats = dual_train_step(
            p,
            &mut optimizer,
            &x,
            &pool.labels(&batch),
            &x_aug,
            &mix.x,
            &mut state,
            cfg,
        )
        .map_err(|e| e.context(format!("dual step {step}")))?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", log_line(step, &stats, start.elapsed().as_secs_f64()))?;
        }
        history.push(stats);
    }
    Ok(DualHistory { steps: history, state })
}
