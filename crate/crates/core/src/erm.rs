//! Cross-entropy-only baseline: minibatch training on every ID class.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledPool;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_graph, logits_graph, Predictor};
use crate::rng::substream;
use crate::tensor::{Graph, Optimizer, OptimizerKind, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErmConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
}

impl Default for ErmConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            batch_size: 32,
        }
    }
}

impl ErmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("ce_only needs a positive lr and batch_size".into()));
        }
        Ok(())
    }
}

/// Returns the per-step training loss.
pub fn train_erm(
    p: &mut Predictor,
    pool: &LabeledPool,
    cfg: &ErmConfig,
    steps: usize,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Empty("ce_only pool".into()));
    }
    let mut rng = substream(seed, "batches");
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sample(&mut rng, pool.len(), cfg.batch_size.min(pool.len())).into_vec();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(pool.rows(&batch));
        let z = vars.featurize(&mut g, x)?;
        let l = logits_graph(&mut g, vars.head, z, None)?;
        let loss = cross_entropy_graph(&mut g, l, &pool.labels(&batch))?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
        optimizer
            .apply(&mut p.params_mut(), &grads)
            .map_err(|e| Error::from(e).context(format!("ce_only step {step}")))?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "step={step} l_cls={value:.6} wall_time={:.3}",
                start.elapsed().as_secs_f64()
            )?;
        }
        losses.push(value);
    }
    Ok(losses)
}
