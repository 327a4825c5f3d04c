//! Post-hoc OOD scores, all oriented so that higher means more OOD.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledPool;
use crate::error::{Error, Result};
use crate::gda::{fit_gda, GdaModel, Ridge};
use crate::model::{energy_of_logits, Predictor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Msp,
    Energy,
    Ddu,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Msp, DetectorKind::Energy, DetectorKind::Ddu];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Energy => "energy",
            DetectorKind::Ddu => "ddu",
        }
    }
}

/// Which feature-space density DDU reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DduDensity {
    #[default]
    MaxConditional,
    Marginal,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub kind: DetectorKind,
    pub temperature: f64,
    pub density: DduDensity,
    gda: Option<GdaModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Id,
    Ood,
}

/// Feature-space GDA over ID training rows.
pub fn fit_ddu(p: &Predictor, pool: &LabeledPool, ridge: Ridge) -> Result<GdaModel> {
    fit_gda(&p.featurize(&pool.x)?, &pool.y, ridge)
}

pub fn msp_score(logits: &[f64]) -> f64 {
    let mut probs = logits.to_vec();
    crate::tensor::softmax_in_place(&mut probs);
    -probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    energy_of_logits(logits, temperature)
}

impl Detector {
    pub fn new(kind: DetectorKind, temperature: f64) -> Self {
        Self {
            kind,
            temperature,
            density: DduDensity::default(),
            gda: None,
        }
    }

    pub fn with_gda(mut self, gda: GdaModel) -> Self {
        self.gda = Some(gda);
        self
    }

    pub fn with_density(mut self, density: DduDensity) -> Self {
        self.density = density;
        self
    }

    /// Builds the detector, fitting DDU on `pool` when needed.
    pub fn fit(kind: DetectorKind, p: &Predictor, pool: &LabeledPool, temperature: f64, ridge: Ridge) -> Result<Self> {
        let det = Self::new(kind, temperature);
        Ok(match kind {
            DetectorKind::Ddu => det.with_gda(fit_ddu(p, pool, ridge)?),
            _ => det,
        })
    }

    pub fn gda(&self) -> Option<&GdaModel> {
        self.gda.as_ref()
    }

    pub fn score(&self, p: &Predictor, x: &Tensor) -> Result<Vec<f64>> {
        match self.kind {
            DetectorKind::Msp => {
                let l = p.logits(x)?;
                Ok((0..l.rows()).map(|i| msp_score(l.row(i))).collect())
            }
            DetectorKind::Energy => {
                let l = p.logits(x)?;
                Ok((0..l.rows())
                    .map(|i| energy_score(l.row(i), self.temperature))
                    .collect())
            }
            DetectorKind::Ddu => {
                let gda = self.gda.as_ref().ok_or(Error::Unfitted)?;
                let z = p.featurize(x)?;
                (0..z.rows())
                    .map(|i| {
                        let s = match self.density {
                            DduDensity::MaxConditional => gda.score(z.row(i))?,
                            DduDensity::Marginal => gda.marginal_score(z.row(i))?,
                        };
                        Ok(-s)
                    })
                    .collect()
            }
        }
    }

    pub fn classify(&self, p: &Predictor, x: &Tensor, threshold: f64) -> Result<Vec<Verdict>> {
        Ok(classify_scores(&self.score(p, x)?, threshold))
    }
}

/// OOD iff score ≥ ω.
pub fn classify_scores(scores: &[f64], threshold: f64) -> Vec<Verdict> {
    scores
        .iter()
        .map(|&s| if s >= threshold { Verdict::Ood } else { Verdict::Id })
        .collect()
}
