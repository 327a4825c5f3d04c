//! Gaussian discriminant analysis: one full-covariance Gaussian per class.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Tensor};

/// Diagonal loading added to every class covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    Absolute(f64),
    /// `scale · trace(Σ) / dim`.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(1e-4)
    }
}

#[derive(Clone, Debug)]
pub struct GdaModel {
    classes: Vec<usize>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_dets: Vec<f64>,
    log_priors: Vec<f64>,
    dim: usize,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fits one Gaussian per distinct label in `labels`, with MLE covariances.
pub fn fit_gda(x: &Tensor, labels: &[usize], ridge: Ridge) -> Result<GdaModel> {
    if x.rows() != labels.len() {
        return Err(Error::LengthMismatch(x.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("GDA training set".into()));
    }
    let dim = x.cols();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let n = labels.len() as f64;
    let mut model = GdaModel {
        classes: classes.clone(),
        means: Vec::new(),
        covariances: Vec::new(),
        factors: Vec::new(),
        log_dets: Vec::new(),
        log_priors: Vec::new(),
        dim,
    };
    for &c in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.len() < dim + 1 {
            return Err(Error::InsufficientInstances {
                class: c,
                available: rows.len(),
                needed: dim + 1,
            });
        }
        let m = rows.len() as f64;
        let mut mean = DVector::zeros(dim);
        for &i in &rows {
            mean += DVector::from_column_slice(x.row(i));
        }
        mean /= m;
        let mut cov = DMatrix::zeros(dim, dim);
        for &i in &rows {
            let d = DVector::from_column_slice(x.row(i)) - &mean;
            cov.ger(1.0 / m, &d, &d, 1.0);
        }
        let r = match ridge {
            Ridge::Absolute(v) => v,
            Ridge::TraceScaled(s) => s * cov.trace() / dim as f64,
        };
        for j in 0..dim {
            cov[(j, j)] += r;
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance { class: c })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularCovariance { class: c });
        }
        model.means.push(mean);
        model.covariances.push(cov);
        model.factors.push(chol);
        model.log_dets.push(log_det);
        model.log_priors.push((m / n).ln());
    }
    Ok(model)
}

impl GdaModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    pub fn prior(&self, k: usize) -> f64 {
        self.log_priors[k].exp()
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim {
            return Err(Error::Dimension {
                what: "GDA input",
                expected: self.dim,
                actual: s.len(),
            });
        }
        Ok(())
    }

    /// `log N(s; μ_k, Σ_k)` for the `k`-th fitted class.
    pub fn log_density(&self, k: usize, s: &[f64]) -> Result<f64> {
        self.check(s)?;
        let d = DVector::from_column_slice(s) - &self.means[k];
        let y = self.factors[k]
            .l_dirty()
            .solve_lower_triangular(&d)
            .ok_or(Error::SingularCovariance { class: self.classes[k] })?;
        Ok(-0.5 * (self.dim as f64 * LN_2PI + self.log_dets[k] + y.norm_squared()))
    }

    /// Max class-conditional log-density.
    pub fn score(&self, s: &[f64]) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for k in 0..self.classes.len() {
            best = best.max(self.log_density(k, s)?);
        }
        Ok(best)
    }

    /// Prior-weighted log marginal density `log Σ_k π_k N(s; μ_k, Σ_k)`.
    pub fn marginal_score(&self, s: &[f64]) -> Result<f64> {
        let terms = (0..self.classes.len())
            .map(|k| Ok(self.log_priors[k] + self.log_density(k, s)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(logsumexp(&terms))
    }

    pub fn score_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.score(x.row(i))).collect()
    }
}

/// Alias used by the pseudo-OOD filter.
pub fn gda_score(model: &GdaModel, s: &[f64]) -> Result<f64> {
    model.score(s)
}

/// Empirical `q`-quantile (`q` in `[0, 1]`) with linear interpolation.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}
