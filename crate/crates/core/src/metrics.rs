//! Ranking metrics with OOD as the positive class, and accuracy.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_ood: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_ood: bool) -> Self {
        Self { score, is_ood }
    }
}

/// Labels ID scores `false` and OOD scores `true`.
pub fn scored(id: &[f64], ood: &[f64]) -> Vec<ScoredSample> {
    id.iter()
        .map(|&s| ScoredSample::new(s, false))
        .chain(ood.iter().map(|&s| ScoredSample::new(s, true)))
        .collect()
}

fn counts(samples: &[ScoredSample]) -> Result<(u64, u64)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite(format!("metric score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.is_ood).count() as u64;
    Ok((pos, samples.len() as u64 - pos))
}

/// Sorted copy with tie groups as `(start, end)` ranges.
fn tie_groups(samples: &[ScoredSample], descending: bool) -> (Vec<ScoredSample>, Vec<(usize, usize)>) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| {
        if descending {
            b.score.total_cmp(&a.score)
        } else {
            a.score.total_cmp(&b.score)
        }
    });
    let mut groups = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end].score == sorted[start].score {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (sorted, groups)
}

/// `P(score_OOD > score_ID) + ½·P(tie)` via midrank sums. Ranks are kept
/// doubled so the statistic is an exact integer until the final division.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = counts(samples)?;
    if pos == 0 || neg == 0 {
        return Err(Error::MissingClass(if pos == 0 { "OOD" } else { "ID" }));
    }
    let (sorted, groups) = tie_groups(samples, false);
    let mut doubled_rank_sum: u64 = 0;
    for (start, end) in groups {
        // Doubled midrank of 1-based ranks start+1..=end.
        let doubled_mid = (start + 1 + end) as u64;
        let ood_here = sorted[start..end].iter().filter(|s| s.is_ood).count() as u64;
        doubled_rank_sum += doubled_mid * ood_here;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision with OOD as positive. Each distinct score is one
/// threshold; recall steps are weighted by the precision at that threshold.
pub fn aupr_out(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, _) = counts(samples)?;
    if pos == 0 {
        return Err(Error::MissingClass("OOD"));
    }
    let (sorted, groups) = tie_groups(samples, true);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (start, end) in groups {
        let dtp = sorted[start..end].iter().filter(|s| s.is_ood).count() as u64;
        tp += dtp;
        fp += (end - start) as u64 - dtp;
        ap += precision_step(dtp, tp, fp, pos);
    }
    Ok(ap)
}

/// `(ΔTP / P) · TP / (TP + FP)`, shared with the exhaustive oracle so both
/// perform identical arithmetic.
pub fn precision_step(dtp: u64, tp: u64, fp: u64, pos: u64) -> f64 {
    if dtp == 0 {
        return 0.0;
    }
    (dtp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch(preds.len(), truth.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy input".into()));
    }
    let hits = preds.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}
