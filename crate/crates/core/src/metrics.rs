//! Binary classification metrics and model evaluation.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{batch_tensors, SyntheticPairSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{kernels, Element};

/// Which forward path evaluation and training drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewMode {
    /// Two-view forward over (cc, mlo).
    Pair,
    /// Single-view baseline over the cc view only.
    Single,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub auc: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney normalization via average ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dim(format!(
            "scores length {} vs labels length {}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in AUC input".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average rank per tie group, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of correct decisions at the given probability threshold
/// (score >= threshold means positive).
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels.iter())
        .filter(|(&s, &l)| (s >= threshold) as u8 == l)
        .count();
    correct as f64 / scores.len() as f64
}

const EVAL_BATCH: usize = 64;

/// Model logits over the selected pairs, in the order given. Batches run
/// in parallel; results are collected back in order.
pub fn logit_subset<E: Element>(
    model: &Model<E>,
    set: &SyntheticPairSet<E>,
    indices: &[usize],
    mode: ViewMode,
) -> Result<Vec<f64>> {
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let run = |chunk: &&[usize]| -> Result<Vec<f64>> {
        let (cc, mlo, _) = batch_tensors(set, chunk, None);
        let logits = match mode {
            ViewMode::Pair => model.forward_pair(&cc, &mlo)?,
            ViewMode::Single => model.forward_single(&cc)?,
        };
        Ok(logits.data().iter().map(|&z| z.as_f64()).collect())
    };
    #[cfg(feature = "parallel")]
    let per_chunk: Vec<Vec<f64>> = chunks.par_iter().map(run).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let per_chunk: Vec<Vec<f64>> = chunks.iter().map(run).collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Sigmoid scores of the model over every pair in the set, in order.
pub fn score_set<E: Element>(
    model: &Model<E>,
    set: &SyntheticPairSet<E>,
    mode: ViewMode,
) -> Result<Vec<f64>> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let logits = logit_subset(model, set, &indices, mode)?;
    Ok(logits.into_iter().map(kernels::sigmoid).collect())
}

/// AUC, accuracy at the threshold, and mean binary cross-entropy over the
/// selected pairs.
pub fn evaluate_subset<E: Element>(
    model: &Model<E>,
    set: &SyntheticPairSet<E>,
    indices: &[usize],
    threshold: f64,
    mode: ViewMode,
) -> Result<Metrics> {
    let logits = logit_subset(model, set, indices, mode)?;
    let scores: Vec<f64> = logits.iter().copied().map(kernels::sigmoid).collect();
    let labels: Vec<u8> = indices.iter().map(|&i| set.pairs[i].label).collect();
    let mut loss = 0.0f64;
    for (&z, &y) in logits.iter().zip(labels.iter()) {
        loss += if y == 1 {
            kernels::softplus(-z)
        } else {
            kernels::softplus(z)
        };
    }
    loss /= logits.len() as f64;
    Ok(Metrics {
        auc: auc(&scores, &labels)?,
        accuracy: accuracy(&scores, &labels, threshold),
        loss,
        n: indices.len(),
    })
}

/// [`evaluate_subset`] over the whole set.
pub fn evaluate<E: Element>(
    model: &Model<E>,
    set: &SyntheticPairSet<E>,
    threshold: f64,
    mode: ViewMode,
) -> Result<Metrics> {
    let indices: Vec<usize> = (0..set.len()).collect();
    evaluate_subset(model, set, &indices, threshold, mode)
}
