//! Private-label recovery from shared gradients.
//!
//! With cross-entropy and a non-negative penultimate representation, the
//! single-sample ground-truth label is the unique classification-head row
//! whose weight gradient has non-positive inner product with every other
//! row. Batches under the unique-label assumption reuse the same negative
//! signal per class; label mapping reclassifies a coarse reconstruction to
//! repair class conditioning when the generator label space differs.

use crate::error::{Error, Result};
use crate::models::{classifier_forward, Classifier};
use crate::tensor::{GradientSet, ImageBatch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMethod {
    ExtractedSingle,
    InferredBatch,
    Mapped,
    Given,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEstimate {
    pub labels: Vec<usize>,
    pub method: LabelMethod,
    pub confidence_note: String,
}

/// Single-sample label extraction from the FC weight gradient: the row
/// whose inner product with every other row is non-positive.
///
/// Falls back to the most-negative row-sum with a low-confidence note when
/// no row qualifies (defended or otherwise perturbed gradients).
pub fn extract_single_label(g: &GradientSet, fc_layer: &str) -> Result<LabelEstimate> {
    let wt = g
        .entries
        .iter()
        .find(|(n, _)| n == fc_layer)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::UnknownLeaf(fc_layer.to_string()))?;
    if wt.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "FC layer '{fc_layer}' must be 2-D, got {:?}",
            wt.shape()
        )));
    }
    let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
    let row = |i: usize| &wt.data()[i * cols..(i + 1) * cols];

    let mut winners = Vec::new();
    for i in 0..rows {
        let mut ok = true;
        for j in 0..rows {
            if i == j {
                continue;
            }
            let dot: f64 =
                row(i).iter().zip(row(j)).map(|(a, b)| *a as f64 * *b as f64).sum();
            if dot > 0.0 {
                ok = false;
                break;
            }
        }
        if ok {
            winners.push(i);
        }
    }
    if winners.len() == 1 {
        return Ok(LabelEstimate {
            labels: vec![winners[0]],
            method: LabelMethod::ExtractedSingle,
            confidence_note: "negative inner-product condition held".into(),
        });
    }
    // fallback: most negative row sum
    let sums: Vec<f64> =
        (0..rows).map(|i| row(i).iter().map(|&v| v as f64).sum::<f64>()).collect();
    let best = (0..rows)
        .min_by(|&a, &b| sums[a].partial_cmp(&sums[b]).unwrap().then(a.cmp(&b)))
        .expect("at least one class");
    Ok(LabelEstimate {
        labels: vec![best],
        method: LabelMethod::ExtractedSingle,
        confidence_note: format!(
            "low confidence: {} rows met the condition; fell back to argmin row sum",
            winners.len()
        ),
    })
}

/// Batch label inference under the no-duplicate-labels assumption: take the
/// `batch` classes whose FC weight-gradient rows carry the most negative
/// minimum entry.
pub fn infer_batch_labels(g: &GradientSet, fc_layer: &str, batch: usize) -> Result<LabelEstimate> {
    let wt = g
        .entries
        .iter()
        .find(|(n, _)| n == fc_layer)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::UnknownLeaf(fc_layer.to_string()))?;
    let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
    if batch > rows {
        return Err(Error::InvalidArgument(format!(
            "cannot infer {batch} unique labels from {rows} classes"
        )));
    }
    let stat: Vec<f64> = (0..rows)
        .map(|i| {
            wt.data()[i * cols..(i + 1) * cols]
                .iter()
                .fold(f64::MAX, |m, &v| m.min(v as f64))
        })
        .collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| stat[a].partial_cmp(&stat[b]).unwrap().then(a.cmp(&b)));
    let mut labels: Vec<usize> = order.into_iter().take(batch).collect();
    labels.sort_unstable();
    Ok(LabelEstimate {
        labels,
        method: LabelMethod::InferredBatch,
        confidence_note: "negative-signal heuristic; exact only for B=1".into(),
    })
}

/// Semantic remapping: classify a coarse reconstruction with a model
/// trained on the generator's data distribution.
pub fn map_label(coarse: &ImageBatch, mapper: &Classifier) -> Result<LabelEstimate> {
    let logits = classifier_forward(mapper, coarse)?;
    let l = mapper.num_classes;
    let labels = (0..coarse.batch_size())
        .map(|b| {
            let row = &logits.data()[b * l..(b + 1) * l];
            row.iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
                .unwrap()
                .0
        })
        .collect();
    Ok(LabelEstimate {
        labels,
        method: LabelMethod::Mapped,
        confidence_note: "argmax of mapping classifier".into(),
    })
}
