//! Attack-side objective: gradient distance metrics, fidelity
//! regularization, and inference plus replay of the client's gradient
//! transformation so dummy gradients stay comparable to defended
//! observations.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::{GradientSet, ImageBatch, TensorF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    NegCosine,
    L2,
}

/// The attacker's estimate of the defense the client applied.
#[derive(Debug, Clone, PartialEq)]
pub enum InferredTransform {
    Identity,
    /// Per-layer clip bounds in gradient leaf order.
    Clip { bounds: Vec<f32> },
    /// Per-layer keep masks (1 keeps, 0 zeroes) in leaf order.
    Sparsify { masks: Vec<TensorF> },
    /// Mask on a single defended layer.
    Soteria { layer: String, mask: TensorF },
}

impl InferredTransform {
    pub fn kind(&self) -> &'static str {
        match self {
            InferredTransform::Identity => "identity",
            InferredTransform::Clip { .. } => "clip",
            InferredTransform::Sparsify { .. } => "sparsify",
            InferredTransform::Soteria { .. } => "soteria",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchObjective {
    pub distance: DistanceMetric,
    pub alpha_tv: f32,
    pub alpha_l2: f32,
    pub transform: InferredTransform,
    /// Average the cosine distance per layer instead of globally.
    pub layer_weighted: bool,
}

impl MatchObjective {
    pub fn new(distance: DistanceMetric, alpha_tv: f32, alpha_l2: f32) -> Self {
        assert!(alpha_tv >= 0.0 && alpha_l2 >= 0.0, "weights must be non-negative");
        Self { distance, alpha_tv, alpha_l2, transform: InferredTransform::Identity, layer_weighted: false }
    }
}

/// Distance between two gradient sets, flattened and concatenated.
pub fn grad_distance(a: &GradientSet, b: &GradientSet, metric: DistanceMetric) -> Result<f64> {
    a.check_same_layout(b)?;
    match metric {
        DistanceMetric::L2 => {
            let mut acc = 0.0_f64;
            for ((_, ta), (_, tb)) in a.entries.iter().zip(&b.entries) {
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    let d = *x as f64 - *y as f64;
                    acc += d * d;
                }
            }
            Ok(acc)
        }
        DistanceMetric::NegCosine => {
            let (mut dot, mut na, mut nb) = (0.0_f64, 0.0_f64, 0.0_f64);
            for ((_, ta), (_, tb)) in a.entries.iter().zip(&b.entries) {
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    dot += *x as f64 * *y as f64;
                    na += *x as f64 * *x as f64;
                    nb += *y as f64 * *y as f64;
                }
            }
            if na == 0.0 || nb == 0.0 {
                log::warn!("zero-norm gradient in cosine distance; returning 1");
                return Ok(1.0);
            }
            Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
        }
    }
}

/// Anisotropic total variation: absolute forward differences along both
/// spatial axes, summed per channel.
pub fn total_variation(x: &TensorF) -> f64 {
    let s = x.shape();
    assert_eq!(s.len(), 4, "total variation expects [B, C, H, W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut acc = 0.0_f64;
    for bc in 0..b * c {
        let base = bc * h * w;
        for i in 0..h {
            for j in 0..w {
                let v = x.data()[base + i * w + j] as f64;
                if j + 1 < w {
                    acc += (x.data()[base + i * w + j + 1] as f64 - v).abs();
                }
                if i + 1 < h {
                    acc += (x.data()[base + (i + 1) * w + j] as f64 - v).abs();
                }
            }
        }
    }
    acc
}

/// Fidelity regularization: alpha_l2 * ||x||^2 + alpha_tv * TV(x).
pub fn fidelity_reg(x: &ImageBatch, alpha_tv: f32, alpha_l2: f32) -> f64 {
    let sq: f64 = x.pixels.data().iter().map(|&v| v as f64 * v as f64).sum();
    alpha_l2 as f64 * sq + alpha_tv as f64 * total_variation(&x.pixels)
}

/// Relative tolerance when deciding that several layer norms share a bound.
const CLIP_DETECT_REL: f64 = 1e-4;
/// Minimum number of binding layers before clipping is inferred.
const CLIP_DETECT_MIN_LAYERS: usize = 2;
/// Zero fraction beyond which a layer counts as sparsified.
const SPARSE_DETECT_THRESHOLD: f64 = 0.3;
/// Zero fraction on the FC head that flags a Soteria mask. Higher than the
/// sparsity threshold because rectified nets shed natural zeros into the
/// head's gradient columns for dead features.
const SOTERIA_DETECT_THRESHOLD: f64 = 0.5;

/// Estimate the defense from received gradients.
///
/// Sparsification prunes every layer, so it is flagged when all layers
/// carry excess exact zeros. A heavy zero fraction confined to the FC head
/// while some layer stays dense is a Soteria signature. Several layers
/// sharing the maximal norm mean clipping. Anything else is identity —
/// rectified networks produce structural zeros (dead units), which is why
/// scattered natural sparsity must not trip the detector.
pub fn infer_transform(g: &GradientSet, fc_layer: &str) -> InferredTransform {
    let zero_fraction = |t: &TensorF| -> f64 {
        if t.is_empty() {
            return 0.0;
        }
        t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.len() as f64
    };
    let fractions: Vec<f64> = g.entries.iter().map(|(_, t)| zero_fraction(t)).collect();
    let support_mask = |t: &TensorF| -> TensorF {
        TensorF::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    };

    if !fractions.is_empty() && fractions.iter().all(|&f| f > SPARSE_DETECT_THRESHOLD) {
        let masks = g.entries.iter().map(|(_, t)| support_mask(t)).collect();
        return InferredTransform::Sparsify { masks };
    }

    if let Some(idx) = g.entries.iter().position(|(n, _)| n == fc_layer) {
        let fc_sparse = fractions[idx] > SOTERIA_DETECT_THRESHOLD;
        let some_dense = fractions
            .iter()
            .enumerate()
            .any(|(i, &f)| i != idx && f <= SPARSE_DETECT_THRESHOLD);
        if fc_sparse && some_dense {
            let (name, t) = &g.entries[idx];
            return InferredTransform::Soteria { layer: name.clone(), mask: support_mask(t) };
        }
    }

    let norms: Vec<f64> = g.entries.iter().map(|(_, t)| t.norm_l2()).collect();
    if let Some(max) = norms.iter().cloned().fold(None::<f64>, |m, n| Some(m.map_or(n, |m| m.max(n)))) {
        if max > 0.0 {
            let binding = norms.iter().filter(|&&n| (n - max).abs() / max < CLIP_DETECT_REL).count();
            if binding >= CLIP_DETECT_MIN_LAYERS {
                return InferredTransform::Clip { bounds: norms.iter().map(|&n| n as f32).collect() };
            }
        }
    }
    InferredTransform::Identity
}

/// Replay an inferred defense on dummy gradients.
pub fn apply_inferred(t: &InferredTransform, g: &GradientSet) -> Result<GradientSet> {
    match t {
        InferredTransform::Identity => Ok(g.clone()),
        InferredTransform::Clip { bounds } => {
            if bounds.len() != g.entries.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} clip bounds for {} layers",
                    bounds.len(),
                    g.entries.len()
                )));
            }
            let entries = g
                .entries
                .iter()
                .zip(bounds)
                .map(|((name, t), &b)| {
                    let norm = t.norm_l2();
                    let out =
                        if norm > b as f64 { t.scale((b as f64 / norm) as f32) } else { t.clone() };
                    (name.clone(), out)
                })
                .collect();
            Ok(GradientSet::new(entries))
        }
        InferredTransform::Sparsify { masks } => {
            if masks.len() != g.entries.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} masks for {} layers",
                    masks.len(),
                    g.entries.len()
                )));
            }
            let mut entries = Vec::with_capacity(g.entries.len());
            for ((name, t), m) in g.entries.iter().zip(masks) {
                t.check_same_shape(m)?;
                let data = t.data().iter().zip(m.data()).map(|(v, k)| v * k).collect();
                entries.push((name.clone(), TensorF::new(t.shape().to_vec(), data)?));
            }
            Ok(GradientSet::new(entries))
        }
        InferredTransform::Soteria { layer, mask } => {
            let mut entries = g.entries.clone();
            let idx = entries
                .iter()
                .position(|(n, _)| n == layer)
                .ok_or_else(|| Error::UnknownLeaf(layer.clone()))?;
            entries[idx].1.check_same_shape(mask)?;
            let data = entries[idx].1.data().iter().zip(mask.data()).map(|(v, k)| v * k).collect();
            entries[idx].1 = TensorF::new(mask.shape().to_vec(), data)?;
            Ok(GradientSet::new(entries))
        }
    }
}

/// Graph-side builders used inside attack iterations, where the dummy
/// gradients are tape nodes that must stay differentiable.
pub mod graph {
    use super::*;

    /// Batch-averaged parameter-gradient nodes of the classifier's
    /// cross-entropy at `x`, differentiable with respect to `x`.
    pub fn dummy_gradients(
        g: &mut Graph,
        model: &Classifier,
        x: NodeId,
        labels: &[usize],
    ) -> Vec<NodeId> {
        let params: Vec<NodeId> =
            model.params.iter().map(|(_, t)| g.input(t.clone())).collect();
        let (logits, _) = model.build_forward(g, x, &params);
        let loss = g.cross_entropy_mean(logits, labels);
        g.backward(loss, &params)
    }

    /// Replay an inferred transform over gradient nodes.
    pub fn transform(
        g: &mut Graph,
        t: &InferredTransform,
        grads: &[NodeId],
        leaf_names: &[String],
    ) -> Vec<NodeId> {
        match t {
            InferredTransform::Identity => grads.to_vec(),
            InferredTransform::Clip { bounds } => grads
                .iter()
                .zip(bounds)
                .map(|(&gid, &b)| g.clip_to_norm(gid, b))
                .collect(),
            InferredTransform::Sparsify { masks } => grads
                .iter()
                .zip(masks)
                .map(|(&gid, m)| {
                    let mc = g.constant(m.clone());
                    g.mul(gid, mc)
                })
                .collect(),
            InferredTransform::Soteria { layer, mask } => grads
                .iter()
                .zip(leaf_names)
                .map(|(&gid, name)| {
                    if name == layer {
                        let mc = g.constant(mask.clone());
                        g.mul(gid, mc)
                    } else {
                        gid
                    }
                })
                .collect(),
        }
    }

    /// Distance node between gradient nodes and the observed constants.
    pub fn distance(
        g: &mut Graph,
        dummy: &[NodeId],
        observed: &GradientSet,
        metric: DistanceMetric,
        layer_weighted: bool,
    ) -> NodeId {
        match metric {
            DistanceMetric::L2 => {
                let mut acc: Option<NodeId> = None;
                for (&d, (_, o)) in dummy.iter().zip(&observed.entries) {
                    let oc = g.constant(o.clone());
                    let diff = g.sub(d, oc);
                    let sq = g.mul(diff, diff);
                    let s = g.sum_all(sq);
                    acc = Some(match acc {
                        Some(a) => g.add(a, s),
                        None => s,
                    });
                }
                acc.expect("gradient set is never empty")
            }
            DistanceMetric::NegCosine if layer_weighted => {
                let mut acc: Option<NodeId> = None;
                let layers = dummy.len();
                for (&d, entry) in dummy.iter().zip(&observed.entries) {
                    let term = neg_cosine_term(g, &[d], std::slice::from_ref(entry));
                    acc = Some(match acc {
                        Some(a) => g.add(a, term),
                        None => term,
                    });
                }
                let total = acc.expect("gradient set is never empty");
                g.scale(total, 1.0 / layers as f32)
            }
            DistanceMetric::NegCosine => {
                let obs: Vec<(String, TensorF)> = observed.entries.clone();
                neg_cosine_term(g, dummy, &obs)
            }
        }
    }

    fn neg_cosine_term(g: &mut Graph, dummy: &[NodeId], observed: &[(String, TensorF)]) -> NodeId {
        let mut dot: Option<NodeId> = None;
        let mut na: Option<NodeId> = None;
        let mut nb = 0.0_f64;
        for (&d, (_, o)) in dummy.iter().zip(observed) {
            let oc = g.constant(o.clone());
            let prod = g.mul(d, oc);
            let s = g.sum_all(prod);
            dot = Some(match dot {
                Some(a) => g.add(a, s),
                None => s,
            });
            let sq = g.mul(d, d);
            let sa = g.sum_all(sq);
            na = Some(match na {
                Some(a) => g.add(a, sa),
                None => sa,
            });
            nb += o.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>();
        }
        let dot = dot.expect("non-empty gradients");
        let na = na.expect("non-empty gradients");
        // keep the node finite at degenerate all-zero dummies
        let na = g.add_scalar(na, 1e-24);
        let na = g.sqrt(na);
        let denom = g.scale(na, nb.sqrt().max(1e-24) as f32);
        let inv = g.recip(denom);
        let cos = g.mul(dot, inv);
        let neg = g.neg(cos);
        g.add_scalar(neg, 1.0)
    }

    /// Anisotropic total-variation node over [B, C, H, W] pixels.
    pub fn total_variation(g: &mut Graph, x: NodeId) -> NodeId {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let right = g.slice4(x, 0, h, 1, w);
        let left = g.slice4(x, 0, h, 0, w - 1);
        let dh = g.sub(right, left);
        let dh = g.abs(dh);
        let dh = g.sum_all(dh);
        let down = g.slice4(x, 1, h, 0, w);
        let up = g.slice4(x, 0, h - 1, 0, w);
        let dv = g.sub(down, up);
        let dv = g.abs(dv);
        let dv = g.sum_all(dv);
        g.add(dh, dv)
    }

    /// Fidelity node: alpha_l2 * ||x||^2 + alpha_tv * TV(x).
    pub fn fidelity(g: &mut Graph, x: NodeId, alpha_tv: f32, alpha_l2: f32) -> NodeId {
        let sq = g.mul(x, x);
        let ssq = g.sum_all(sq);
        let l2 = g.scale(ssq, alpha_l2);
        let tv = total_variation(g, x);
        let tv = g.scale(tv, alpha_tv);
        g.add(l2, tv)
    }

    /// Full attack objective at image node `x`: returns
    /// `(total loss, gradient-matching distance)` — the total drives the
    /// optimizer, the distance drives best-iterate and output selection.
    pub fn attack_loss(
        g: &mut Graph,
        model: &Classifier,
        x: NodeId,
        labels: &[usize],
        observed: &GradientSet,
        obj: &MatchObjective,
    ) -> (NodeId, NodeId) {
        let leaf_names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
        let dummies = dummy_gradients(g, model, x, labels);
        let transformed = transform(g, &obj.transform, &dummies, &leaf_names);
        let dist = distance(g, &transformed, observed, obj.distance, obj.layer_weighted);
        if obj.alpha_tv == 0.0 && obj.alpha_l2 == 0.0 {
            return (dist, dist);
        }
        let fid = fidelity(g, x, obj.alpha_tv, obj.alpha_l2);
        let total = g.add(dist, fid);
        (total, dist)
    }
}

/// Plain (non-graph) attack loss: distance of the transformed dummy
/// gradients from the observation plus the fidelity term.
pub fn attack_loss(
    x: &ImageBatch,
    labels: &[usize],
    model: &Classifier,
    observed: &GradientSet,
    obj: &MatchObjective,
) -> Result<f64> {
    let (_, dummy) = crate::models::loss_and_gradients(model, x, labels)?;
    let transformed = apply_inferred(&obj.transform, &dummy)?;
    let dist = grad_distance(&transformed, observed, obj.distance)?;
    Ok(dist + fidelity_reg(x, obj.alpha_tv, obj.alpha_l2))
}
