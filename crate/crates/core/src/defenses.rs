//! Gradient-perturbation defenses the simulated client applies before
//! sharing: Gaussian noise, layer-wise norm clipping, layer-wise top-k
//! sparsification, and a Soteria-style deterministic mask on the
//! fully-connected layer's gradient.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{penultimate_features, Classifier};
use crate::rng::{DeterministicRng, RngSeed};
use crate::tensor::{GradientSet, ImageBatch, TensorF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DefenseSpec {
    None,
    Noise { noise_std: f32, seed: u64 },
    Clip { clip_bound: f32 },
    Sparsify { prune_rate: f32 },
    Soteria { prune_rate: f32, defended_layer: String },
}

impl DefenseSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::None => "none",
            DefenseSpec::Noise { .. } => "noise",
            DefenseSpec::Clip { .. } => "clip",
            DefenseSpec::Sparsify { .. } => "sparsify",
            DefenseSpec::Soteria { .. } => "soteria",
        }
    }
}

/// Add i.i.d. Gaussian noise to every gradient entry.
pub fn apply_noise(g: &GradientSet, std: f32, seed: RngSeed) -> GradientSet {
    if std == 0.0 {
        return g.clone();
    }
    let mut rng = DeterministicRng::new(seed.child_named("gradient-noise"));
    let entries = g
        .entries
        .iter()
        .map(|(name, t)| {
            let data: Vec<f32> = t.data().iter().map(|&v| v + std * rng.normal_f32()).collect();
            (name.clone(), TensorF::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    GradientSet::new(entries)
}

// A layer whose norm exceeds the bound by less than this relative slack is
// left untouched, so re-clipping an already clipped set is a no-op even
// after f32 rounding of the scaled entries.
const CLIP_REL_SLACK: f64 = 2.5e-7;

/// Layer-wise norm clipping: g_l * min(c / ||g_l||_2, 1).
pub fn apply_clipping(g: &GradientSet, bound: f32) -> GradientSet {
    assert!(bound > 0.0, "clip bound must be positive");
    let b = bound as f64;
    let entries = g
        .entries
        .iter()
        .map(|(name, t)| {
            let norm = t.norm_l2();
            let out =
                if norm > b * (1.0 + CLIP_REL_SLACK) { t.scale((b / norm) as f32) } else { t.clone() };
            (name.clone(), out)
        })
        .collect();
    GradientSet::new(entries)
}

/// Indices of the `keep` largest-magnitude entries, ties by first index.
fn top_k_support(data: &[f32], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data[b].abs().partial_cmp(&data[a].abs()).unwrap().then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

/// ceil((1 - p) * n) with snapping, so decimal rates like 0.9 that have no
/// exact binary representation still give the intended count.
pub(crate) fn keep_count(prune_rate: f64, n: usize) -> usize {
    let kf = (1.0 - prune_rate) * n as f64;
    let snapped = kf.round();
    let keep = if (kf - snapped).abs() < 1e-6 * (n.max(1) as f64) { snapped } else { kf.ceil() };
    (keep as usize).min(n)
}

/// Layer-wise magnitude sparsification keeping exactly ceil((1-p) * n)
/// entries per layer; kept values pass through bit-equal.
pub fn apply_sparsification(g: &GradientSet, prune_rate: f32) -> GradientSet {
    assert!((0.0..1.0).contains(&prune_rate), "prune rate must be in [0, 1)");
    let entries = g
        .entries
        .iter()
        .map(|(name, t)| {
            let n = t.len();
            let keep = keep_count(prune_rate as f64, n);
            let mut data = vec![0.0_f32; n];
            for i in top_k_support(t.data(), keep) {
                data[i] = t.data()[i];
            }
            (name.clone(), TensorF::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    GradientSet::new(entries)
}

/// Per-feature leakage scores for the defended layer's input representation:
/// |r_j| * ||d r_j / d x||, averaged over the batch.
fn soteria_scores(model: &Classifier, batch: &ImageBatch) -> Result<Vec<f64>> {
    let feats = penultimate_features(model, batch)?;
    let (b, f) = (feats.shape()[0], feats.shape()[1]);
    let mut scores = vec![0.0_f64; f];
    for j in 0..f {
        // one graph per feature: the column sum's input gradient stacks the
        // per-sample Jacobian rows, because r[b, j] only depends on x[b]
        let mut g = Graph::new();
        let x = g.input(batch.pixels.clone());
        let params: Vec<_> = model.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let (_, feat_node) = model.build_forward(&mut g, x, &params);
        let col = g.slice_cols(feat_node, j, 1);
        let s = g.sum_all(col);
        let grads = g.backward(s, &[x]);
        let gx = g.value(grads[0]);
        let per = gx.len() / b;
        for bi in 0..b {
            let jac_norm: f64 = gx.data()[bi * per..(bi + 1) * per]
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            scores[j] += (feats.data()[bi * f + j] as f64).abs() * jac_norm;
        }
        scores[j] /= b as f64;
    }
    Ok(scores)
}

/// Soteria-style defense: mask the defended layer's weight gradient on the
/// positions whose feature columns rank most privacy-leaking. Deterministic
/// given (model, batch); all other layers pass through untouched.
pub fn apply_soteria(
    g: &GradientSet,
    model: &Classifier,
    batch: &ImageBatch,
    prune_rate: f32,
    defended_layer: &str,
) -> Result<GradientSet> {
    assert!((0.0..1.0).contains(&prune_rate), "prune rate must be in [0, 1)");
    let target = g
        .entries
        .iter()
        .position(|(n, _)| n == defended_layer)
        .ok_or_else(|| Error::UnknownLeaf(defended_layer.to_string()))?;
    let tensor = &g.entries[target].1;
    if tensor.shape().len() != 2 || tensor.shape()[1] != model.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "defended layer '{defended_layer}' is not the FC weight over the penultimate features"
        )));
    }
    let (rows, cols) = (tensor.shape()[0], tensor.shape()[1]);
    let scores = soteria_scores(model, batch)?;

    // order positions by (column score desc, flat index asc) and zero the
    // leading prune fraction, keeping exactly ceil((1-p) * n) entries
    let n = rows * cols;
    let keep = keep_count(prune_rate as f64, n);
    let mask_count = n - keep;
    let mut positions: Vec<usize> = (0..n).collect();
    positions.sort_by(|&a, &b| {
        let (ca, cb) = (a % cols, b % cols);
        scores[cb].partial_cmp(&scores[ca]).unwrap().then(a.cmp(&b))
    });

    let mut data = tensor.data().to_vec();
    for &p in positions.iter().take(mask_count) {
        data[p] = 0.0;
    }
    let mut entries = g.entries.clone();
    entries[target].1 = TensorF::new(tensor.shape().to_vec(), data).unwrap();
    Ok(GradientSet::new(entries))
}

/// Dispatch a defense spec over raw gradients.
pub fn apply_defense(
    g: &GradientSet,
    spec: &DefenseSpec,
    model: &Classifier,
    batch: &ImageBatch,
) -> Result<GradientSet> {
    Ok(match spec {
        DefenseSpec::None => g.clone(),
        DefenseSpec::Noise { noise_std, seed } => apply_noise(g, *noise_std, RngSeed(*seed)),
        DefenseSpec::Clip { clip_bound } => apply_clipping(g, *clip_bound),
        DefenseSpec::Sparsify { prune_rate } => apply_sparsification(g, *prune_rate),
        DefenseSpec::Soteria { prune_rate, defended_layer } => {
            apply_soteria(g, model, batch, *prune_rate, defended_layer)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Classifier;

    fn random_grads(shapes: &[(&str, Vec<usize>)], seed: u64) -> GradientSet {
        let mut rng = DeterministicRng::new(RngSeed(seed));
        GradientSet::new(
            shapes
                .iter()
                .map(|(n, s)| {
                    let count: usize = s.iter().product();
                    (
                        n.to_string(),
                        TensorF::new(s.clone(), (0..count).map(|_| rng.normal_f32()).collect())
                            .unwrap(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let g = random_grads(&[("a", vec![8]), ("b", vec![3, 3])], 1);
        let out = apply_noise(&g, 0.0, RngSeed(2));
        assert_eq!(out, g);
    }

    #[test]
    fn noise_std_matches_parameter() {
        let g = GradientSet::new(vec![("z".into(), TensorF::zeros(&[100_000]))]);
        let out = apply_noise(&g, 0.1, RngSeed(3));
        let vals = out.entries[0].1.data();
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let std: f64 = (vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / vals.len() as f64)
            .sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.02, "sample std {std}");
    }

    #[test]
    fn noise_is_deterministic_and_touches_every_entry() {
        let g = random_grads(&[("a", vec![64])], 4);
        let n1 = apply_noise(&g, 0.5, RngSeed(5));
        let n2 = apply_noise(&g, 0.5, RngSeed(5));
        assert_eq!(n1, n2);
        for (orig, noisy) in g.entries[0].1.data().iter().zip(n1.entries[0].1.data()) {
            assert_ne!(orig, noisy);
        }
    }

    #[test]
    fn clipping_scales_exactly() {
        let g = GradientSet::new(vec![
            ("big".into(), TensorF::from_vec(vec![8.0, 0.0])),
            ("small".into(), TensorF::from_vec(vec![2.0, 0.0])),
        ]);
        let out = apply_clipping(&g, 4.0);
        assert_eq!(out.entries[0].1.data(), &[4.0, 0.0]); // scaled by exactly 0.5
        assert_eq!(out.entries[1].1.data(), &[2.0, 0.0]); // untouched
    }

    #[test]
    fn clipping_bounds_norms_and_preserves_direction() {
        let g = random_grads(&[("a", vec![50]), ("b", vec![7, 7]), ("c", vec![3])], 6);
        let out = apply_clipping(&g, 4.0);
        for ((_, orig), (_, clipped)) in g.entries.iter().zip(&out.entries) {
            assert!(clipped.norm_l2() <= 4.0 + 1e-6);
            let cosine = orig.dot(clipped).unwrap() / (orig.norm_l2() * clipped.norm_l2());
            assert!((cosine - 1.0).abs() < 1e-6, "direction changed: cos {cosine}");
        }
    }

    #[test]
    fn clipping_is_idempotent() {
        let g = random_grads(&[("a", vec![128]), ("b", vec![5, 5])], 7);
        let once = apply_clipping(&g, 2.0);
        let twice = apply_clipping(&once, 2.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn sparsify_keeps_top_magnitude_entry() {
        let g = GradientSet::new(vec![(
            "l".into(),
            TensorF::from_vec(vec![0.1, -3.0, 0.5, 0.2, -0.4, 1.0, 0.0, 0.3, -0.2, 0.6]),
        )]);
        let out = apply_sparsification(&g, 0.9);
        let data = out.entries[0].1.data();
        assert_eq!(data.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(data[1], -3.0);
    }

    #[test]
    fn sparsify_near_zero_rate_is_identity() {
        let g = random_grads(&[("a", vec![33])], 8);
        let out = apply_sparsification(&g, 1e-9);
        assert_eq!(out, g);
    }

    #[test]
    fn sparsify_masks_exactly_and_passes_kept_bits() {
        let g = random_grads(&[("a", vec![40]), ("b", vec![6, 6])], 9);
        let out = apply_sparsification(&g, 0.7);
        // ceil(0.3 * 40) = 12, ceil(0.3 * 36) = 11
        let expected = [12usize, 11];
        for (((_, orig), (_, sp)), want) in g.entries.iter().zip(&out.entries).zip(expected) {
            let nonzero = sp.data().iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nonzero, want);
            for (o, s) in orig.data().iter().zip(sp.data()) {
                assert!(*s == 0.0 || s.to_bits() == o.to_bits());
            }
        }
    }

    #[test]
    fn sparsify_is_idempotent_and_support_monotone() {
        let g = random_grads(&[("a", vec![64])], 10);
        let p90 = apply_sparsification(&g, 0.9);
        let p90_again = apply_sparsification(&p90, 0.9);
        assert_eq!(p90, p90_again);
        let p95 = apply_sparsification(&g, 0.95);
        for (a, b) in p95.entries[0].1.data().iter().zip(p90.entries[0].1.data()) {
            if *a != 0.0 {
                assert_ne!(*b, 0.0, "support(p=0.95) must lie inside support(p=0.9)");
            }
        }
    }

    fn soteria_fixture() -> (Classifier, ImageBatch, GradientSet) {
        let model = Classifier::new("mlp2", 4, [1, 6, 6], RngSeed(11)).unwrap();
        let mut rng = DeterministicRng::new(RngSeed(12));
        let pixels =
            TensorF::new(vec![2, 1, 6, 6], (0..72).map(|_| rng.uniform_f32()).collect()).unwrap();
        let batch = ImageBatch::new(pixels, Some(vec![1, 3])).unwrap();
        let (_, grads) = crate::models::loss_and_gradients(&model, &batch, &[1, 3]).unwrap();
        (model, batch, grads)
    }

    #[test]
    fn soteria_masks_exact_count_on_defended_layer_only() {
        let (model, batch, grads) = soteria_fixture();
        // give the defended layer all-nonzero values so every masked
        // position counts as an introduced zero
        let mut grads = grads;
        let mut rng = DeterministicRng::new(RngSeed(99));
        for (name, t) in grads.entries.iter_mut() {
            if name == "head.weight" {
                for v in t.data_mut() {
                    *v = 0.1 + rng.uniform_f32();
                }
            }
        }
        let out = apply_soteria(&grads, &model, &batch, 0.8, "head.weight").unwrap();
        for ((name, orig), (_, def)) in grads.entries.iter().zip(&out.entries) {
            if name == "head.weight" {
                let n = orig.len();
                let keep = (0.2_f64 * n as f64).ceil() as usize;
                let zeros_introduced = orig
                    .data()
                    .iter()
                    .zip(def.data())
                    .filter(|(o, d)| **d == 0.0 && **o != 0.0)
                    .count();
                assert_eq!(zeros_introduced, n - keep);
            } else {
                assert_eq!(orig, def, "non-defended layer {name} changed");
            }
        }
    }

    #[test]
    fn soteria_is_deterministic() {
        let (model, batch, grads) = soteria_fixture();
        let a = apply_soteria(&grads, &model, &batch, 0.8, "head.weight").unwrap();
        let b = apply_soteria(&grads, &model, &batch, 0.8, "head.weight").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn soteria_unknown_layer_errors() {
        let (model, batch, grads) = soteria_fixture();
        assert!(matches!(
            apply_soteria(&grads, &model, &batch, 0.8, "nope.weight"),
            Err(Error::UnknownLeaf(_))
        ));
    }

    #[test]
    fn defenses_preserve_shapes_and_names() {
        let (model, batch, grads) = soteria_fixture();
        let specs = [
            DefenseSpec::None,
            DefenseSpec::Noise { noise_std: 0.1, seed: 1 },
            DefenseSpec::Clip { clip_bound: 4.0 },
            DefenseSpec::Sparsify { prune_rate: 0.9 },
            DefenseSpec::Soteria { prune_rate: 0.8, defended_layer: "head.weight".into() },
        ];
        for spec in &specs {
            let out = apply_defense(&grads, spec, &model, &batch).unwrap();
            out.check_same_layout(&grads).unwrap();
        }
    }
}
