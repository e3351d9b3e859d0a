//! Global-model classifiers. Every architecture ends in a fully-connected
//! classification head over a non-negative (rectified or raw-pixel)
//! penultimate representation, which is what makes single-sample label
//! extraction from the head's weight gradient exact.

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{DeterministicRng, RngSeed};
use crate::tensor::{GradientSet, ImageBatch, TensorF};

/// Name of the classification head's weight leaf in every architecture.
pub const HEAD_WEIGHT: &str = "head.weight";

#[derive(Debug, Clone)]
pub struct Classifier {
    pub architecture_id: String,
    pub params: Vec<(String, TensorF)>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

struct ConvSpec {
    out_c: usize,
    stride: usize,
}

// convnet4: four 3x3 conv + ReLU stages, then the FC head.
const CONV4: [ConvSpec; 4] = [
    ConvSpec { out_c: 10, stride: 2 },
    ConvSpec { out_c: 20, stride: 2 },
    ConvSpec { out_c: 40, stride: 2 },
    ConvSpec { out_c: 40, stride: 1 },
];

const MLP_HIDDEN: [usize; 2] = [128, 64];

impl Classifier {
    /// Construct a randomly initialized classifier.
    ///
    /// Architectures: `linear` (softmax regression), `mlp2` (two hidden
    /// rectified layers), `convnet4` (four conv stages plus FC head).
    pub fn new(
        architecture_id: &str,
        num_classes: usize,
        input_shape: [usize; 3],
        seed: RngSeed,
    ) -> Result<Self> {
        let mut rng = DeterministicRng::new(seed.child_named("classifier-init"));
        let [c, h, w] = input_shape;
        let flat = c * h * w;
        let mut params: Vec<(String, TensorF)> = Vec::new();

        let dense = |rng: &mut DeterministicRng, name: &str, out_d: usize, in_d: usize| {
            let std = (1.0 / in_d as f32).sqrt();
            let data: Vec<f32> = (0..out_d * in_d).map(|_| rng.normal_f32() * std).collect();
            (
                (format!("{name}.weight"), TensorF::new(vec![out_d, in_d], data).unwrap()),
                (format!("{name}.bias"), TensorF::zeros(&[out_d])),
            )
        };

        match architecture_id {
            "linear" => {
                let (wt, b) = dense(&mut rng, "head", num_classes, flat);
                params.push(wt);
                params.push(b);
            }
            "mlp2" => {
                let dims = [flat, MLP_HIDDEN[0], MLP_HIDDEN[1]];
                for (i, pair) in dims.windows(2).enumerate() {
                    let (wt, b) = dense(&mut rng, &format!("fc{}", i + 1), pair[1], pair[0]);
                    params.push(wt);
                    params.push(b);
                }
                let (wt, b) = dense(&mut rng, "head", num_classes, MLP_HIDDEN[1]);
                params.push(wt);
                params.push(b);
            }
            "convnet4" => {
                let mut in_c = c;
                let mut sp = h;
                for (i, spec) in CONV4.iter().enumerate() {
                    let fan_in = (in_c * 9) as f32;
                    let std = (2.0 / fan_in).sqrt();
                    let data: Vec<f32> =
                        (0..spec.out_c * in_c * 9).map(|_| rng.normal_f32() * std).collect();
                    params.push((
                        format!("conv{}.weight", i + 1),
                        TensorF::new(vec![spec.out_c, in_c, 3, 3], data).unwrap(),
                    ));
                    params.push((format!("conv{}.bias", i + 1), TensorF::zeros(&[spec.out_c])));
                    in_c = spec.out_c;
                    sp = (sp + 2 - 3) / spec.stride + 1;
                }
                let feat = in_c * sp * sp;
                let (wt, b) = dense(&mut rng, "head", num_classes, feat);
                params.push(wt);
                params.push(b);
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown architecture '{other}'")))
            }
        }

        Ok(Self {
            architecture_id: architecture_id.to_string(),
            params,
            num_classes,
            input_shape,
        })
    }

    pub fn param(&self, name: &str) -> Result<&TensorF> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))
    }

    pub fn leaf_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Dimensionality of the penultimate representation feeding the head.
    pub fn feature_dim(&self) -> usize {
        self.param(HEAD_WEIGHT).expect("head always present").shape()[1]
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        let got = images.pixels.shape();
        let [c, h, w] = self.input_shape;
        if got.len() != 4 || got[1] != c || got[2] != h || got[3] != w {
            return Err(Error::ShapeMismatch {
                expected: vec![got.first().copied().unwrap_or(0), c, h, w],
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    /// Build the forward pass on a graph. `params` must align with
    /// `self.params` (same order). Returns `(logits, penultimate)`.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
    ) -> (NodeId, NodeId) {
        let batch = g.shape(x)[0];
        let [c, h, w] = self.input_shape;
        let flat = c * h * w;
        let by_name = |name: &str| -> NodeId {
            let idx = self.params.iter().position(|(n, _)| n == name).expect("leaf exists");
            params[idx]
        };
        let dense = |g: &mut Graph, x: NodeId, name: &str, batch: usize| -> NodeId {
            let wt = by_name(&format!("{name}.weight"));
            let b = by_name(&format!("{name}.bias"));
            let wtt = g.transpose(wt);
            let xw = g.matmul(x, wtt);
            let bb = g.broadcast_axis0(b, batch);
            g.add(xw, bb)
        };

        let features = match self.architecture_id.as_str() {
            "linear" => g.reshape(x, &[batch, flat]),
            "mlp2" => {
                let mut cur = g.reshape(x, &[batch, flat]);
                for i in 1..=2 {
                    cur = dense(g, cur, &format!("fc{i}"), batch);
                    cur = g.relu(cur);
                }
                cur
            }
            "convnet4" => {
                let mut cur = x;
                let mut sp = h;
                for (i, spec) in CONV4.iter().enumerate() {
                    let wt = by_name(&format!("conv{}.weight", i + 1));
                    let b = by_name(&format!("conv{}.bias", i + 1));
                    let conv = g.conv2d(cur, wt, spec.stride, 1);
                    sp = (sp + 2 - 3) / spec.stride + 1;
                    let bb = g.broadcast_channels(b, batch, sp, sp);
                    let sum = g.add(conv, bb);
                    cur = g.relu(sum);
                }
                let feat = CONV4[3].out_c * sp * sp;
                g.reshape(cur, &[batch, feat])
            }
            other => unreachable!("constructor rejects unknown architecture '{other}'"),
        };
        let logits = dense(g, features, "head", batch);
        (logits, features)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = Checkpoint::new(self.params.clone())
            .with_metadata("model-kind", "classifier")
            .with_metadata("architecture-id", &self.architecture_id)
            .with_metadata("num-classes", &self.num_classes.to_string())
            .with_metadata(
                "input-shape",
                &format!("{},{},{}", self.input_shape[0], self.input_shape[1], self.input_shape[2]),
            );
        crate::checkpoint::save_checkpoint(&ckpt, path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = ckpt.require_meta("architecture-id")?.to_string();
        let num_classes: usize = ckpt
            .require_meta("num-classes")?
            .parse()
            .map_err(|_| Error::InvalidArgument("bad num-classes metadata".into()))?;
        let shape: Vec<usize> = ckpt
            .require_meta("input-shape")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::InvalidArgument("bad input-shape".into())))
            .collect::<Result<_>>()?;
        if shape.len() != 3 {
            return Err(Error::InvalidArgument("input-shape must have 3 dims".into()));
        }
        Ok(Self {
            architecture_id: arch,
            params: ckpt.tensors.clone(),
            num_classes,
            input_shape: [shape[0], shape[1], shape[2]],
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::checkpoint::load_checkpoint(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone())
            .with_metadata("model-kind", "classifier")
            .with_metadata("architecture-id", &self.architecture_id)
            .with_metadata("num-classes", &self.num_classes.to_string())
            .with_metadata(
                "input-shape",
                &format!("{},{},{}", self.input_shape[0], self.input_shape[1], self.input_shape[2]),
            )
    }
}

/// Logits [B, L] for a batch.
pub fn classifier_forward(model: &Classifier, images: &ImageBatch) -> Result<TensorF> {
    model.check_images(images)?;
    let mut g = Graph::new();
    let x = g.constant(images.pixels.clone());
    let params: Vec<NodeId> =
        model.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let (logits, _) = model.build_forward(&mut g, x, &params);
    Ok(g.value(logits).clone())
}

/// Penultimate (pre-head) representation [B, feature_dim].
pub fn penultimate_features(model: &Classifier, images: &ImageBatch) -> Result<TensorF> {
    model.check_images(images)?;
    let mut g = Graph::new();
    let x = g.constant(images.pixels.clone());
    let params: Vec<NodeId> =
        model.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let (_, features) = model.build_forward(&mut g, x, &params);
    Ok(g.value(features).clone())
}

/// Mean cross-entropy loss and the batch-averaged parameter gradients.
pub fn loss_and_gradients(
    model: &Classifier,
    images: &ImageBatch,
    labels: &[usize],
) -> Result<(f32, GradientSet)> {
    model.check_images(images)?;
    if labels.len() != images.batch_size() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} images with {} labels",
            images.batch_size(),
            labels.len()
        )));
    }
    for &l in labels {
        if l >= model.num_classes {
            return Err(Error::LabelOutOfRange { label: l, num_classes: model.num_classes });
        }
    }
    let mut g = Graph::new();
    let x = g.constant(images.pixels.clone());
    let params: Vec<NodeId> = model.params.iter().map(|(_, t)| g.input(t.clone())).collect();
    let (logits, _) = model.build_forward(&mut g, x, &params);
    let loss = g.cross_entropy_mean(logits, labels);
    let grads = g.backward(loss, &params);
    let entries = model
        .params
        .iter()
        .zip(&grads)
        .map(|((name, _), &gid)| (name.clone(), g.value(gid).clone()))
        .collect();
    Ok((g.scalar_value(loss), GradientSet::new(entries)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(b: usize, shape: [usize; 3], seed: u64) -> ImageBatch {
        let mut rng = DeterministicRng::new(RngSeed(seed));
        let n = b * shape[0] * shape[1] * shape[2];
        let data: Vec<f32> = (0..n).map(|_| rng.uniform_f32()).collect();
        ImageBatch::new(
            TensorF::new(vec![b, shape[0], shape[1], shape[2]], data).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut model = Classifier::new("mlp2", 10, [1, 8, 8], RngSeed(3)).unwrap();
        for (_, t) in model.params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let batch = random_batch(3, [1, 8, 8], 5);
        let logits = classifier_forward(&model, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    // Independent scalar-loop oracle for a small MLP forward pass.
    fn mlp_forward_oracle(model: &Classifier, image: &[f32]) -> Vec<f32> {
        let dense = |name: &str, x: &[f32]| -> Vec<f32> {
            let wt = model.param(&format!("{name}.weight")).unwrap();
            let b = model.param(&format!("{name}.bias")).unwrap();
            let (out_d, in_d) = (wt.shape()[0], wt.shape()[1]);
            let mut out = vec![0.0f32; out_d];
            for o in 0..out_d {
                let mut acc = 0.0f32;
                for i in 0..in_d {
                    acc += wt.data()[o * in_d + i] * x[i];
                }
                out[o] = acc + b.data()[o];
            }
            out
        };
        let relu = |x: Vec<f32>| x.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let h1 = relu(dense("fc1", image));
        let h2 = relu(dense("fc2", &h1));
        dense("head", &h2)
    }

    #[test]
    fn mlp_forward_matches_scalar_oracle() {
        let model = Classifier::new("mlp2", 4, [1, 6, 6], RngSeed(17)).unwrap();
        let batch = random_batch(2, [1, 6, 6], 23);
        let logits = classifier_forward(&model, &batch).unwrap();
        for b in 0..2 {
            let img = &batch.pixels.data()[b * 36..(b + 1) * 36];
            let oracle = mlp_forward_oracle(&model, img);
            for (a, o) in logits.data()[b * 4..(b + 1) * 4].iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-5, "forward diverged: {a} vs {o}");
            }
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let model = Classifier::new("convnet4", 10, [1, 16, 16], RngSeed(7)).unwrap();
        let one = random_batch(1, [1, 16, 16], 9);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(one.pixels.data());
        }
        let batch =
            ImageBatch::new(TensorF::new(vec![4, 1, 16, 16], data).unwrap(), None).unwrap();
        let logits = classifier_forward(&model, &batch).unwrap();
        let row0 = &logits.data()[0..10];
        for b in 1..4 {
            assert_eq!(row0, &logits.data()[b * 10..(b + 1) * 10]);
        }
    }

    #[test]
    fn shape_mismatch_names_expected_and_got() {
        let model = Classifier::new("linear", 3, [1, 4, 4], RngSeed(0)).unwrap();
        let batch = random_batch(1, [1, 5, 5], 2);
        match classifier_forward(&model, &batch) {
            Err(Error::ShapeMismatch { expected, got }) => {
                assert_eq!(expected[1..], [1, 4, 4]);
                assert_eq!(got[1..], [1, 5, 5]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    // Closed-form softmax-regression gradient: dL/dW = (p - y) x^T, dL/db = p - y.
    #[test]
    fn linear_gradient_matches_closed_form() {
        let model = Classifier::new("linear", 2, [1, 3, 3], RngSeed(41)).unwrap();
        let batch = random_batch(1, [1, 3, 3], 42);
        let label = 1usize;
        let (_, grads) = loss_and_gradients(&model, &batch, &[label]).unwrap();

        let logits = classifier_forward(&model, &batch).unwrap();
        let exp: Vec<f64> = logits.data().iter().map(|&v| (v as f64).exp()).collect();
        let z: f64 = exp.iter().sum();
        let p: Vec<f64> = exp.iter().map(|e| e / z).collect();

        let gw = grads.get("head.weight").unwrap();
        let gb = grads.get("head.bias").unwrap();
        for cls in 0..2 {
            let coeff = p[cls] - if cls == label { 1.0 } else { 0.0 };
            assert!((gb.data()[cls] as f64 - coeff).abs() < 1e-6);
            for i in 0..9 {
                let expect = coeff * batch.pixels.data()[i] as f64;
                let got = gw.data()[cls * 9 + i] as f64;
                assert!((got - expect).abs() < 1e-6, "dW[{cls},{i}]: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_every_leaf() {
        let model = Classifier::new("mlp2", 3, [1, 4, 4], RngSeed(55)).unwrap();
        let batch = random_batch(2, [1, 4, 4], 56);
        let labels = vec![0usize, 2];
        let (_, grads) = loss_and_gradients(&model, &batch, &labels).unwrap();

        let loss_at = |m: &Classifier| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(batch.pixels.clone());
            let params: Vec<NodeId> = m.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
            let (logits, _) = m.build_forward(&mut g, x, &params);
            let l = g.cross_entropy_mean(logits, &labels);
            g.scalar_value(l) as f64
        };

        // 20 random directional probes per leaf: the directional derivative
        // carries enough signal to stay above the f32 loss-resolution floor.
        let eps = 1e-3f32;
        let mut rng = DeterministicRng::new(RngSeed(777));
        for (leaf_idx, (name, tensor)) in model.params.iter().enumerate() {
            let ad = grads.get(name).unwrap();
            for probe in 0..20 {
                let mut dir: Vec<f32> = (0..tensor.len()).map(|_| rng.normal_f32()).collect();
                let norm = dir.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                for v in dir.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
                let mut plus = model.clone();
                let mut minus = model.clone();
                for i in 0..tensor.len() {
                    plus.params[leaf_idx].1.data_mut()[i] += eps * dir[i];
                    minus.params[leaf_idx].1.data_mut()[i] -= eps * dir[i];
                }
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps as f64);
                let directional: f64 =
                    ad.data().iter().zip(&dir).map(|(g, d)| *g as f64 * *d as f64).sum();
                let scale = ad.norm_l2().max(1e-9);
                let rel = (fd - directional).abs() / scale;
                assert!(rel < 1e-2, "leaf {name} probe {probe}: fd {fd} vs ad {directional}");
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_averaged_gradients() {
        let model = Classifier::new("convnet4", 5, [1, 8, 8], RngSeed(77)).unwrap();
        let single = random_batch(1, [1, 8, 8], 78);
        let mut doubled = Vec::new();
        doubled.extend_from_slice(single.pixels.data());
        doubled.extend_from_slice(single.pixels.data());
        let dup =
            ImageBatch::new(TensorF::new(vec![2, 1, 8, 8], doubled).unwrap(), None).unwrap();
        let (_, g1) = loss_and_gradients(&model, &single, &[3]).unwrap();
        let (_, g2) = loss_and_gradients(&model, &dup, &[3, 3]).unwrap();
        for ((_, a), (_, b)) in g1.entries.iter().zip(&g2.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let model = Classifier::new("linear", 3, [1, 2, 2], RngSeed(1)).unwrap();
        let batch = random_batch(1, [1, 2, 2], 2);
        assert!(matches!(
            loss_and_gradients(&model, &batch, &[3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn penultimate_activation_is_non_negative() {
        for arch in ["linear", "mlp2", "convnet4"] {
            let model = Classifier::new(arch, 6, [1, 8, 8], RngSeed(13)).unwrap();
            for seed in 0..5 {
                let batch = random_batch(3, [1, 8, 8], 100 + seed);
                let feats = penultimate_features(&model, &batch).unwrap();
                assert!(
                    feats.data().iter().all(|&v| v >= 0.0),
                    "{arch} produced a negative penultimate feature"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Classifier::new("convnet4", 10, [1, 16, 16], RngSeed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        model.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        assert_eq!(back.architecture_id, model.architecture_id);
        assert_eq!(back.num_classes, model.num_classes);
        assert_eq!(back.input_shape, model.input_shape);
        assert_eq!(back.params, model.params);
    }
}
