//! Local training: supervised classifier fitting and adversarial training
//! of the conditional generator stack.

use crate::attacks::kernels::AdamState;
use crate::autodiff::{one_hot, Graph, NodeId};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::classifier::Classifier;
use crate::models::generator::GeneratorStack;
use crate::rng::{DeterministicRng, RngSeed};
use crate::tensor::TensorF;

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub architecture_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { architecture_id: "convnet4".into(), epochs: 10, batch_size: 32, lr: 1e-3 }
    }
}

/// Fraction of correct argmax predictions over a dataset.
pub fn accuracy(model: &Classifier, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let chunk = 64;
    let n = dataset.len();
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = dataset.batch(&idx);
        let logits = crate::models::classifier::classifier_forward(model, &batch)?;
        let l = model.num_classes;
        for (row, &want) in idx.iter().enumerate().map(|(r, _)| r).zip(batch.labels.as_ref().unwrap()) {
            let data = &logits.data()[row * l..(row + 1) * l];
            let got = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if got == want {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Train a classifier with Adam on mini-batch cross-entropy.
pub fn train_classifier(
    dataset: &LabeledDataset,
    config: &ClassifierTrainConfig,
    seed: RngSeed,
) -> Result<Classifier> {
    let mut model = Classifier::new(
        &config.architecture_id,
        dataset.num_classes,
        dataset.image_shape(),
        seed,
    )?;
    let mut rng = DeterministicRng::new(seed.child_named("classifier-train"));
    let mut opts: Vec<AdamState> =
        model.params.iter().map(|(_, t)| AdamState::new(t.len())).collect();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0_f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.batch(chunk);
            let labels = batch.labels.clone().unwrap();
            let mut g = Graph::new();
            let x = g.constant(batch.pixels.clone());
            let params: Vec<NodeId> =
                model.params.iter().map(|(_, t)| g.input(t.clone())).collect();
            let (logits, _) = model.build_forward(&mut g, x, &params);
            let loss = g.cross_entropy_mean(logits, &labels);
            let loss_v = g.scalar_value(loss);
            if !loss_v.is_finite() {
                return Err(Error::Divergence(format!(
                    "classifier loss became {loss_v} in epoch {epoch}"
                )));
            }
            epoch_loss += loss_v as f64;
            batches += 1;
            let grads = g.backward(loss, &params);
            for ((opt, (_, p)), &gid) in opts.iter_mut().zip(model.params.iter_mut()).zip(&grads) {
                opt.step(p.data_mut(), g.value(gid).data(), config.lr);
            }
        }
        if batches > 0 {
            log::info!(
                "classifier epoch {epoch}: mean loss {:.4}",
                epoch_loss / batches as f64
            );
        }
    }
    if config.epochs > 0 {
        let acc = accuracy(&model, dataset)?;
        log::info!("classifier train accuracy {:.3}", acc);
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            latent_dim: 24,
            embed_dim: 12,
            base_channels: 48,
            disc_channels: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GanTrainStats {
    /// Real-vs-fake accuracy of the discriminator on held-back samples;
    /// near 0.5 means the generator keeps up.
    pub disc_accuracy: f64,
    /// Variance of generated pixels divided by variance of real pixels.
    pub pixel_variance_ratio: f64,
}

/// Class-conditioned discriminator: the label enters as one-hot planes
/// concatenated to the image channels.
struct Discriminator {
    params: Vec<(String, TensorF)>,
    num_classes: usize,
    strides: Vec<usize>,
}

impl Discriminator {
    fn new(in_shape: [usize; 3], num_classes: usize, ndf: usize, seed: RngSeed) -> Self {
        let mut rng = DeterministicRng::new(seed.child_named("disc-init"));
        let [c, h, _] = in_shape;
        let mut params = Vec::new();
        let mut in_c = c + num_classes;
        let mut sp = h;
        let mut stage = 0usize;
        let mut strides = Vec::new();
        let mut out_c = ndf;
        while sp > 4 {
            let n = out_c * in_c * 16;
            let std = (2.0 / (in_c as f32 * 16.0)).sqrt();
            params.push((
                format!("conv{stage}.weight"),
                TensorF::new(vec![out_c, in_c, 4, 4], (0..n).map(|_| rng.normal_f32() * std).collect())
                    .unwrap(),
            ));
            params.push((format!("conv{stage}.bias"), TensorF::zeros(&[out_c])));
            strides.push(2);
            in_c = out_c;
            out_c *= 2;
            sp /= 2;
            stage += 1;
        }
        let flat = in_c * sp * sp;
        let std = (1.0 / flat as f32).sqrt();
        params.push((
            "head.weight".into(),
            TensorF::new(vec![1, flat], (0..flat).map(|_| rng.normal_f32() * std).collect()).unwrap(),
        ));
        params.push(("head.bias".into(), TensorF::zeros(&[1])));
        Self { params, num_classes, strides }
    }

    /// Logits [B, 1]. `params` aligned with `self.params`.
    fn build(
        &self,
        g: &mut Graph,
        images: NodeId,
        labels: &[usize],
        params: &[NodeId],
    ) -> NodeId {
        let shape = g.shape(images).to_vec();
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        // one-hot label planes
        let oh = one_hot(labels, self.num_classes);
        let mut planes = Vec::with_capacity(batch * self.num_classes * h * w);
        for b in 0..batch {
            for cls in 0..self.num_classes {
                let v = oh.data()[b * self.num_classes + cls];
                planes.extend(std::iter::repeat(v).take(h * w));
            }
        }
        let planes = g.constant(TensorF::new(vec![batch, self.num_classes, h, w], planes).unwrap());
        let mut cur = g.concat_channels(images, planes);
        let mut sp = h;
        for (stage, &stride) in self.strides.iter().enumerate() {
            let wt = params[stage * 2];
            let b = params[stage * 2 + 1];
            let conv = g.conv2d(cur, wt, stride, 1);
            sp = (sp + 2 - 4) / stride + 1;
            let bb = g.broadcast_channels(b, batch, sp, sp);
            let sum = g.add(conv, bb);
            cur = g.leaky_relu(sum, 0.2);
        }
        let flat_dim = self.params[self.strides.len() * 2].1.shape()[1];
        let flat = g.reshape(cur, &[batch, flat_dim]);
        let wt = params[self.strides.len() * 2];
        let b = params[self.strides.len() * 2 + 1];
        let wtt = g.transpose(wt);
        let xw = g.matmul(flat, wtt);
        let bb = g.broadcast_axis0(b, batch);
        g.add(xw, bb)
    }
}

/// Adversarial training of the conditional generator.
pub fn train_generator(
    dataset: &LabeledDataset,
    config: &GanTrainConfig,
    seed: RngSeed,
) -> Result<(GeneratorStack, GanTrainStats)> {
    let shape = dataset.image_shape();
    let mut gen = GeneratorStack::new(
        config.latent_dim,
        config.embed_dim,
        dataset.num_classes,
        config.base_channels,
        shape,
        seed,
    )?;
    let mut disc = Discriminator::new(shape, dataset.num_classes, config.disc_channels, seed);
    let mut rng = DeterministicRng::new(seed.child_named("gan-train"));

    let mut gen_params = gen.param_tensors();
    let mut g_opts: Vec<AdamState> =
        gen_params.iter().map(|(_, t)| AdamState::with_betas(t.len(), 0.5, 0.999)).collect();
    let mut d_opts: Vec<AdamState> =
        disc.params.iter().map(|(_, t)| AdamState::with_betas(t.len(), 0.5, 0.999)).collect();

    let sample_z = |rng: &mut DeterministicRng, b: usize, k: usize| -> TensorF {
        TensorF::new(vec![b, k], (0..b * k).map(|_| rng.normal_f32()).collect()).unwrap()
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let real = dataset.batch(chunk);
            let labels = real.labels.clone().unwrap();
            let b = chunk.len();

            // generate a detached fake batch for the discriminator step
            let z = sample_z(&mut rng, b, config.latent_dim);
            let fake = {
                let mut gg = Graph::new();
                let zn = gg.constant(z.clone());
                let (px, _) = gen.build_from(&mut gg, 0, zn, Some(&labels), false)?;
                gg.value(px).clone()
            };

            // discriminator step: real -> 1, fake -> 0
            let d_loss = {
                let mut gg = Graph::new();
                let params: Vec<NodeId> =
                    disc.params.iter().map(|(_, t)| gg.input(t.clone())).collect();
                let real_n = gg.constant(real.pixels.clone());
                let fake_n = gg.constant(fake.clone());
                let lr_logits = disc.build(&mut gg, real_n, &labels, &params);
                let lf_logits = disc.build(&mut gg, fake_n, &labels, &params);
                let l_real = gg.bce_with_logits_mean(lr_logits, &vec![1.0; b]);
                let l_fake = gg.bce_with_logits_mean(lf_logits, &vec![0.0; b]);
                let loss = gg.add(l_real, l_fake);
                let grads = gg.backward(loss, &params);
                for ((opt, (_, p)), &gid) in
                    d_opts.iter_mut().zip(disc.params.iter_mut()).zip(&grads)
                {
                    opt.step(p.data_mut(), gg.value(gid).data(), config.lr);
                }
                gg.scalar_value(loss)
            };

            // generator step: fool the (frozen) discriminator
            let g_loss = {
                let mut gg = Graph::new();
                let zn = gg.constant(sample_z(&mut rng, b, config.latent_dim));
                let (px, g_nodes) = gen.build_from(&mut gg, 0, zn, Some(&labels), true)?;
                let d_params: Vec<NodeId> =
                    disc.params.iter().map(|(_, t)| gg.constant(t.clone())).collect();
                let logits = disc.build(&mut gg, px, &labels, &d_params);
                let loss = gg.bce_with_logits_mean(logits, &vec![1.0; b]);
                let grads = gg.backward(loss, &g_nodes);
                for ((opt, (_, p)), &gid) in
                    g_opts.iter_mut().zip(gen_params.iter_mut()).zip(&grads)
                {
                    opt.step(p.data_mut(), gg.value(gid).data(), config.lr);
                }
                gen.set_param_tensors(&gen_params)?;
                gg.scalar_value(loss)
            };

            if !d_loss.is_finite() || !g_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "GAN losses d={d_loss} g={g_loss} in epoch {epoch}"
                )));
            }
        }
        log::info!("gan epoch {epoch} done");
    }

    // held-back evaluation: how well does the discriminator separate?
    let eval_n = dataset.len().min(128);
    let idx: Vec<usize> = (0..eval_n).collect();
    let real = dataset.batch(&idx);
    let labels = real.labels.clone().unwrap();
    let z = sample_z(&mut rng, eval_n, config.latent_dim);
    let fake = {
        let mut gg = Graph::new();
        let zn = gg.constant(z);
        let (px, _) = gen.build_from(&mut gg, 0, zn, Some(&labels), false)?;
        gg.value(px).clone()
    };
    let mut correct = 0usize;
    {
        let mut gg = Graph::new();
        let params: Vec<NodeId> = disc.params.iter().map(|(_, t)| gg.constant(t.clone())).collect();
        let rn = gg.constant(real.pixels.clone());
        let fn_ = gg.constant(fake.clone());
        let lr_id = disc.build(&mut gg, rn, &labels, &params);
        let lf_id = disc.build(&mut gg, fn_, &labels, &params);
        correct += gg.value(lr_id).data().iter().filter(|&&v| v > 0.0).count();
        correct += gg.value(lf_id).data().iter().filter(|&&v| v <= 0.0).count();
    }
    let disc_accuracy = correct as f64 / (2 * eval_n) as f64;

    let var = |t: &TensorF| -> f64 {
        let n = t.len() as f64;
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    };
    let pixel_variance_ratio = var(&fake) / var(&real.pixels).max(1e-12);
    let stats = GanTrainStats { disc_accuracy, pixel_variance_ratio };
    log::info!(
        "gan training done: disc accuracy {:.3}, pixel variance ratio {:.3}",
        stats.disc_accuracy,
        stats.pixel_variance_ratio
    );
    Ok((gen, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    fn tiny_dataset(n: usize, seed: u64) -> LabeledDataset {
        synth_shapes(n, 1, 16, RngSeed(seed)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny_dataset(20, 1);
        let cfg = ClassifierTrainConfig { epochs: 0, ..Default::default() };
        let trained = train_classifier(&ds, &cfg, RngSeed(5)).unwrap();
        let fresh = Classifier::new("convnet4", ds.num_classes, ds.image_shape(), RngSeed(5)).unwrap();
        assert_eq!(trained.params, fresh.params);
    }

    #[test]
    fn classifier_training_is_deterministic() {
        let ds = tiny_dataset(40, 2);
        let cfg = ClassifierTrainConfig {
            architecture_id: "mlp2".into(),
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
        };
        let a = train_classifier(&ds, &cfg, RngSeed(9)).unwrap();
        let b = train_classifier(&ds, &cfg, RngSeed(9)).unwrap();
        assert_eq!(a.params, b.params);
    }

    /// Perceptron oracle: verifies linear separability of a labeled set.
    fn perceptron_separates(xs: &[Vec<f32>], ys: &[usize], max_iter: usize) -> bool {
        let d = xs[0].len();
        let mut w = vec![0.0f32; d + 1];
        for _ in 0..max_iter {
            let mut errors = 0;
            for (x, &y) in xs.iter().zip(ys) {
                let target: f32 = if y == 1 { 1.0 } else { -1.0 };
                let act: f32 =
                    w[..d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f32>() + w[d];
                if act * target <= 0.0 {
                    for i in 0..d {
                        w[i] += target * x[i];
                    }
                    w[d] += target;
                    errors += 1;
                }
            }
            if errors == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn separable_two_class_task_reaches_99_percent() {
        // two well-separated blobs rendered as 8x8 intensity patterns
        let mut rng = DeterministicRng::new(RngSeed(33));
        let n = 60;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            for _ in 0..64 {
                data.push((base + 0.05 * rng.normal_f32()).clamp(0.0, 1.0) as f32);
            }
            labels.push(class);
        }
        let ds = LabeledDataset {
            images: TensorF::new(vec![n, 1, 8, 8], data).unwrap(),
            labels: labels.clone(),
            num_classes: 2,
        };

        let xs: Vec<Vec<f32>> = (0..n)
            .map(|i| ds.images.data()[i * 64..(i + 1) * 64].to_vec())
            .collect();
        assert!(perceptron_separates(&xs, &labels, 200), "oracle says not separable");

        let cfg = ClassifierTrainConfig {
            architecture_id: "linear".into(),
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
        };
        let model = train_classifier(&ds, &cfg, RngSeed(1)).unwrap();
        let acc = accuracy(&model, &ds).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    fn tiny_gan_config() -> GanTrainConfig {
        GanTrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 2e-3,
            latent_dim: 8,
            embed_dim: 4,
            base_channels: 16,
            disc_channels: 8,
        }
    }

    #[test]
    fn one_gan_step_changes_parameters() {
        let ds = tiny_dataset(8, 3);
        let cfg = tiny_gan_config();
        let (gen, _) = train_generator(&ds, &cfg, RngSeed(2)).unwrap();
        let fresh = GeneratorStack::new(
            cfg.latent_dim,
            cfg.embed_dim,
            ds.num_classes,
            cfg.base_channels,
            ds.image_shape(),
            RngSeed(2),
        )
        .unwrap();
        let delta: f64 = gen
            .param_tensors()
            .iter()
            .zip(fresh.param_tensors())
            .map(|((_, a), (_, b))| a.sub(&b).unwrap().norm_l2())
            .sum();
        assert!(delta > 0.0, "training did not move parameters");
    }

    #[test]
    fn gan_training_is_deterministic() {
        let ds = tiny_dataset(16, 4);
        let cfg = tiny_gan_config();
        let (a, _) = train_generator(&ds, &cfg, RngSeed(8)).unwrap();
        let (b, _) = train_generator(&ds, &cfg, RngSeed(8)).unwrap();
        assert_eq!(a.param_tensors(), b.param_tensors());
    }

    // Pixel variance of generated samples should land within a factor of
    // two of the dataset's own pixel variance once training has run.
    #[test]
    fn generated_pixel_variance_brackets_real_variance() {
        let ds = tiny_dataset(200, 5);
        let cfg = GanTrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
            latent_dim: 8,
            embed_dim: 4,
            base_channels: 16,
            disc_channels: 8,
        };
        let (_, stats) = train_generator(&ds, &cfg, RngSeed(6)).unwrap();
        assert!(
            stats.pixel_variance_ratio > 0.5 && stats.pixel_variance_ratio < 2.0,
            "variance ratio {}",
            stats.pixel_variance_ratio
        );
    }
}
