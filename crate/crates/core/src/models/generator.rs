//! Conditional generator stack built from composable blocks.
//!
//! Block 0 maps a latent vector (plus a class embedding when conditional)
//! to a 4x4 feature map; each following block is one transposed-convolution
//! upsampling stage. The final block squashes to [0, 1] with a sigmoid.
//! The stack can be split at any block boundary: `tail(head(z)) == full(z)`
//! exactly, because both paths run the identical op sequence. Those
//! boundaries are the intermediate feature domains the staged attack
//! optimizes over.

use crate::autodiff::{one_hot, Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{DeterministicRng, RngSeed};
use crate::tensor::{ImageBatch, TensorF};

const BASE_SPATIAL: usize = 4;
const DECONV_K: usize = 4;

#[derive(Debug, Clone)]
pub enum GenBlock {
    /// Dense map from latent (+ label embedding) to a [c0, 4, 4] volume.
    LatentMap {
        embed: Option<TensorF>, // [num_classes, embed_dim]
        weight: TensorF,        // [c0*16, latent_dim + embed_dim]
        bias: TensorF,          // [c0*16]
        out_c: usize,
    },
    /// Transposed conv, stride 2, doubling spatial size.
    Upsample {
        weight: TensorF, // [in_c, out_c, 4, 4]
        bias: TensorF,   // [out_c]
        is_output: bool,
    },
}

/// Per-sample input shape and the features flowing between blocks.
#[derive(Debug, Clone)]
pub struct FeatureVec {
    pub values: TensorF,
    pub layer_index: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratorStack {
    pub blocks: Vec<GenBlock>,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub class_conditional: bool,
    pub out_shape: [usize; 3],
}

impl GeneratorStack {
    /// A new randomly initialized conditional stack for `out_shape`
    /// images (H must be `4 * 2^n` for n >= 1 upsampling blocks).
    pub fn new(
        latent_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        base_channels: usize,
        out_shape: [usize; 3],
        seed: RngSeed,
    ) -> Result<Self> {
        let [out_c, h, w] = out_shape;
        if h != w || h < 8 || (h % BASE_SPATIAL != 0) || !(h / BASE_SPATIAL).is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "output spatial size must be 4*2^n, got {h}x{w}"
            )));
        }
        let n_up = (h / BASE_SPATIAL).trailing_zeros() as usize;
        let mut rng = DeterministicRng::new(seed.child_named("generator-init"));

        let mut blocks = Vec::new();
        let in_dim = latent_dim + embed_dim;
        let c0 = base_channels;
        let map_out = c0 * BASE_SPATIAL * BASE_SPATIAL;
        let std = (1.0 / in_dim as f32).sqrt();
        blocks.push(GenBlock::LatentMap {
            embed: Some(TensorF::new(
                vec![num_classes, embed_dim],
                (0..num_classes * embed_dim).map(|_| rng.normal_f32()).collect(),
            )?),
            weight: TensorF::new(
                vec![map_out, in_dim],
                (0..map_out * in_dim).map(|_| rng.normal_f32() * std).collect(),
            )?,
            bias: TensorF::zeros(&[map_out]),
            out_c: c0,
        });

        let mut in_c = c0;
        for stage in 0..n_up {
            let is_output = stage + 1 == n_up;
            let oc = if is_output { out_c } else { (in_c / 2).max(4) };
            let n = in_c * oc * DECONV_K * DECONV_K;
            blocks.push(GenBlock::Upsample {
                weight: TensorF::new(
                    vec![in_c, oc, DECONV_K, DECONV_K],
                    (0..n).map(|_| rng.normal_f32() * 0.05).collect(),
                )?,
                bias: TensorF::zeros(&[oc]),
                is_output,
            });
            in_c = oc;
        }

        Ok(Self {
            blocks,
            latent_dim,
            embed_dim,
            num_classes,
            class_conditional: true,
            out_shape,
        })
    }

    /// Number of intermediate feature domains (N): boundaries between
    /// consecutive blocks. `h_i` for i in 1..=N is the input of block i.
    pub fn depth(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Per-sample shape of the feature entering block `i` (i = 0 is the
    /// latent itself).
    pub fn feature_shape(&self, i: usize) -> Result<Vec<usize>> {
        if i > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer index {i} out of range 0..={}",
                self.depth()
            )));
        }
        if i == 0 {
            return Ok(vec![self.latent_dim]);
        }
        let mut c = match &self.blocks[0] {
            GenBlock::LatentMap { out_c, .. } => *out_c,
            _ => unreachable!("block 0 is always the latent map"),
        };
        let mut sp = BASE_SPATIAL;
        for b in self.blocks.iter().take(i).skip(1) {
            if let GenBlock::Upsample { weight, .. } = b {
                c = weight.shape()[1];
                sp *= 2;
            }
        }
        Ok(vec![c, sp, sp])
    }

    /// Ordered (name, tensor) pairs over all blocks.
    pub fn param_tensors(&self) -> Vec<(String, TensorF)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                GenBlock::LatentMap { embed, weight, bias, .. } => {
                    if let Some(e) = embed {
                        out.push((format!("block{i}.embed"), e.clone()));
                    }
                    out.push((format!("block{i}.weight"), weight.clone()));
                    out.push((format!("block{i}.bias"), bias.clone()));
                }
                GenBlock::Upsample { weight, bias, .. } => {
                    out.push((format!("block{i}.weight"), weight.clone()));
                    out.push((format!("block{i}.bias"), bias.clone()));
                }
            }
        }
        out
    }

    /// Overwrite parameters from a flat (name, tensor) list.
    pub fn set_param_tensors(&mut self, tensors: &[(String, TensorF)]) -> Result<()> {
        let lookup = |name: &str| -> Result<TensorF> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::UnknownLeaf(name.to_string()))
        };
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match b {
                GenBlock::LatentMap { embed, weight, bias, .. } => {
                    if embed.is_some() {
                        *embed = Some(lookup(&format!("block{i}.embed"))?);
                    }
                    *weight = lookup(&format!("block{i}.weight"))?;
                    *bias = lookup(&format!("block{i}.bias"))?;
                }
                GenBlock::Upsample { weight, bias, .. } => {
                    *weight = lookup(&format!("block{i}.weight"))?;
                    *bias = lookup(&format!("block{i}.bias"))?;
                }
            }
        }
        Ok(())
    }

    /// Build blocks `start..` on a graph. Returns the output pixels node
    /// and, when `trainable`, the parameter input nodes in
    /// `param_tensors()` order for the built blocks.
    pub fn build_from(
        &self,
        g: &mut Graph,
        start: usize,
        features: NodeId,
        labels: Option<&[usize]>,
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if start > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "start layer {start} out of range 0..={}",
                self.depth()
            )));
        }
        let batch = g.shape(features)[0];
        let mut param_nodes = Vec::new();
        let push = |g: &mut Graph, t: &TensorF| -> NodeId {
            if trainable {
                g.input(t.clone())
            } else {
                g.constant(t.clone())
            }
        };

        let mut cur = features;
        let mut sp = if start == 0 { BASE_SPATIAL } else { g.shape(features)[2] };
        for b in self.blocks.iter().skip(start) {
            match b {
                GenBlock::LatentMap { embed, weight, bias, out_c } => {
                    let mut x = cur;
                    if let Some(e) = embed {
                        let labels = labels.ok_or_else(|| {
                            Error::InvalidArgument(
                                "conditional generator needs labels at layer 0".into(),
                            )
                        })?;
                        if labels.len() != batch {
                            return Err(Error::InvalidArgument(format!(
                                "{} labels for batch of {batch}",
                                labels.len()
                            )));
                        }
                        for &l in labels {
                            if l >= self.num_classes {
                                return Err(Error::LabelOutOfRange {
                                    label: l,
                                    num_classes: self.num_classes,
                                });
                            }
                        }
                        let en = push(g, e);
                        if trainable {
                            param_nodes.push(en);
                        }
                        let oh = g.constant(one_hot(labels, self.num_classes));
                        let emb = g.matmul(oh, en);
                        x = g.concat_cols(cur, emb);
                    }
                    let wn = push(g, weight);
                    let bn = push(g, bias);
                    if trainable {
                        param_nodes.push(wn);
                        param_nodes.push(bn);
                    }
                    let wt = g.transpose(wn);
                    let xw = g.matmul(x, wt);
                    let bb = g.broadcast_axis0(bn, batch);
                    let pre = g.add(xw, bb);
                    let act = g.relu(pre);
                    cur = g.reshape(act, &[batch, *out_c, BASE_SPATIAL, BASE_SPATIAL]);
                    sp = BASE_SPATIAL;
                }
                GenBlock::Upsample { weight, bias, is_output } => {
                    let wn = push(g, weight);
                    let bn = push(g, bias);
                    if trainable {
                        param_nodes.push(wn);
                        param_nodes.push(bn);
                    }
                    sp *= 2;
                    let up = g.conv2d_transpose(cur, wn, 2, 1, (sp, sp));
                    let bb = g.broadcast_channels(bn, batch, sp, sp);
                    let pre = g.add(up, bb);
                    cur = if *is_output { g.sigmoid(pre) } else { g.relu(pre) };
                }
            }
        }
        Ok((cur, param_nodes))
    }

    /// Run the head `G_0 ... G_{i-1}` on latents, producing `h_i`.
    pub fn head_forward(
        &self,
        z: &TensorF,
        upto: usize,
        labels: Option<&[usize]>,
    ) -> Result<TensorF> {
        if upto == 0 {
            return Ok(z.clone());
        }
        if upto > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer index {upto} out of range 0..={}",
                self.depth()
            )));
        }
        // Blocks are built sequentially, so running only the prefix yields
        // bit-identical boundary values to a full forward pass.
        let mut g = Graph::new();
        let zn = g.input(z.clone());
        let mut prefix = self.clone();
        prefix.blocks.truncate(upto);
        let (out, _) = prefix.build_from(&mut g, 0, zn, labels, false)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.param_tensors())
            .with_metadata("model-kind", "generator")
            .with_metadata("architecture-id", "cond-deconv")
            .with_metadata("latent-dim", &self.latent_dim.to_string())
            .with_metadata("embed-dim", &self.embed_dim.to_string())
            .with_metadata("num-classes", &self.num_classes.to_string())
            .with_metadata("blocks", &self.blocks.len().to_string())
            .with_metadata(
                "input-shape",
                &format!("{},{},{}", self.out_shape[0], self.out_shape[1], self.out_shape[2]),
            )
            .with_metadata(
                "base-channels",
                &match &self.blocks[0] {
                    GenBlock::LatentMap { out_c, .. } => out_c.to_string(),
                    _ => unreachable!(),
                },
            )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let parse = |key: &str| -> Result<usize> {
            ckpt.require_meta(key)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {key} metadata")))
        };
        let latent_dim = parse("latent-dim")?;
        let embed_dim = parse("embed-dim")?;
        let num_classes = parse("num-classes")?;
        let base_channels = parse("base-channels")?;
        let shape: Vec<usize> = ckpt
            .require_meta("input-shape")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::InvalidArgument("bad input-shape".into())))
            .collect::<Result<_>>()?;
        let mut gen = Self::new(
            latent_dim,
            embed_dim,
            num_classes,
            base_channels,
            [shape[0], shape[1], shape[2]],
            RngSeed(0),
        )?;
        gen.set_param_tensors(&ckpt.tensors)?;
        Ok(gen)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::checkpoint::load_checkpoint(path)?)
    }
}

/// Full-stack generation from latents.
pub fn generator_forward(
    gen: &GeneratorStack,
    z: &TensorF,
    labels: Option<&[usize]>,
) -> Result<ImageBatch> {
    let feat = FeatureVec { values: z.clone(), layer_index: 0 };
    generator_tail_forward(gen, 0, &feat, labels)
}

/// Generate images from the feature entering block `start`.
pub fn generator_tail_forward(
    gen: &GeneratorStack,
    start: usize,
    features: &FeatureVec,
    labels: Option<&[usize]>,
) -> Result<ImageBatch> {
    if features.layer_index != start {
        return Err(Error::InvalidArgument(format!(
            "feature is for layer {}, tail starts at {start}",
            features.layer_index
        )));
    }
    let expected = gen.feature_shape(start)?;
    let got = features.values.shape();
    if got.len() != expected.len() + 1 || got[1..] != expected[..] {
        return Err(Error::ShapeMismatch { expected, got: got.to_vec() });
    }
    let mut g = Graph::new();
    let f = g.constant(features.values.clone());
    let (out, _) = gen.build_from(&mut g, start, f, labels, false)?;
    ImageBatch::new(g.value(out).clone(), labels.map(|l| l.to_vec()))
}
