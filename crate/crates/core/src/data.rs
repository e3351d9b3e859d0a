//! Desk-scale datasets. The built-in corpus is a 10-class set of 32x32
//! procedural shape images: geometry determines the class, while position,
//! size, intensity, and pixel noise vary per sample.

use crate::error::{Error, Result};
use crate::rng::{DeterministicRng, RngSeed};
use crate::tensor::{ImageBatch, TensorF};

pub const SHAPES_CLASSES: usize = 10;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: TensorF, // [N, C, H, W]
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            images: TensorF::new(vec![indices.len(), c, h, w], data).unwrap(),
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn split(&self, n_first: usize) -> (LabeledDataset, LabeledDataset) {
        let first: Vec<usize> = (0..n_first.min(self.len())).collect();
        let rest: Vec<usize> = (n_first.min(self.len())..self.len()).collect();
        (self.subset(&first), self.subset(&rest))
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let sub = self.subset(indices);
        ImageBatch::new(sub.images, Some(sub.labels)).unwrap()
    }

    /// Relabel every sample to `(label + shift) mod num_classes`. Used to
    /// fabricate label-inconsistent setups where the generator's class
    /// indices disagree with the FL task's.
    pub fn with_label_shift(&self, shift: usize) -> LabeledDataset {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| (l + shift) % self.num_classes).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Generate the procedural shapes dataset.
pub fn synth_shapes(n: usize, channels: usize, size: usize, seed: RngSeed) -> Result<LabeledDataset> {
    if channels == 0 || size < 16 {
        return Err(Error::InvalidArgument("need channels >= 1 and size >= 16".into()));
    }
    let mut rng = DeterministicRng::new(seed.child_named("synth-shapes"));
    let mut data = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPES_CLASSES;
        labels.push(class);
        let img = draw_shape(class, size, &mut rng);
        for c in 0..channels {
            // per-channel tint keeps multi-channel variants colorful
            let tint = if channels == 1 || c == 0 { 1.0 } else { 0.6 + 0.4 * rng.uniform_f32() };
            data.extend(img.iter().map(|&v| (v * tint).clamp(0.0, 1.0)));
        }
    }
    Ok(LabeledDataset {
        images: TensorF::new(vec![n, channels, size, size], data)?,
        labels,
        num_classes: SHAPES_CLASSES,
    })
}

fn draw_shape(class: usize, size: usize, rng: &mut DeterministicRng) -> Vec<f32> {
    let s = size as f32;
    let bg = 0.20 * rng.uniform_f32();
    let fg = 0.65 + 0.35 * rng.uniform_f32();
    let cx = s / 2.0 + (rng.uniform_f32() - 0.5) * s / 4.0;
    let cy = s / 2.0 + (rng.uniform_f32() - 0.5) * s / 4.0;
    let r = s * (0.18 + 0.10 * rng.uniform_f32());
    let stripe = 2 + (rng.uniform_u64(3) as usize);

    let mut img = vec![bg; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f32 - cx;
            let fy = y as f32 - cy;
            let dist = (fx * fx + fy * fy).sqrt();
            let inside = match class {
                0 => dist <= r,                                   // disc
                1 => dist <= r && dist >= r * 0.55,               // ring
                2 => fx.abs() <= r && fy.abs() <= r,              // square
                3 => {
                    let m = fx.abs().max(fy.abs());
                    m <= r && m >= r * 0.55 // hollow square
                }
                4 => fy >= -r && fy <= r && fx.abs() <= (fy + r) / 2.0, // triangle
                5 => {
                    (fx.abs() <= r * 0.3 && fy.abs() <= r)
                        || (fy.abs() <= r * 0.3 && fx.abs() <= r) // plus
                }
                6 => (y / stripe) % 2 == 0,                       // horizontal stripes
                7 => (x / stripe) % 2 == 0,                       // vertical stripes
                8 => ((x / stripe) + (y / stripe)) % 2 == 0,      // checkerboard
                _ => (fx - fy).abs() <= r * 0.35 || (fx + fy).abs() <= r * 0.35, // X
            };
            if inside {
                img[y * size + x] = fg;
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + 0.02 * rng.normal_f32()).clamp(0.0, 1.0);
    }
    img
}
