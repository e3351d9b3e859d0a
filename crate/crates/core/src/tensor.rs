//! Flat row-major tensors of `f32` plus an image-batch wrapper.
//!
//! Model math runs in `f32` throughout the crate; reductions accumulate in
//! `f64` before casting back so that sums stay stable at desk scale.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar payload of a rank-0 or single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch { expected: shape, got: self.shape.clone() });
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &TensorF) -> Result<TensorF> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &TensorF) -> Result<TensorF> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: f32) -> TensorF {
        let data = self.data.iter().map(|a| a * c).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn dot(&self, other: &TensorF) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut acc = 0.0_f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += *a as f64 * *b as f64;
        }
        Ok(acc)
    }

    pub fn norm_l2(&self) -> f64 {
        let mut acc = 0.0_f64;
        for a in &self.data {
            acc += *a as f64 * *a as f64;
        }
        acc.sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|a| a.abs() as f64).sum()
    }

    pub fn check_same_shape(&self, other: &TensorF) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// A batch of images with pixels in `[0, 1]`, shape `[B, C, H, W]`, and
/// optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: TensorF,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: TensorF, labels: Option<Vec<usize>>) -> Result<Self> {
        if pixels.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "image batch must be [B, C, H, W], got {:?}",
                pixels.shape()
            )));
        }
        if let Some(ref l) = labels {
            if l.len() != pixels.shape()[0] {
                return Err(Error::InvalidArgument(format!(
                    "batch has {} images but {} labels",
                    pixels.shape()[0],
                    l.len()
                )));
            }
        }
        Ok(Self { pixels, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Pixels of one image, as a fresh [1, C, H, W] batch.
    pub fn single(&self, idx: usize) -> ImageBatch {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let per = c * h * w;
        let data = self.pixels.data()[idx * per..(idx + 1) * per].to_vec();
        ImageBatch {
            pixels: TensorF::new(vec![1, c, h, w], data).unwrap(),
            labels: self.labels.as_ref().map(|l| vec![l[idx]]),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Ordered, per-parameter-leaf named gradients of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(String, TensorF)>,
}

impl GradientSet {
    pub fn new(entries: Vec<(String, TensorF)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&TensorF> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// All values flattened in leaf declaration order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_same_layout(&self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient sets have {} vs {} leaves",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::InvalidArgument(format!("leaf name mismatch: {na} vs {nb}")));
            }
            ta.check_same_shape(tb)?;
        }
        Ok(())
    }
}
