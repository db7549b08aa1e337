use candle::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Binary `H x W` mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask", "height and width must be at least 1"));
        }
        if data.len() != height * width {
            return Err(Error::Shape {
                context: "mask",
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryMask("mask"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Accepts only exact 0.0 / 1.0 values.
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                _ => Err(Error::NonBinaryMask("mask")),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// Stack masks into a `[B, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn batch_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = masks.first().ok_or_else(|| Error::invalid("masks", "empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut values = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Shape {
                    context: "mask batch",
                    expected: vec![h, w],
                    actual: vec![m.height, m.width],
                });
            }
            values.extend(m.data.iter().map(|&v| v as f32));
        }
        Ok(Tensor::from_vec(values, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }
}
