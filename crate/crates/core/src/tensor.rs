//! Dense channel-major 3-D tensors. Images are `Tensor3` values with three
//! channels in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// An RGB image, channel-major, values in `[0, 1]`.
pub type Image = Tensor3;

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{} values for {channels}x{height}x{width}", channels * height * width),
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    /// Mean over the spatial grid of every channel.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every value to the nearest 8-bit level, as a PNG round-trip would.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}
