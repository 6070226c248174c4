//! Darken the parts of an image where a neuron is weakly active.

use serde::{Deserialize, Serialize};

use super::encoder::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::SpatialActivationMap;
use crate::tensor::{Image, Tensor3};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.3;

/// Brightness kept in masked-out pixels.
pub const MASK_BRIGHTNESS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedImage {
    pub image: Image,
    /// The map was identically zero, so every pixel was darkened.
    pub degenerate: bool,
}

/// The activation map resized to `height x width`.
pub fn upsample_map(map: &SpatialActivationMap, height: usize, width: usize) -> Vec<f64> {
    let grid = Tensor3 {
        channels: 1,
        height: map.height,
        width: map.width,
        data: map.grid.clone(),
    };
    resize_bilinear(&grid, height, width).data
}

/// Pixels whose upsampled map value falls below `threshold_fraction * max(map)`
/// are scaled to [`MASK_BRIGHTNESS`]; all others are copied unchanged.
pub fn apply_mask(image: &Image, map: &SpatialActivationMap, threshold_fraction: f64) -> Result<MaskedImage> {
    if map.grid.is_empty() || map.grid.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidConfig("spatial map must be non-empty, finite and non-negative".into()));
    }
    if !(0.0..=1.0).contains(&threshold_fraction) {
        return Err(Error::InvalidConfig(format!(
            "mask threshold fraction must lie in [0, 1], got {threshold_fraction}"
        )));
    }
    let max = map.max();
    let mut out = image.clone();
    if max == 0.0 {
        tracing::warn!(neuron = map.neuron_id, "activation map is identically zero; masking everything");
        out.data.iter_mut().for_each(|v| *v *= MASK_BRIGHTNESS);
        return Ok(MaskedImage {
            image: out,
            degenerate: true,
        });
    }
    let up = upsample_map(map, image.height, image.width);
    let threshold = threshold_fraction * max;
    for c in 0..out.channels {
        for (v, m) in out.plane_mut(c).iter_mut().zip(&up) {
            if *m < threshold {
                *v *= MASK_BRIGHTNESS;
            }
        }
    }
    Ok(MaskedImage {
        image: out,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, grid: Vec<f64>) -> SpatialActivationMap {
        SpatialActivationMap {
            neuron_id: 0,
            height: h,
            width: w,
            grid,
        }
    }

    #[test]
    fn uniform_map_masks_nothing() {
        let img = Image::filled(3, 8, 8, 0.7);
        let out = apply_mask(&img, &map(2, 2, vec![1.5; 4]), 0.3).unwrap();
        assert_eq!(out.image, img);
        assert!(!out.degenerate);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let img = Image::filled(3, 8, 8, 0.7);
        let out = apply_mask(&img, &map(2, 2, vec![0.0, 0.0, 0.0, 2.0]), 0.0).unwrap();
        assert_eq!(out.image, img);
    }

    #[test]
    fn zero_map_is_degenerate() {
        let img = Image::filled(3, 4, 4, 0.5);
        let out = apply_mask(&img, &map(2, 2, vec![0.0; 4]), 0.3).unwrap();
        assert!(out.degenerate);
        assert!(out.image.data.iter().all(|v| (*v - 0.05).abs() < 1e-15));
    }

    #[test]
    fn negative_maps_are_rejected() {
        let img = Image::filled(3, 4, 4, 0.5);
        assert!(apply_mask(&img, &map(1, 2, vec![-1.0, 1.0]), 0.3).is_err());
    }
}
