//! Random geometric augmentation followed by Gaussian smoothing.
//!
//! Each draw is a fixed linear map on pixels, so the optimiser can push
//! gradients back through it with [`Augmentation::adjoint`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Per axis, as a fraction of the image side.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Standard deviation of the smoothing kernel in pixels; 0 disables it.
    pub blur_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 0.15,
            min_scale: 0.7,
            max_scale: 1.2,
            blur_sigma: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No geometry change and no smoothing.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            blur_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let r = self.max_rotation_deg;
        let t = self.max_translation;
        AugmentParams {
            rotation_deg: uniform(-r, r),
            shift_x: uniform(-t, t),
            shift_y: uniform(-t, t),
            scale: uniform(self.min_scale, self.max_scale),
            blur_sigma: self.blur_sigma,
        }
    }
}

/// One concrete draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
    pub blur_sigma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            scale: 1.0,
            blur_sigma: 0.0,
        }
    }
}

/// Convex combination of up to four source pixels.
type Taps = [(usize, f64); 4];

/// 1-D kernel taps for one output position.
type Taps1 = Vec<(usize, f64)>;

/// Warp (inverse-mapped bilinear sampling, edge-clamped) then separable blur.
#[derive(Debug, Clone)]
pub struct Augmentation {
    height: usize,
    width: usize,
    warp: Vec<Taps>,
    blur_x: Vec<Taps1>,
    blur_y: Vec<Taps1>,
}

/// Snap coordinates that are integral up to rounding noise, so the identity
/// transform reproduces pixels exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn blur_taps(n: usize, sigma: f64) -> Vec<Taps1> {
    if sigma <= 0.0 {
        return (0..n).map(|i| vec![(i, 1.0)]).collect();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    (0..n as isize)
        .map(|i| {
            (-radius..=radius)
                .zip(&kernel)
                .map(|(k, w)| ((i + k).clamp(0, n as isize - 1) as usize, w / total))
                .collect()
        })
        .collect()
}

impl Augmentation {
    pub fn new(height: usize, width: usize, params: &AugmentParams) -> Self {
        let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
        let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
        let (ty, tx) = (params.shift_y * height as f64, params.shift_x * width as f64);
        let mut warp = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                // output pixel centre, relative to the image centre, minus the shift
                let u = x as f64 + 0.5 - cx - tx;
                let v = y as f64 + 0.5 - cy - ty;
                // inverse rotation and scale
                let su = (cos * u + sin * v) / params.scale;
                let sv = (-sin * u + cos * v) / params.scale;
                let px = snap(su + cx - 0.5).clamp(0.0, (width - 1) as f64);
                let py = snap(sv + cy - 0.5).clamp(0.0, (height - 1) as f64);
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
                let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                warp.push([
                    (y0 * width + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * width + x1, (1.0 - fy) * fx),
                    (y1 * width + x0, fy * (1.0 - fx)),
                    (y1 * width + x1, fy * fx),
                ]);
            }
        }
        Self {
            height,
            width,
            warp,
            blur_x: blur_taps(width, params.blur_sigma),
            blur_y: blur_taps(height, params.blur_sigma),
        }
    }

    fn check(&self, image: &Image) {
        assert!(
            image.height == self.height && image.width == self.width,
            "augmentation built for {}x{}, got {}",
            self.height,
            self.width,
            image.shape_string()
        );
    }

    pub fn apply(&self, image: &Image) -> Image {
        self.check(image);
        let (h, w) = (self.height, self.width);
        let mut out = Image::zeros(image.channels, h, w);
        let mut tmp = vec![0.0; h * w];
        for c in 0..image.channels {
            let src = image.plane(c);
            let warped: Vec<f64> = self
                .warp
                .iter()
                .map(|taps| taps.iter().map(|&(i, wt)| wt * src[i]).sum())
                .collect();
            for y in 0..h {
                for (x, taps) in self.blur_x.iter().enumerate() {
                    tmp[y * w + x] = taps.iter().map(|&(i, wt)| wt * warped[y * w + i]).sum();
                }
            }
            let dst = out.plane_mut(c);
            for (y, taps) in self.blur_y.iter().enumerate() {
                for x in 0..w {
                    dst[y * w + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * w + x]).sum();
                }
            }
        }
        out
    }

    /// Transpose of [`Augmentation::apply`].
    pub fn adjoint(&self, grad: &Image) -> Image {
        self.check(grad);
        let (h, w) = (self.height, self.width);
        let mut out = Image::zeros(grad.channels, h, w);
        for c in 0..grad.channels {
            let g = grad.plane(c);
            let mut tmp = vec![0.0; h * w];
            for (y, taps) in self.blur_y.iter().enumerate() {
                for x in 0..w {
                    for &(i, wt) in taps {
                        tmp[i * w + x] += wt * g[y * w + x];
                    }
                }
            }
            let mut warped = vec![0.0; h * w];
            for y in 0..h {
                for (x, taps) in self.blur_x.iter().enumerate() {
                    for &(i, wt) in taps {
                        warped[y * w + i] += wt * tmp[y * w + x];
                    }
                }
            }
            let dst = out.plane_mut(c);
            for (taps, v) in self.warp.iter().zip(&warped) {
                for &(i, wt) in taps {
                    dst[i] += wt * v;
                }
            }
        }
        out
    }
}

/// Draw parameters from `rng` and transform `image`.
pub fn augment<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    let params = config.sample(rng);
    Augmentation::new(image.height, image.width, &params).apply(image)
}
