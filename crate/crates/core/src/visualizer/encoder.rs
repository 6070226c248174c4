//! Image/text encoder pairs used for prompt alignment.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Image;

/// The standard zero-shot prompt ensemble.
pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "itap of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
];

pub trait ImageEncoder: Send + Sync {
    fn embedding_dim(&self) -> usize;

    fn embed(&self, image: &Image) -> Result<Vec<f64>>;

    /// Gradient with respect to the pixels of `sum_e upstream[e] * embed(image)[e]`.
    fn backward(&self, image: &Image, upstream: &[f64]) -> Result<Image>;
}

pub trait TextEncoder: Send + Sync {
    fn embedding_dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone)]
pub struct EncoderPair {
    pub id: String,
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
}

impl std::fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderPair").field("id", &self.id).finish()
    }
}

pub const STUB_ENCODER: &str = "stub";

/// Resolve an encoder pair by id. Only the built-in stub pair ships with the
/// library; anything else must be constructed by the caller.
pub fn encoder_pair(id: &str) -> Result<EncoderPair> {
    match id {
        STUB_ENCODER => Ok(StubEncoder::pair(64, 0)),
        other => Err(Error::EncoderUnavailable(format!(
            "no encoder pair named {other:?}; available: {STUB_ENCODER:?}"
        ))),
    }
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gradient of `cosine(a, b)` with respect to `a`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = cosine(a, b);
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect()
}

/// L2-normalised mean of the normalised embeddings of every filled template.
pub fn build_prompt_embedding(encoder: &dyn TextEncoder, class_name: &str, templates: &[String]) -> Result<Vec<f64>> {
    if class_name.trim().is_empty() {
        return Err(Error::InvalidConfig("class name is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidConfig("no prompt templates".into()));
    }
    let mut mean = vec![0.0; encoder.embedding_dim()];
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::InvalidConfig(format!("template {t:?} needs exactly one {{}}")));
        }
        let mut e = encoder.embed(&t.replace("{}", class_name))?;
        l2_normalize(&mut e);
        for (m, x) in mean.iter_mut().zip(&e) {
            *m += x;
        }
    }
    l2_normalize(&mut mean);
    Ok(mean)
}

/// Small deterministic encoders: images are resized to 16x16, projected and
/// squashed through a logistic; text is a sum of hashed half-normal token
/// vectors. Both live in the positive orthant, so similarities are never
/// negative.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
}

const STUB_SIDE: usize = 16;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let inputs = 3 * STUB_SIDE * STUB_SIDE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        Self {
            dim,
            seed,
            projection: (0..dim * inputs).map(|_| normal.sample(&mut rng)).collect(),
        }
    }

    pub fn pair(dim: usize, seed: u64) -> EncoderPair {
        let enc = Arc::new(Self::new(dim, seed));
        EncoderPair {
            id: STUB_ENCODER.into(),
            image: enc.clone(),
            text: enc,
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(token.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        (0..self.dim).map(|_| f64::abs(normal.sample(&mut rng))).collect()
    }

    fn pre_activation(&self, image: &Image) -> (Vec<f64>, Vec<f64>) {
        let small = resize_bilinear(image, STUB_SIDE, STUB_SIDE);
        let n = small.data.len();
        let z = (0..self.dim)
            .map(|e| {
                self.projection[e * n..(e + 1) * n]
                    .iter()
                    .zip(&small.data)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        (z, small.data)
    }
}

impl ImageEncoder for StubEncoder {
    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels != 3 {
            return Err(Error::shape("3 channels", image.channels));
        }
        Ok(self.pre_activation(image).0.into_iter().map(logistic).collect())
    }

    fn backward(&self, image: &Image, upstream: &[f64]) -> Result<Image> {
        if upstream.len() != self.dim {
            return Err(Error::shape(self.dim, upstream.len()));
        }
        let (z, small) = self.pre_activation(image);
        let n = small.len();
        let mut g_small = vec![0.0; n];
        for e in 0..self.dim {
            let t = logistic(z[e]);
            let s = upstream[e] * t * (1.0 - t);
            for (g, w) in g_small.iter_mut().zip(&self.projection[e * n..(e + 1) * n]) {
                *g += s * w;
            }
        }
        let g = Image::from_vec(3, STUB_SIDE, STUB_SIDE, g_small)?;
        Ok(resize_bilinear_adjoint(&g, image.height, image.width))
    }
}

impl TextEncoder for StubEncoder {
    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let mut any = false;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            any = true;
            for (o, v) in out.iter_mut().zip(self.token_vector(&token.to_lowercase())) {
                *o += v;
            }
        }
        if !any {
            return Err(Error::InvalidConfig(format!("prompt {text:?} has no tokens")));
        }
        Ok(out)
    }
}

/// Source taps of half-pixel-centred bilinear resampling along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let ty = bilinear_taps(image.height, height);
    let tx = bilinear_taps(image.width, width);
    let mut out = Image::zeros(image.channels, height, width);
    for c in 0..image.channels {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
                let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Transpose of [`resize_bilinear`] from `height x width` to `grad`'s size.
pub fn resize_bilinear_adjoint(grad: &Image, height: usize, width: usize) -> Image {
    let ty = bilinear_taps(height, grad.height);
    let tx = bilinear_taps(width, grad.width);
    let mut out = Image::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = grad.get(c, y, x);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let i = out.idx(c, yy, xx);
                        out.data[i] += g * wy * wx;
                    }
                }
            }
        }
    }
    out
}
