use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor3;

/// Square-kernel 2-D convolution with zero padding. Weights are laid out
/// `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    /// He-normal initialisation; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn he_init<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: with_bias.then(|| vec![0.0; out_channels]),
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(height), span(width))
    }

    #[cfg(test)]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Output columns `ox` for which `ox * stride + k - padding` lands in `[0, width)`.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= in_len - 1
        let top = in_len as isize - 1 - off;
        let hi = if top < 0 { -1 } else { top / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Unfold `x` into a `(in * k * k) x (oh * ow)` row-major matrix whose
    /// rows follow the weight layout.
    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let n = oh * ow;
        let k = self.kernel;
        let s = self.stride;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        for i in 0..self.in_channels {
            let inp = x.plane(i);
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, x.height, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, x.width, ow);
                    if ox_lo == ox_hi {
                        continue;
                    }
                    let row = &mut cols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - self.padding;
                        let src = &inp[iy * x.width..(iy + 1) * x.width];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let start = ox_lo + kx - self.padding;
                            dst[ox_lo..ox_hi].copy_from_slice(&src[start..start + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = src[ox * s + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv2d::im2col`]: scatter-add columns back into an image.
    fn col2im(&self, cols: &[f64], height: usize, width: usize, oh: usize, ow: usize) -> Tensor3 {
        let n = oh * ow;
        let k = self.kernel;
        let s = self.stride;
        let mut out = Tensor3::zeros(self.in_channels, height, width);
        for i in 0..self.in_channels {
            let plane = out.plane_mut(i);
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, height, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, width, ow);
                    let row = &cols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - self.padding;
                        let dst = &mut plane[iy * width..(iy + 1) * width];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kx - self.padding] += src[ox];
                        }
                    }
                }
            }
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_channels);
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        if let Some(b) = &self.bias {
            for (o, bv) in b.iter().enumerate() {
                out.plane_mut(o).iter_mut().for_each(|v| *v = *bv);
            }
        }
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols;
        let b = if self.is_pointwise() {
            &x.data
        } else {
            cols = self.im2col(x, oh, ow);
            &cols
        };
        gemm(self.out_channels, kk, n, &self.weight, (kk, 1), b, (n, 1), &mut out.data, 1.0);
        out
    }

    /// Gradient with respect to the input, given the gradient of the output.
    pub fn backward_input(&self, in_height: usize, in_width: usize, grad_out: &Tensor3) -> Tensor3 {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![0.0; kk * n];
        // W^T (kk x out) times G (out x n)
        gemm(kk, self.out_channels, n, &self.weight, (1, kk), &grad_out.data, (n, 1), &mut cols, 0.0);
        if self.is_pointwise() {
            return Tensor3::from_vec(self.in_channels, in_height, in_width, cols).expect("pointwise shape");
        }
        self.col2im(&cols, in_height, in_width, oh, ow)
    }

    /// Accumulate weight and bias gradients given the layer input and the
    /// gradient of its output.
    pub fn backward_params(&self, input: &Tensor3, grad_out: &Tensor3, grad_weight: &mut [f64], grad_bias: Option<&mut [f64]>) {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols;
        let x = if self.is_pointwise() {
            &input.data
        } else {
            cols = self.im2col(input, oh, ow);
            &cols
        };
        // G (out x n) times cols^T (n x kk)
        gemm(self.out_channels, n, kk, &grad_out.data, (n, 1), x, (1, n), grad_weight, 1.0);
        if let Some(gb) = grad_bias {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += grad_out.plane(o).iter().sum::<f64>();
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major `c` (`m x n`); `a` is `m x k` and `b`
/// is `k x n`, each given with its (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    assert!(a.len() >= (m.max(1) - 1) * sa.0 + (k.max(1) - 1) * sa.1 + 1 || m * k == 0);
    assert!(b.len() >= (k.max(1) - 1) * sb.0 + (n.max(1) - 1) * sb.1 + 1 || k * n == 0);
    assert_eq!(c.len(), m * n);
    if m * n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let mut out = Tensor3::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += conv.w(o, i, ky, kx) * x.get(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(o, oy, ox, acc);
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (5, 2, 2), (1, 2, 0), (1, 1, 0), (7, 2, 3), (3, 1, 0)] {
            let mut conv = Conv2d::he_init("c", 3, 4, k, s, p, true, &mut rng);
            conv.bias = Some(vec![0.1, -0.2, 0.3, 0.0]);
            let x = random_tensor(&mut rng, 3, 11, 9);
            let fast = conv.forward(&x);
            let slow = naive_forward(&conv, &x);
            assert!(fast.same_shape(&slow));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn tiny_inputs_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, w, k, s, p) in &[(1, 1, 3, 1, 1), (2, 2, 3, 2, 1), (1, 3, 3, 1, 1), (2, 1, 3, 2, 1)] {
            let conv = Conv2d::he_init("c", 2, 3, k, s, p, true, &mut rng);
            let x = random_tensor(&mut rng, 2, h, w);
            let fast = conv.forward(&x);
            let slow = naive_forward(&conv, &x);
            assert!(fast.same_shape(&slow));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (5, 2, 2), (1, 2, 0), (1, 1, 0)] {
            let conv = Conv2d::he_init("c", 2, 3, k, s, p, false, &mut rng);
            let x = random_tensor(&mut rng, 2, 10, 7);
            let y = conv.forward(&x);
            let g = random_tensor(&mut rng, y.channels, y.height, y.width);
            let gx = conv.backward_input(x.height, x.width, &g);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let conv = Conv2d::he_init("c", 2, 3, 3, 2, 1, true, &mut rng);
        let x = random_tensor(&mut rng, 2, 7, 6);
        let y = conv.forward(&x);
        let up = random_tensor(&mut rng, y.channels, y.height, y.width);
        let objective = |c: &Conv2d| -> f64 { c.forward(&x).data.iter().zip(&up.data).map(|(a, b)| a * b).sum() };
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; 3];
        conv.backward_params(&x, &up, &mut gw, Some(&mut gb));
        for j in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[j] += 1e-6;
            let mut m = conv.clone();
            m.weight[j] -= 1e-6;
            let fd = (objective(&p) - objective(&m)) / 2e-6;
            assert!((fd - gw[j]).abs() < 1e-6, "{j}: {fd} vs {}", gw[j]);
        }
        for o in 0..3 {
            let mut p = conv.clone();
            p.bias.as_mut().unwrap()[o] += 1e-6;
            let mut m = conv.clone();
            m.bias.as_mut().unwrap()[o] -= 1e-6;
            let fd = (objective(&p) - objective(&m)) / 2e-6;
            assert!((fd - gb[o]).abs() < 1e-6);
        }
    }
}
