//! Eval-mode convolutional backbones with reverse-mode input gradients.
//!
//! Gradients flow from the pooled features back to the input pixels (for
//! feature visualization) and, when requested, into the convolution
//! parameters (for backbone pretraining).

mod conv;
pub mod io;
pub mod resnet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::Conv2d;

use crate::tensor::Tensor3;

/// Batch normalisation with frozen running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn identity(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / (self.running_var[c] + self.eps).sqrt()
    }

    fn forward(&self, mut x: Tensor3) -> Tensor3 {
        for c in 0..x.channels {
            let a = self.scale(c);
            let b = self.beta[c] - a * self.running_mean[c];
            x.plane_mut(c).iter_mut().for_each(|v| *v = a * *v + b);
        }
        x
    }

    fn backward(&self, mut g: Tensor3) -> Tensor3 {
        for c in 0..g.channels {
            let a = self.scale(c);
            g.plane_mut(c).iter_mut().for_each(|v| *v *= a);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn forward(&self, x: &Tensor3) -> (Tensor3, Vec<usize>) {
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = Tensor3::zeros(x.channels, oh, ow);
        let mut argmax = vec![0usize; out.data.len()];
        for c in 0..x.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let idx = x.idx(c, iy as usize, ix as usize);
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = out.idx(c, oy, ox);
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (out, argmax)
    }
}

/// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub body: Vec<Stage>,
    pub shortcut: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    MaxPool(MaxPool2d),
    Residual(Residual),
}

/// What backward needs from the forward pass of one stage.
enum Tape {
    Conv { input: Tensor3 },
    BatchNorm,
    Relu { output: Tensor3 },
    MaxPool { in_shape: (usize, usize, usize), argmax: Vec<usize> },
    Residual { body: Vec<Tape>, shortcut: Vec<Tape>, output: Tensor3 },
}

/// Tape recorded by [`Backbone::forward_recorded`].
pub struct ForwardTape(Vec<Tape>);

fn relu(mut x: Tensor3) -> Tensor3 {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn relu_backward(output: &Tensor3, mut g: Tensor3) -> Tensor3 {
    for (gv, &o) in g.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

fn run(stages: &[Stage], mut x: Tensor3, mut tape: Option<&mut Vec<Tape>>) -> Tensor3 {
    for stage in stages {
        x = match stage {
            Stage::Conv(conv) => {
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::Conv { input: x.clone() });
                }
                conv.forward(&x)
            }
            Stage::BatchNorm(bn) => {
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::BatchNorm);
                }
                bn.forward(x)
            }
            Stage::Relu => {
                let y = relu(x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::Relu { output: y.clone() });
                }
                y
            }
            Stage::MaxPool(pool) => {
                let in_shape = (x.channels, x.height, x.width);
                let (y, argmax) = pool.forward(&x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Tape::MaxPool { in_shape, argmax });
                }
                y
            }
            Stage::Residual(block) => {
                if let Some(t) = tape.as_deref_mut() {
                    let mut body_tape = Vec::new();
                    let mut short_tape = Vec::new();
                    let a = run(&block.body, x.clone(), Some(&mut body_tape));
                    let b = run(&block.shortcut, x, Some(&mut short_tape));
                    let y = relu(add(a, &b));
                    t.push(Tape::Residual {
                        body: body_tape,
                        shortcut: short_tape,
                        output: y.clone(),
                    });
                    y
                } else {
                    let a = run(&block.body, x.clone(), None);
                    let b = run(&block.shortcut, x, None);
                    relu(add(a, &b))
                }
            }
        };
    }
    x
}

fn add(mut a: Tensor3, b: &Tensor3) -> Tensor3 {
    debug_assert!(a.same_shape(b));
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    a
}

/// Gradient buffers for one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

fn conv_count(stages: &[Stage]) -> usize {
    let mut n = 0;
    visit(stages, &mut |s| {
        if matches!(s, Stage::Conv(_)) {
            n += 1;
        }
    });
    n
}

/// `grads` holds one entry per convolution of `stages`, in visiting order.
fn backprop(stages: &[Stage], tape: &[Tape], mut g: Tensor3, mut grads: Option<&mut [ConvGrad]>) -> Tensor3 {
    let mut offsets = Vec::with_capacity(stages.len());
    let mut acc = 0;
    for s in stages {
        offsets.push(acc);
        acc += conv_count(std::slice::from_ref(s));
    }
    for ((stage, rec), &offset) in stages.iter().zip(tape).zip(&offsets).rev() {
        g = match (stage, rec) {
            (Stage::Conv(conv), Tape::Conv { input }) => {
                if let Some(gs) = grads.as_deref_mut() {
                    let cg = &mut gs[offset];
                    conv.backward_params(input, &g, &mut cg.weight, cg.bias.as_deref_mut());
                }
                conv.backward_input(input.height, input.width, &g)
            }
            (Stage::BatchNorm(bn), Tape::BatchNorm) => bn.backward(g),
            (Stage::Relu, Tape::Relu { output }) => relu_backward(output, g),
            (Stage::MaxPool(_), Tape::MaxPool { in_shape, argmax }) => {
                let mut gi = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
                for (o, &src) in argmax.iter().enumerate() {
                    gi.data[src] += g.data[o];
                }
                gi
            }
            (Stage::Residual(block), Tape::Residual { body, shortcut, output }) => {
                let g = relu_backward(output, g);
                let nb = conv_count(&block.body);
                let (gb, gs) = match grads.as_deref_mut() {
                    Some(all) => {
                        let n = conv_count(std::slice::from_ref(stage));
                        let (b, s) = all[offset..offset + n].split_at_mut(nb);
                        (Some(b), Some(s))
                    }
                    None => (None, None),
                };
                let ga = backprop(&block.body, body, g.clone(), gb);
                let gshort = backprop(&block.shortcut, shortcut, g, gs);
                add(ga, &gshort)
            }
            _ => unreachable!("tape does not match stages"),
        };
    }
    g
}

fn visit<'a>(stages: &'a [Stage], f: &mut dyn FnMut(&'a Stage)) {
    for s in stages {
        f(s);
        if let Stage::Residual(r) = s {
            visit(&r.body, f);
            visit(&r.shortcut, f);
        }
    }
}

fn visit_mut(stages: &mut [Stage], f: &mut dyn FnMut(&mut Stage)) {
    for s in stages {
        f(s);
        if let Stage::Residual(r) = s {
            visit_mut(&mut r.body, f);
            visit_mut(&mut r.shortcut, f);
        }
    }
}

/// Layer description for a plain (non-residual) stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool(MaxPool2d),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Sequential { layers: Vec<LayerSpec> },
    Resnet18,
    Resnet50,
}

impl Architecture {
    /// Instantiate with He-normal convolutions and identity batch norms.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Backbone {
        match self {
            Architecture::Sequential { layers } => {
                let stages = layers
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        let name = format!("features.{i}");
                        match *spec {
                            LayerSpec::Conv {
                                in_channels,
                                out_channels,
                                kernel,
                                stride,
                                padding,
                                bias,
                            } => Stage::Conv(Conv2d::he_init(
                                name,
                                in_channels,
                                out_channels,
                                kernel,
                                stride,
                                padding,
                                bias,
                                rng,
                            )),
                            LayerSpec::BatchNorm { channels } => {
                                Stage::BatchNorm(BatchNorm2d::identity(name, channels))
                            }
                            LayerSpec::Relu => Stage::Relu,
                            LayerSpec::MaxPool(p) => Stage::MaxPool(p),
                        }
                    })
                    .collect();
                Backbone::new(self.clone(), stages)
            }
            Architecture::Resnet18 => resnet::resnet18(rng),
            Architecture::Resnet50 => resnet::resnet50(rng),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Sequential { .. } => "sequential",
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet50 => "resnet50",
        }
    }
}

/// A convolutional feature extractor whose last stage emits `D` channels;
/// global average pooling turns them into the `D`-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub architecture: Architecture,
    pub stages: Vec<Stage>,
    out_channels: usize,
}

impl Backbone {
    pub fn new(architecture: Architecture, stages: Vec<Stage>) -> Self {
        let mut out_channels = 0;
        // the last conv in visiting order is not always the output (shortcuts),
        // so track the last top-level stage that changes the channel count
        for s in &stages {
            if let Some(c) = stage_out_channels(s) {
                out_channels = c;
            }
        }
        Self {
            architecture,
            stages,
            out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: Tensor3) -> Tensor3 {
        run(&self.stages, x, None)
    }

    pub fn forward_recorded(&self, x: Tensor3) -> (Tensor3, ForwardTape) {
        let mut tape = Vec::new();
        let y = run(&self.stages, x, Some(&mut tape));
        (y, ForwardTape(tape))
    }

    pub fn backward(&self, tape: &ForwardTape, grad_out: Tensor3) -> Tensor3 {
        backprop(&self.stages, &tape.0, grad_out, None)
    }

    /// Zeroed gradient buffers matching [`Backbone::convs`].
    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.convs()
            .iter()
            .map(|c| ConvGrad {
                weight: vec![0.0; c.weight.len()],
                bias: c.bias.as_ref().map(|b| vec![0.0; b.len()]),
            })
            .collect()
    }

    /// Like [`Backbone::backward`], also accumulating parameter gradients.
    pub fn backward_with_params(&self, tape: &ForwardTape, grad_out: Tensor3, grads: &mut [ConvGrad]) -> Tensor3 {
        assert_eq!(grads.len(), conv_count(&self.stages), "one gradient buffer per convolution");
        backprop(&self.stages, &tape.0, grad_out, Some(grads))
    }


    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        visit(&self.stages, &mut |s| {
            if let Stage::Conv(c) = s {
                out.push(c);
            }
        });
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut out = Vec::new();
        visit(&self.stages, &mut |s| {
            if let Stage::BatchNorm(b) = s {
                out.push(b);
            }
        });
        out
    }

    pub fn for_each_stage_mut(&mut self, f: &mut dyn FnMut(&mut Stage)) {
        visit_mut(&mut self.stages, f);
    }

    /// Every parameter tensor by name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        visit(&self.stages, &mut |s| match s {
            Stage::Conv(c) => {
                out.push((
                    format!("{}.weight", c.name),
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    &c.weight,
                ));
                if let Some(b) = &c.bias {
                    out.push((format!("{}.bias", c.name), vec![c.out_channels], b));
                }
            }
            Stage::BatchNorm(b) => {
                let n = b.gamma.len();
                out.push((format!("{}.weight", b.name), vec![n], &b.gamma));
                out.push((format!("{}.bias", b.name), vec![n], &b.beta));
                out.push((format!("{}.running_mean", b.name), vec![n], &b.running_mean));
                out.push((format!("{}.running_var", b.name), vec![n], &b.running_var));
            }
            _ => {}
        });
        out
    }
}

fn stage_out_channels(s: &Stage) -> Option<usize> {
    match s {
        Stage::Conv(c) => Some(c.out_channels),
        Stage::Residual(r) => r.body.iter().rev().find_map(stage_out_channels),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_residual_net(rng: &mut ChaCha8Rng) -> Backbone {
        let mut bn = BatchNorm2d::identity("bn", 4);
        bn.gamma = vec![1.2, 0.7, 1.0, 0.9];
        bn.beta = vec![0.1, -0.1, 0.05, 0.0];
        bn.running_mean = vec![0.2, -0.3, 0.0, 0.1];
        bn.running_var = vec![0.5, 2.0, 1.0, 1.5];
        let stages = vec![
            Stage::Conv(Conv2d::he_init("c0", 3, 4, 3, 1, 1, true, rng)),
            Stage::BatchNorm(bn),
            Stage::Relu,
            Stage::MaxPool(MaxPool2d { kernel: 3, stride: 2, padding: 1 }),
            Stage::Residual(Residual {
                body: vec![
                    Stage::Conv(Conv2d::he_init("r.c1", 4, 6, 3, 2, 1, false, rng)),
                    Stage::Relu,
                    Stage::Conv(Conv2d::he_init("r.c2", 6, 6, 3, 1, 1, false, rng)),
                ],
                shortcut: vec![Stage::Conv(Conv2d::he_init("r.d", 4, 6, 1, 2, 0, false, rng))],
            }),
        ];
        Backbone::new(Architecture::Resnet18, stages)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = small_residual_net(&mut rng);
        assert_eq!(net.out_channels(), 6);
        let data: Vec<f64> = (0..3 * 12 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor3::from_vec(3, 12, 12, data).unwrap();
        let (y, tape) = net.forward_recorded(x.clone());
        let weights: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor3::from_vec(y.channels, y.height, y.width, weights.clone()).unwrap();
        let gx = net.backward(&tape, g);
        let objective = |t: &Tensor3| -> f64 {
            net.forward(t.clone()).data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for &i in &[0usize, 17, 100, 200, 333, 431] {
            let mut plus = x.clone();
            plus.data[i] += h;
            let mut minus = x.clone();
            minus.data[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "pixel {i}: {fd} vs {}", gx.data[i]);
        }
    }

    #[test]
    fn recorded_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = small_residual_net(&mut rng);
        let x = Tensor3::filled(3, 10, 10, 0.3);
        let (a, _) = net.forward_recorded(x.clone());
        assert_eq!(a, net.forward(x));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = small_residual_net(&mut rng);
        let data: Vec<f64> = (0..3 * 10 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor3::from_vec(3, 10, 10, data).unwrap();
        let (y, tape) = net.forward_recorded(x.clone());
        let weights: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor3::from_vec(y.channels, y.height, y.width, weights.clone()).unwrap();
        let mut grads = net.zero_grads();
        net.backward_with_params(&tape, g, &mut grads);
        let objective = |n: &Backbone| -> f64 { n.forward(x.clone()).data.iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for (ci, cg) in grads.iter().enumerate() {
            for &j in &[0usize, 5, cg.weight.len() - 1] {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    let mut k = 0;
                    n.for_each_stage_mut(&mut |s| {
                        if let Stage::Conv(c) = s {
                            if k == ci {
                                c.weight[j] += delta;
                            }
                            k += 1;
                        }
                    });
                    objective(&n)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - cg.weight[j]).abs() <= 1e-5 * fd.abs().max(1e-3), "conv {ci} w{j}: {fd} vs {}", cg.weight[j]);
            }
        }
    }
}
