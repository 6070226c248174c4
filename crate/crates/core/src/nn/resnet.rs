//! Residual backbones with torchvision parameter names, so exported
//! `resnet18` / `resnet50` state dicts load without renaming.

use rand::Rng;

use super::{Architecture, Backbone, BatchNorm2d, Conv2d, MaxPool2d, Residual, Stage};

fn conv<R: Rng + ?Sized>(
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut R,
) -> Stage {
    Stage::Conv(Conv2d::he_init(name, cin, cout, k, stride, pad, false, rng))
}

fn bn(name: String, c: usize) -> Stage {
    Stage::BatchNorm(BatchNorm2d::identity(name, c))
}

fn stem<R: Rng + ?Sized>(rng: &mut R) -> Vec<Stage> {
    vec![
        conv("conv1".into(), 3, 64, 7, 2, 3, rng),
        bn("bn1".into(), 64),
        Stage::Relu,
        Stage::MaxPool(MaxPool2d { kernel: 3, stride: 2, padding: 1 }),
    ]
}

fn downsample<R: Rng + ?Sized>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Vec<Stage> {
    if stride == 1 && cin == cout {
        return Vec::new();
    }
    vec![
        conv(format!("{prefix}.downsample.0"), cin, cout, 1, stride, 0, rng),
        bn(format!("{prefix}.downsample.1"), cout),
    ]
}

fn basic_block<R: Rng + ?Sized>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Stage {
    Stage::Residual(Residual {
        body: vec![
            conv(format!("{prefix}.conv1"), cin, cout, 3, stride, 1, rng),
            bn(format!("{prefix}.bn1"), cout),
            Stage::Relu,
            conv(format!("{prefix}.conv2"), cout, cout, 3, 1, 1, rng),
            bn(format!("{prefix}.bn2"), cout),
        ],
        shortcut: downsample(prefix, cin, cout, stride, rng),
    })
}

fn bottleneck<R: Rng + ?Sized>(prefix: &str, cin: usize, width: usize, stride: usize, rng: &mut R) -> Stage {
    let cout = width * 4;
    Stage::Residual(Residual {
        body: vec![
            conv(format!("{prefix}.conv1"), cin, width, 1, 1, 0, rng),
            bn(format!("{prefix}.bn1"), width),
            Stage::Relu,
            conv(format!("{prefix}.conv2"), width, width, 3, stride, 1, rng),
            bn(format!("{prefix}.bn2"), width),
            Stage::Relu,
            conv(format!("{prefix}.conv3"), width, cout, 1, 1, 0, rng),
            bn(format!("{prefix}.bn3"), cout),
        ],
        shortcut: downsample(prefix, cin, cout, stride, rng),
    })
}

/// Penultimate width 512.
pub fn resnet18<R: Rng + ?Sized>(rng: &mut R) -> Backbone {
    let mut stages = stem(rng);
    let mut cin = 64;
    for (layer, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let stride = if layer > 0 && block == 0 { 2 } else { 1 };
            stages.push(basic_block(&format!("layer{}.{block}", layer + 1), cin, width, stride, rng));
            cin = width;
        }
    }
    Backbone::new(Architecture::Resnet18, stages)
}

/// Penultimate width 2048.
pub fn resnet50<R: Rng + ?Sized>(rng: &mut R) -> Backbone {
    let mut stages = stem(rng);
    let mut cin = 64;
    for (layer, (&width, &blocks)) in [64usize, 128, 256, 512].iter().zip(&[3usize, 4, 6, 3]).enumerate() {
        for block in 0..blocks {
            let stride = if layer > 0 && block == 0 { 2 } else { 1 };
            stages.push(bottleneck(&format!("layer{}.{block}", layer + 1), cin, width, stride, rng));
            cin = width * 4;
        }
    }
    Backbone::new(Architecture::Resnet50, stages)
}
