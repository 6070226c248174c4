use neurodebug::model::{
    load_decision_layer, save_decision_layer, softmax, split_classifier, toy_fixture_decision, ClassifierHandle,
    DecisionLayer, FeatureVector, ModelDescriptor,
};
use neurodebug::nn::io::TensorFile;
use neurodebug::tensor::Image;
use neurodebug::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn registry(name: &str, classes: usize, input_size: Option<usize>) -> ModelDescriptor {
    ModelDescriptor::Registry {
        name: name.into(),
        num_classes: classes,
        seed: 3,
        input_size,
        class_names: None,
    }
}

fn toy(classes: usize) -> ClassifierHandle {
    split_classifier(&registry("toy-cnn", classes, None)).unwrap().handle
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn toy_fixture_composes() {
    let handle = toy(4);
    assert_eq!(handle.feature_dim(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Image> = (0..5).map(|_| random_image(&mut rng, 16, 16)).collect();
    let end_to_end = handle.predict_images(&images).unwrap();
    let features = handle.extract_features(&images).unwrap();
    for (p, f) in end_to_end.iter().zip(&features) {
        let composed = handle.predict(f).unwrap();
        for (a, b) in p.iter().zip(&composed) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

/// Direct loops over a valid convolution, for the zero-image oracle.
fn valid_conv(input: &[Vec<f64>], side: usize, weight: &[f64], bias: &[f64], k: usize) -> (Vec<Vec<f64>>, usize) {
    let (cin, out) = (input.len(), bias.len());
    let os = side - k + 1;
    let mut y = vec![vec![0.0; os * os]; out];
    for (o, plane) in y.iter_mut().enumerate() {
        for oy in 0..os {
            for ox in 0..os {
                let mut acc = bias[o];
                for (i, inp) in input.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += weight[((o * cin + i) * k + ky) * k + kx] * inp[(oy + ky) * side + ox + kx];
                        }
                    }
                }
                plane[oy * os + ox] = acc.max(0.0);
            }
        }
    }
    (y, os)
}

#[test]
fn zero_image_gives_the_bias_response() {
    let handle = toy(3);
    let mut file = TensorFile::default();
    handle.extractor().export(&mut file).unwrap();
    let mut names: Vec<&String> = file.tensors.keys().filter(|n| n.ends_with(".weight")).collect();
    names.sort();
    let mut x = vec![vec![0.0; 16 * 16]; 3];
    let mut side = 16;
    for name in names {
        let w = &file.tensors[name];
        let b = &file.tensors[&name.replace(".weight", ".bias")];
        (x, side) = valid_conv(&x, side, &w.values, &b.values, w.shape[2]);
    }
    let expected: Vec<f64> = x.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
    let f = handle.extract_features(&[Image::zeros(3, 16, 16)]).unwrap();
    for (got, want) in f[0].as_slice().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    // two valid 3x3 convolutions on 16x16
    assert_eq!(side, 12);
}

#[test]
fn batches_keep_shape_and_are_deterministic() {
    let handle = toy(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
    let a = handle.extract_features(&images).unwrap();
    let b = handle.extract_features(&images).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|f| f.len() == 8));
    assert_eq!(a, b);
}

#[test]
fn wrong_geometry_is_a_shape_mismatch() {
    let handle = toy(3);
    let err = handle.extract_features(&[Image::zeros(3, 15, 16)]).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    let err = handle.predict(&FeatureVector(vec![0.0; 7])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn decision_weights_are_a_detached_copy() {
    let handle = toy(5);
    let mut copy = handle.decision_weights();
    assert_eq!(copy, toy_fixture_decision(5, 8));
    assert_eq!(copy.coefficients.len(), 5 * handle.feature_dim());
    *copy.coef_mut(0, 0) += 1.0;
    assert_eq!(handle.decision_weights(), toy_fixture_decision(5, 8));
    assert_eq!(handle.decision_weights(), handle.decision_weights());
}

#[test]
fn spatial_maps_pool_to_features() {
    let handle = toy(3);
    let constant = Image::filled(3, 16, 16, 0.6);
    let map = handle.neuron_spatial_map(&constant, 4).unwrap();
    assert!(map.grid.iter().all(|v| (v - map.grid[0]).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let img = random_image(&mut rng, 16, 16);
        let n = rng.random_range(0..8);
        let pooled = handle.neuron_spatial_map(&img, n).unwrap().pooled();
        let f = handle.extract_features(std::slice::from_ref(&img)).unwrap()[0][n];
        worst = worst.max((pooled - f).abs() / f.abs().max(1e-12));
    }
    assert!(worst <= 1e-4, "{worst}");
    assert!(matches!(
        handle.neuron_spatial_map(&constant, 8),
        Err(Error::NeuronOutOfRange { neuron: 8, dim: 8 })
    ));
}

#[test]
fn predict_is_a_softmax() {
    let mut layer = DecisionLayer::zeros(4, 3);
    let uniform = layer.probabilities(&[0.0; 3]).unwrap();
    assert!(uniform.iter().all(|p| (p - 0.25).abs() < 1e-15));

    *layer.coef_mut(2, 0) = 50.0;
    let p = layer.probabilities(&[1.0, 0.0, 0.0]).unwrap();
    assert!(p[2] >= 1.0 - 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (c, d) = (rng.random_range(2..8), rng.random_range(1..10));
        let coefficients: Vec<f64> = (0..c * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let biases: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let layer = DecisionLayer::new(c, d, coefficients.clone(), biases.clone()).unwrap();
        let got = layer.probabilities(&f).unwrap();
        let logits: Vec<f64> = (0..c)
            .map(|i| biases[i] + (0..d).map(|k| coefficients[i * d + k] * f[k]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - (l - max).exp() / z).abs() <= 1e-9);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert_eq!(softmax(&logits).len(), c);
    }
}

#[test]
fn residual_backbones_expose_standard_widths() {
    let r18 = split_classifier(&registry("resnet18", 10, Some(32))).unwrap();
    assert_eq!(r18.handle.feature_dim(), 512);
    let r50 = split_classifier(&registry("resnet50", 2, Some(32))).unwrap();
    assert_eq!(r50.handle.feature_dim(), 2048);
}

#[test]
fn unknown_registry_name_is_unsupported() {
    let err = split_classifier(&registry("vit-b-16", 3, None)).unwrap_err();
    assert!(matches!(err, Error::UnsupportedArchitecture(_)));
}

#[test]
fn checkpoints_round_trip_through_safetensors() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = split_classifier(&registry("toy-cnn", 3, None)).unwrap();
    let path = dir.path().join("toy.safetensors");
    loaded.handle.save(&path, &loaded.architecture).unwrap();
    let back = split_classifier(&ModelDescriptor::File {
        path: path.clone(),
        decision_layer: None,
    })
    .unwrap();
    let img = Image::filled(3, 16, 16, 0.3);
    assert_eq!(
        loaded.handle.predict_images(std::slice::from_ref(&img)).unwrap(),
        back.handle.predict_images(std::slice::from_ref(&img)).unwrap()
    );

    // a separately stored decision layer overrides the bundled one
    let mut edited = loaded.handle.decision_weights();
    *edited.coef_mut(1, 2) = 4.0;
    let overlay = dir.path().join("edited.safetensors");
    save_decision_layer(&overlay, &edited).unwrap();
    assert_eq!(load_decision_layer(&overlay).unwrap(), edited);
    let with_overlay = split_classifier(&ModelDescriptor::File {
        path,
        decision_layer: Some(overlay),
    })
    .unwrap();
    assert_eq!(with_overlay.handle.decision_weights(), edited);
}

#[test]
fn files_without_a_dense_layer_or_with_garbage_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = split_classifier(&registry("toy-cnn", 3, None)).unwrap();
    let mut file = TensorFile::default();
    loaded.handle.extractor().export(&mut file).unwrap();
    file.metadata.insert(
        "architecture".into(),
        serde_json::to_string(&loaded.architecture).unwrap(),
    );
    let headless = dir.path().join("headless.safetensors");
    file.write(&headless).unwrap();
    let err = split_classifier(&ModelDescriptor::File {
        path: headless,
        decision_layer: None,
    })
    .unwrap_err();
    assert!(matches!(err, Error::UnsupportedArchitecture(_)));

    let garbage = dir.path().join("garbage.safetensors");
    std::fs::write(&garbage, b"not a tensor file").unwrap();
    let err = split_classifier(&ModelDescriptor::File {
        path: garbage,
        decision_layer: None,
    })
    .unwrap_err();
    assert!(matches!(err, Error::WeightLoad { .. }));
}
