//! Split a registry model into extractor and decision layer, then round-trip
//! it through a safetensors checkpoint.

use neurodebug::model::{split_classifier, ModelDescriptor};
use neurodebug::tensor::Image;

fn main() -> neurodebug::Result<()> {
    let loaded = split_classifier(&ModelDescriptor::Registry {
        name: "resnet18".into(),
        num_classes: 10,
        seed: 0,
        input_size: Some(64),
        class_names: None,
    })?;
    let handle = &loaded.handle;
    println!("feature dim {}, classes {}", handle.feature_dim(), handle.num_classes());

    let image = Image::filled(3, 64, 64, 0.5);
    let features = handle.extract_features(std::slice::from_ref(&image))?;
    let probs = handle.predict(&features[0])?;
    println!("top probability {:.4}", probs.iter().copied().fold(0.0, f64::max));

    let dir = std::env::temp_dir().join("neurodebug-split-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("resnet18.safetensors");
    handle.save(&path, &loaded.architecture)?;
    let back = split_classifier(&ModelDescriptor::File {
        path: path.clone(),
        decision_layer: None,
    })?;
    assert_eq!(back.handle.decision_weights(), handle.decision_weights());
    println!("round trip through {}", path.display());
    Ok(())
}
