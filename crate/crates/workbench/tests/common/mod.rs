#![allow(dead_code)]

use std::path::Path;

use neurodebug::model::{split_classifier, DecisionLayer, ModelDescriptor};
use neurodebug::scenarios::{SampleCounts, ScenarioSpec};
use neurodebug_workbench::{DatasetDescriptor, RunRequest, Workbench, WorkbenchConfig};

pub fn workbench(root: &Path) -> Workbench {
    Workbench::open(WorkbenchConfig {
        store: root.to_path_buf(),
        ..Default::default()
    })
    .unwrap()
}

/// The calibrated planted scenario: patch on every training image of class 1.
pub fn planted_request() -> RunRequest {
    let spec = ScenarioSpec::five_class(7);
    let mut r = RunRequest::new(
        ModelDescriptor::Registry {
            name: "planted-cnn".into(),
            num_classes: 5,
            seed: 1,
            input_size: None,
            class_names: None,
        },
        DatasetDescriptor::Planted { spec },
        1,
    );
    r.fit_decision_layer = true;
    r
}

pub fn small_spec() -> ScenarioSpec {
    ScenarioSpec {
        sample_counts: SampleCounts { train: 6, val: 4, test: 4 },
        image_size: 16,
        ..ScenarioSpec::five_class(3)
    }
}

/// A toy checkpoint whose decision layer predicts `class_id` for every input.
pub fn always_predicts(dir: &Path, class_id: usize) -> RunRequest {
    let loaded = split_classifier(&ModelDescriptor::Registry {
        name: "toy-cnn".into(),
        num_classes: 5,
        seed: 0,
        input_size: Some(16),
        class_names: None,
    })
    .unwrap();
    let d = loaded.handle.feature_dim();
    let mut biases = vec![0.0; 5];
    biases[class_id] = 50.0;
    let mut handle = loaded.handle.clone();
    handle
        .set_decision_layer(DecisionLayer::new(5, d, vec![0.0; 5 * d], biases).unwrap())
        .unwrap();
    let path = dir.join("always.safetensors");
    handle.save(&path, &loaded.architecture).unwrap();
    RunRequest::new(
        ModelDescriptor::File {
            path,
            decision_layer: None,
        },
        DatasetDescriptor::Planted { spec: small_spec() },
        class_id,
    )
}
