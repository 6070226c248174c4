//! End-to-end setup for a planted scenario: render the splits, load the
//! pretrained `planted-cnn` backbone and fit its decision layer on frozen
//! features.

use crate::error::Result;
use crate::evaluation::planted_confound_neuron;
use crate::model::{split_classifier, ClassifierHandle, DecisionLayer, ModelDescriptor};
use crate::scenarios::{collect_mistakes, synth_planted_dataset, MistakeSet, PlantedDataset, ScenarioSpec};
use crate::train::{score, train_decision_layer, LabeledFeatures, NoRegularizer, TrainConfig, TrainResult};

pub struct PlantedRun {
    pub data: PlantedDataset,
    /// Carries the fitted decision layer.
    pub handle: ClassifierHandle,
    pub train: LabeledFeatures,
    pub val: LabeledFeatures,
    pub test: LabeledFeatures,
    pub probe: TrainResult,
}

impl PlantedRun {
    pub fn prepare(spec: &ScenarioSpec, model_seed: u64) -> Result<Self> {
        let data = synth_planted_dataset(spec)?;
        let mut handle = split_classifier(&ModelDescriptor::Registry {
            name: "planted-cnn".into(),
            num_classes: spec.base_classes.len(),
            seed: model_seed,
            input_size: Some(spec.image_size),
            class_names: Some(spec.base_classes.clone()),
        })?
        .handle;
        let train = LabeledFeatures::from_dataset(&handle, &data.train)?;
        let val = LabeledFeatures::from_dataset(&handle, &data.val)?;
        let test = LabeledFeatures::from_dataset(&handle, &data.test)?;
        let probe = train_decision_layer(
            &handle.decision_weights(),
            &train,
            &val,
            &NoRegularizer,
            &TrainConfig::probe(spec.seed),
        )?;
        handle.set_decision_layer(probe.layer.clone())?;
        Ok(Self {
            data,
            handle,
            train,
            val,
            test,
            probe,
        })
    }

    pub fn target_class(&self) -> usize {
        self.data.spec.target_class
    }

    /// See [`planted_confound_neuron`].
    pub fn confound_neuron(&self) -> Result<(usize, f64)> {
        planted_confound_neuron(&self.handle, &self.data)
    }

    /// Misclassified test images of the target class.
    pub fn mistakes(&self) -> Result<MistakeSet> {
        collect_mistakes(&self.handle, &self.data.test, self.target_class())
    }

    /// Test accuracy on target-class images, none of which carry the attribute.
    pub fn confound_free_accuracy(&self, layer: &DecisionLayer) -> Result<f64> {
        Ok(score(layer, &self.test.of_class(self.target_class()))?.accuracy)
    }

    pub fn overall_accuracy(&self, layer: &DecisionLayer) -> Result<f64> {
        Ok(score(layer, &self.test)?.accuracy)
    }
}
