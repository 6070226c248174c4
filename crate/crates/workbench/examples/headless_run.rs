//! A whole debugging session without the server: inspect the planted
//! scenario, draw the top neuron for its two strongest classes, edit it out
//! and print the effect.
//!
//! cargo run --release -p neurodebug-workbench --example headless_run [store-dir]

use neurodebug::editor::EditTarget;
use neurodebug::model::ModelDescriptor;
use neurodebug::scenarios::ScenarioSpec;
use neurodebug_workbench::pipeline::{EditPreset, VisualOverrides};
use neurodebug_workbench::{
    ClassMode, DatasetDescriptor, EditRequest, RunRequest, VisualizationRequest, Workbench, WorkbenchConfig,
};

fn main() -> anyhow::Result<()> {
    let store = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("neurodebug-example-runs"));
    let wb = Workbench::open(WorkbenchConfig {
        store,
        ..Default::default()
    })?;

    let spec = ScenarioSpec::five_class(7);
    let target = spec.target_class;
    let mut request = RunRequest::new(
        ModelDescriptor::Registry {
            name: "planted-cnn".into(),
            num_classes: spec.base_classes.len(),
            seed: 1,
            input_size: None,
            class_names: None,
        },
        DatasetDescriptor::Planted { spec },
        target,
    );
    request.fit_decision_layer = true;

    let run_id = wb.create_run(&request)?.run_id;
    let manifest = wb.execute_run(&run_id)?;
    println!("run {run_id} -> {:?} in {}", manifest.status, wb.store.run_dir(&run_id).display());

    let ranking = wb.ranking(&run_id)?;
    println!("core neurons: {:?}", ranking.core_neurons);
    let top = ranking.core_neurons[0];

    let viz = VisualizationRequest {
        neurons: vec![top],
        classes: ClassMode::Auto { k: 2 },
        overrides: VisualOverrides {
            steps: Some(100),
            ..Default::default()
        },
    };
    wb.visualize(&run_id, &viz)?;
    for e in &wb.gallery(&run_id)?[0].entries {
        println!(
            "  neuron {} / {:<8} activation {:>6.2}  core relevance {}",
            e.neuron_id,
            e.class_name.as_deref().unwrap_or("-"),
            e.activation,
            e.core_relevance.map_or("-".into(), |v| format!("{v:+.3}"))
        );
    }

    let edit = EditRequest {
        targets: vec![EditTarget {
            class_id: target,
            neuron_id: top,
        }],
        preset: EditPreset::Planted,
        ..Default::default()
    };
    let plan = wb.check_edit(&run_id, &edit)?;
    wb.edit(&run_id, &plan)?;
    let view = wb.metrics(&run_id)?;
    print!("{}", view.edits[0].delta.render_table());
    Ok(())
}
