//! Retrain the decision layer of a planted model so the target class stops
//! relying on the confound neuron, and compare with the constraint baseline.

use neurodebug::editor::{edit_decision_layer, EditMethod, EditPlan, EditTarget};
use neurodebug::evaluation::{compare_edits, evaluate, DeltaReport, EditSnapshot};
use neurodebug::planted::PlantedRun;
use neurodebug::scenarios::ScenarioSpec;

fn main() -> neurodebug::Result<()> {
    let run = PlantedRun::prepare(&ScenarioSpec::five_class(7), 1)?;
    let (neuron, _) = run.confound_neuron()?;
    let plan = EditPlan::planted(vec![EditTarget {
        class_id: run.target_class(),
        neuron_id: neuron,
    }]);
    let before = EditSnapshot {
        metrics: evaluate(&run.handle, &run.data.test, None)?,
        ranking: None,
    };
    let mut table = DeltaReport::default();
    let constraint = EditPlan {
        method: EditMethod::Constraint,
        ..plan.clone()
    };
    for (name, plan) in [("ratio", &plan), ("constraint", &constraint)] {
        let mut handle = run.handle.clone();
        let outcome = edit_decision_layer(&mut handle, &run.train, &run.val, plan)?;
        println!(
            "{name}: ratio {:.3} -> {:.3}, confound-free accuracy {:.3} -> {:.3}",
            outcome.ratios_before[0].ratio,
            outcome.ratios_after[0].ratio,
            run.confound_free_accuracy(&outcome.original_layer)?,
            run.confound_free_accuracy(&outcome.edited_layer)?,
        );
        let after = EditSnapshot {
            metrics: evaluate(&handle, &run.data.test, None)?,
            ranking: None,
        };
        table.extend(compare_edits(name, &before, &after, &[neuron], 5)?);
    }
    print!("{}", table.render_table());
    Ok(())
}
