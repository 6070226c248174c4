//! Explain the target class's mistakes on a planted scenario and rank the
//! neurons that most often need to change.
//!
//! The first run pretrains the planted backbone (about a minute) and caches it.

use neurodebug::counterfactual::{explain_mistakes, rank_neurons, select_core_neurons, OmegaConfig};
use neurodebug::planted::PlantedRun;
use neurodebug::scenarios::ScenarioSpec;

fn main() -> neurodebug::Result<()> {
    let run = PlantedRun::prepare(&ScenarioSpec::five_class(7), 1)?;
    let mistakes = run.mistakes()?;
    println!("{} mistakes on class {:?}", mistakes.len(), run.handle.class_names()[run.target_class()]);

    let results = explain_mistakes(&run.handle, &run.data.test, &mistakes, &OmegaConfig::default())?;
    let report = rank_neurons(&results, 5, true)?;
    println!("flip rate {:.3}", report.flip_rate());
    for n in select_core_neurons(&report, 0.03).into_iter().take(8) {
        println!("neuron {n:>3}  rank rate {:.3}  {:?}", report.rank_rate[n], report.category(n));
    }
    let (planted, corr) = run.confound_neuron()?;
    println!("ground truth: neuron {planted} tracks the patch (corr {corr:.3})");
    Ok(())
}
