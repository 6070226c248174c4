//! How much class `i` depends on neuron `k`: the closed-form ratio
//! p_i / p'_i, where p' is the probability with the neuron switched off.

use neurodebug::editor::{brute_force_ratio, probability_ratio, suggest_o, EditTarget};
use neurodebug::model::{DecisionLayer, FeatureVector};

fn main() -> neurodebug::Result<()> {
    let layer = DecisionLayer::new(
        3,
        2,
        vec![1.0, 0.3, 0.2, 0.1, -0.5, 0.4],
        vec![0.0, 0.1, -0.2],
    )?;
    let features = FeatureVector(vec![2.0, 1.0]);
    for i in 0..3 {
        let r = probability_ratio(&layer, &features, i, 0)?;
        println!(
            "class {i}: ratio {:.6} (brute force {:.6})",
            r.ratio,
            brute_force_ratio(&layer, features.as_slice(), i, 0)
        );
    }
    let o = suggest_o(&layer, &features, &[EditTarget { class_id: 0, neuron_id: 0 }])?;
    println!("suggested o for (class 0, neuron 0): {o:.4}");
    Ok(())
}
