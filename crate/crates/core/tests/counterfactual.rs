use neurodebug::counterfactual::{
    explain_mistakes, mistake_loss, mistake_loss_grad, optimize_omega, rank_neurons, select_core_neurons,
    top_k_by_magnitude, OmegaConfig, OmegaMethod, OmegaResult,
};
use neurodebug::model::{split_classifier, DecisionLayer, FeatureVector, ModelDescriptor};
use neurodebug::scenarios::{collect_mistakes, synth_planted_dataset, SampleCounts, ScenarioSpec};
use neurodebug::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_layer(rng: &mut ChaCha8Rng, c: usize, d: usize) -> DecisionLayer {
    DecisionLayer::new(
        c,
        d,
        (0..c * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn logits(layer: &DecisionLayer, f: &[f64]) -> Vec<f64> {
    (0..layer.num_classes)
        .map(|i| layer.biases[i] + (0..layer.feature_dim).map(|k| layer.coefficients[i * layer.feature_dim + k] * f[k]).sum::<f64>())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn gradient_matches_central_differences_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (c, d) = (rng.random_range(2..6), rng.random_range(2..12));
        let layer = random_layer(&mut rng, c, d);
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        // keep every entry well away from zero so both norms are smooth
        let omega: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.2..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let y = rng.random_range(0..c);
        let g = mistake_loss_grad(&layer, &f, &omega, y, 0.1, 0.01);
        let h = 1e-6;
        for k in 0..d {
            let mut plus = omega.clone();
            let mut minus = omega.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (mistake_loss(&layer, &f, &plus, y, 0.1, 0.01) - mistake_loss(&layer, &f, &minus, y, 0.1, 0.01)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1.0), "k={k}: {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn flipped_means_the_shifted_features_predict_the_true_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut flips = 0;
    for s in 0..40 {
        let layer = random_layer(&mut rng, 4, 6);
        let f: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
        let predicted = argmax(&logits(&layer, &f));
        let y = (predicted + 1 + s % 3) % 4;
        let r = optimize_omega(format!("s{s}"), &FeatureVector(f.clone()), y, &layer, &OmegaConfig::default()).unwrap();
        let shifted: Vec<f64> = f.iter().zip(&r.omega).map(|(a, b)| a + b).collect();
        assert_eq!(r.flipped, argmax(&logits(&layer, &shifted)) == y);
        assert_eq!(r.loss_trace.len(), r.steps_used + 1);
        assert!(r.final_loss <= r.loss_trace[0] + 1e-12);
        flips += usize::from(r.flipped);
    }
    assert!(flips > 0);
}

#[test]
fn both_methods_reduce_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layer = random_layer(&mut rng, 3, 5);
    let f = FeatureVector((0..5).map(|_| rng.random_range(0.0..2.0)).collect());
    let y = (argmax(&logits(&layer, f.as_slice())) + 1) % 3;
    let prox = optimize_omega("a", &f, y, &layer, &OmegaConfig::default()).unwrap();
    let sub = optimize_omega(
        "a",
        &f,
        y,
        &layer,
        &OmegaConfig {
            method: OmegaMethod::Subgradient,
            ..OmegaConfig::default()
        },
    )
    .unwrap();
    assert!(prox.final_loss < prox.loss_trace[0]);
    assert!(sub.final_loss < sub.loss_trace[0]);
    // the proximal map handles the kinks exactly, so it should not lose
    assert!(prox.final_loss <= sub.final_loss + 1e-6);
}

#[test]
fn invalid_configs_and_targets_are_rejected() {
    let layer = DecisionLayer::zeros(3, 4);
    let f = FeatureVector(vec![1.0; 4]);
    let bad = OmegaConfig {
        lambda1: -0.1,
        ..OmegaConfig::default()
    };
    assert!(matches!(optimize_omega("x", &f, 0, &layer, &bad), Err(Error::InvalidConfig(_))));
    assert!(optimize_omega("x", &f, 3, &layer, &OmegaConfig::default()).is_err());
    assert!(matches!(
        optimize_omega("x", &FeatureVector(vec![1.0; 5]), 0, &layer, &OmegaConfig::default()),
        Err(Error::ShapeMismatch { .. })
    ));
}

fn result(id: &str, omega: Vec<f64>) -> OmegaResult {
    OmegaResult {
        sample_id: id.into(),
        target_class: 0,
        omega,
        flipped: true,
        steps_used: 1,
        final_loss: 0.0,
        loss_trace: vec![0.0, 0.0],
    }
}

#[test]
fn rank_rates_match_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let results: Vec<OmegaResult> = (0..30)
        .map(|i| {
            let omega = (0..10)
                .map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random_range(-1.0..1.0) })
                .collect();
            result(&format!("r{i}"), omega)
        })
        .collect();
    let report = rank_neurons(&results, 5, true).unwrap();
    for n in 0..10 {
        let mut count = 0;
        for r in &results {
            // n ranks when fewer than five non-zero entries beat it
            let mine = r.omega[n].abs();
            let better = (0..10)
                .filter(|&m| {
                    let o = r.omega[m].abs();
                    o > mine || (o == mine && m < n)
                })
                .count();
            if mine > 0.0 && better < 5 {
                count += 1;
            }
        }
        assert!((report.rank_rate[n] - count as f64 / 30.0).abs() < 1e-15);
    }
    let total: f64 = report.rank_rate.iter().sum();
    assert!(total <= 5.0 + 1e-12);
    assert_eq!(rank_neurons(&results, 5, true).unwrap(), report);
    for t in &report.sample_top {
        let r = results.iter().find(|r| r.sample_id == t.sample_id).unwrap();
        assert_eq!(t.neurons, top_k_by_magnitude(&r.omega, 5));
    }
}

#[test]
fn core_selection_respects_the_threshold() {
    let results = vec![
        result("a", vec![3.0, 0.0, 1.0, 0.0]),
        result("b", vec![2.0, 0.5, 0.0, 0.0]),
        result("c", vec![1.0, 0.0, 0.0, 0.0]),
    ];
    let report = rank_neurons(&results, 1, true).unwrap();
    assert_eq!(report.rank_rate, vec![1.0, 0.0, 0.0, 0.0]);
    let report = rank_neurons(&results, 2, true).unwrap();
    assert_eq!(select_core_neurons(&report, 0.0), vec![0, 1, 2]);
    assert_eq!(select_core_neurons(&report, 0.5), vec![0]);
    assert!(select_core_neurons(&report, 1.01).is_empty());
}

#[test]
fn reports_serialize_sparsely() {
    let results = vec![result("a", vec![0.0, -2.0, 0.0, 1.0]), result("b", vec![0.0, -1.0, 0.0, 0.0])];
    let report = rank_neurons(&results, 5, true).unwrap();
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    let keys: Vec<&String> = json["rank_rates"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["1", "3"]);
    assert_eq!(json["categories"]["1"], "excessive");
    assert_eq!(json["categories"]["3"], "insufficient");
    let back: neurodebug::counterfactual::RankingReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn explains_every_mistake_of_a_real_split() {
    let spec = ScenarioSpec {
        sample_counts: SampleCounts { train: 2, val: 2, test: 12 },
        image_size: 16,
        ..ScenarioSpec::five_class(5)
    };
    let data = synth_planted_dataset(&spec).unwrap();
    let handle = split_classifier(&ModelDescriptor::Registry {
        name: "toy-cnn".into(),
        num_classes: 5,
        seed: 1,
        input_size: None,
        class_names: None,
    })
    .unwrap()
    .handle;
    let mut total = 0;
    for class in 0..5 {
        let mistakes = collect_mistakes(&handle, &data.test, class).unwrap();
        total += mistakes.len();
        if mistakes.is_empty() {
            continue;
        }
        let results = explain_mistakes(&handle, &data.test, &mistakes, &OmegaConfig::default()).unwrap();
        assert_eq!(results.len(), mistakes.len());
        for (r, m) in results.iter().zip(&mistakes.samples) {
            assert_eq!(r.sample_id, m.sample_id);
            assert_eq!(r.target_class, class);
            assert_eq!(r.omega.len(), handle.feature_dim());
        }
    }
    // an untrained toy head gets most of five classes wrong
    assert!(total > 0);
}
