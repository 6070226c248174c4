use neurodebug::counterfactual::{rank_neurons, OmegaResult};
use neurodebug::evaluation::{
    compare_edits, evaluate, flag_correlations, precision_at_k, predict_split, DeltaReport, EditSnapshot,
    MetricsReport, Predictions,
};
use neurodebug::model::{split_classifier, FeatureVector, ModelDescriptor};
use neurodebug::scenarios::{synth_planted_dataset, SampleCounts, ScenarioSpec};
use neurodebug::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn preds(predicted: Vec<usize>, labels: Vec<usize>, groups: Option<Vec<usize>>) -> Predictions {
    Predictions {
        split: "test".into(),
        split_digest: "d".into(),
        num_classes: 3,
        predicted,
        labels,
        groups,
    }
}

#[test]
fn counts_match_hand_tallies() {
    // class 0: 2/3, class 1: 0/1, class 2: 2/2
    let p = preds(
        vec![0, 0, 2, 0, 2, 2],
        vec![0, 0, 0, 1, 2, 2],
        Some(vec![0, 1, 1, 2, 4, 5]),
    );
    let m = MetricsReport::from_predictions(&p).unwrap();
    assert!((m.avg_acc - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(m.per_class_acc[&0], 2.0 / 3.0);
    assert_eq!(m.per_class_acc[&1], 0.0);
    assert_eq!(m.worst_class, (1, 0.0));
    let groups = m.per_group_acc.unwrap();
    assert_eq!(groups[&1], 0.5);
    // group 2 holds the only miss with accuracy 0
    assert_eq!(m.worst_group, Some((2, 0.0)));
    assert_eq!(m.n_samples, 6);
}

#[test]
fn mismatched_lengths_and_empty_splits_fail() {
    assert!(matches!(
        MetricsReport::from_predictions(&preds(vec![], vec![], None)),
        Err(Error::EmptySplit)
    ));
    assert!(MetricsReport::from_predictions(&preds(vec![0], vec![0, 1], None)).is_err());
    assert!(MetricsReport::from_predictions(&preds(vec![0, 1], vec![0, 1], Some(vec![0]))).is_err());
}

#[test]
fn evaluation_of_a_model_matches_its_predictions() {
    let spec = ScenarioSpec {
        sample_counts: SampleCounts { train: 1, val: 1, test: 10 },
        image_size: 16,
        ..ScenarioSpec::five_class(1)
    };
    let data = synth_planted_dataset(&spec).unwrap();
    let handle = split_classifier(&ModelDescriptor::Registry {
        name: "toy-cnn".into(),
        num_classes: 5,
        seed: 4,
        input_size: None,
        class_names: None,
    })
    .unwrap()
    .handle;
    let p = predict_split(&handle, &data.test, None).unwrap();
    let probs = handle.predict_images(&data.test.images()).unwrap();
    let correct = probs
        .iter()
        .zip(&data.test.samples)
        .filter(|(p, s)| (0..5).fold(0, |b, j| if p[j] > p[b] { j } else { b }) == s.label)
        .count();
    let m = evaluate(&handle, &data.test, None).unwrap();
    assert_eq!(m, MetricsReport::from_predictions(&p).unwrap());
    assert!((m.avg_acc - correct as f64 / 50.0).abs() < 1e-15);
    // the samples carry group labels, so group metrics come for free
    assert!(m.per_group_acc.is_some());
}

#[test]
fn correlations_match_a_direct_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let flags: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
    let features: Vec<FeatureVector> = flags
        .iter()
        .map(|&f| FeatureVector(vec![rng.random::<f64>() + if f { 1.0 } else { 0.0 }, rng.random(), 2.0]))
        .collect();
    let corr = flag_correlations(&features, &flags).unwrap();
    let y: Vec<f64> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    for k in 0..2 {
        let x: Vec<f64> = features.iter().map(|f| f[k]).collect();
        let (mx, my) = (x.iter().sum::<f64>() / 40.0, y.iter().sum::<f64>() / 40.0);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
        let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
        assert!((corr[k] - cov / (sx * sy)).abs() < 1e-12);
    }
    assert!(corr[0] > 0.7);
    assert_eq!(corr[2], 0.0);
    assert!(flag_correlations(&features, &flags[1..]).is_err());
}

fn omega(id: &str, w: Vec<f64>) -> OmegaResult {
    OmegaResult {
        sample_id: id.into(),
        target_class: 0,
        omega: w,
        flipped: true,
        steps_used: 1,
        final_loss: 0.0,
        loss_trace: vec![0.0],
    }
}

#[test]
fn precision_counts_samples_with_a_target_in_their_top_k() {
    let report = rank_neurons(
        &[
            omega("a", vec![5.0, 4.0, 3.0, 0.0]),
            omega("b", vec![0.0, 1.0, 0.0, 2.0]),
            omega("c", vec![1.0, 0.0, 0.0, 0.0]),
        ],
        3,
        true,
    )
    .unwrap();
    assert_eq!(precision_at_k(&report, &[2], 1), 0.0);
    assert_eq!(precision_at_k(&report, &[2], 3), 1.0 / 3.0);
    assert_eq!(precision_at_k(&report, &[0, 3], 1), 1.0);
    assert_eq!(precision_at_k(&report, &[3], 1), 1.0 / 3.0);
    assert_eq!(precision_at_k(&report, &[1], 2), 2.0 / 3.0);
}

#[test]
fn deltas_subtract_matching_snapshots() {
    let before = EditSnapshot {
        metrics: MetricsReport::from_predictions(&preds(vec![0, 1, 1, 2], vec![0, 0, 1, 2], Some(vec![0, 0, 2, 4])))
            .unwrap(),
        ranking: None,
    };
    let after = EditSnapshot {
        metrics: MetricsReport::from_predictions(&preds(vec![0, 0, 1, 1], vec![0, 0, 1, 2], Some(vec![0, 0, 2, 4])))
            .unwrap(),
        ranking: None,
    };
    let d = compare_edits("toy", &before, &after, &[], 5).unwrap();
    let row = &d.rows[0];
    assert_eq!((row.before_acc, row.after_acc), (0.75, 0.75));
    assert_eq!(row.delta_acc, 0.0);
    // worst class goes from class 0 at 0.5 to class 2 at 0.0
    assert_eq!(row.delta_worst_class, -0.5);
    assert_eq!(row.delta_worst_group, Some(-0.5));
    assert_eq!(row.delta_prec_at_k, None);

    let mut total = DeltaReport::default();
    total.extend(d.clone());
    total.extend(d);
    assert_eq!(total.rows.len(), 2);
    let table = total.render_table();
    assert!(table.contains("toy"));
    assert_eq!(table.lines().count(), 3);

    let mut other = after.clone();
    other.metrics.split_digest = "other".into();
    assert!(matches!(compare_edits("x", &before, &other, &[], 5), Err(Error::SplitMismatch(_))));
}
