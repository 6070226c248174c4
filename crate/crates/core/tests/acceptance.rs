//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p neurodebug --test acceptance`. The planted
//! criteria share one prepared scenario; the first run pretrains the
//! planted backbone (about a minute) and caches it.

use std::time::{Duration, Instant};

use neurodebug::counterfactual::{
    explain_mistakes, mistake_loss, mistake_loss_grad, rank_neurons, select_core_neurons, OmegaConfig, RankingReport,
};
use neurodebug::editor::{
    con_baseline, edit_decision_layer, probability_ratio, ConstraintRegularizer, EditPlan, EditTarget,
    RatioRegularizer,
};
use neurodebug::imageio::encode_png;
use neurodebug::model::{softmax, split_classifier, ClassifierHandle, DecisionLayer, FeatureVector, ModelDescriptor};
use neurodebug::planted::PlantedRun;
use neurodebug::scenarios::ScenarioSpec;
use neurodebug::train::{cross_entropy, LayerGrad, Regularizer};
use neurodebug::visualizer::{
    build_prompt_embedding, class_representative, core_relevance, encoder_pair, generate_fv, generate_illusion, noise_image, Alignment, FvSpec,
    IllusionSpec, Objective, STUB_ENCODER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self {
            name,
            pass: Some(pass),
            detail,
        }
    }

    fn skipped(name: &'static str, detail: String) -> Self {
        Self {
            name,
            pass: None,
            detail,
        }
    }

    fn print(&self) {
        let tag = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("{tag} {}: {}", self.name, self.detail);
    }
}

fn random_layer(rng: &mut ChaCha8Rng, c: usize, d: usize) -> DecisionLayer {
    let n = Normal::new(0.0, 1.0).unwrap();
    DecisionLayer::new(
        c,
        d,
        (0..c * d).map(|_| n.sample(rng)).collect(),
        (0..c).map(|_| n.sample(rng)).collect(),
    )
    .unwrap()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn ratio_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let d = rng.random_range(1..=16);
        let layer = random_layer(&mut rng, c, d);
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let (i, k) = (rng.random_range(0..c), rng.random_range(0..d));
        let closed = probability_ratio(&layer, &FeatureVector(f.clone()), i, k).unwrap().ratio;
        // brute force: class-i probability with and without feature k
        let logits = |x: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|j| layer.biases[j] + (0..d).map(|m| layer.coefficients[j * d + m] * x[m]).sum::<f64>())
                .collect()
        };
        let mut zeroed = f.clone();
        zeroed[k] = 0.0;
        let brute = softmax(&logits(&f))[i] / softmax(&logits(&zeroed))[i];
        worst = worst.max((closed - brute).abs() / brute.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        "ratio oracle",
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max rel diff {worst:.2e} over 1000 instances (tol 1e-9), {elapsed:.2?} (limit 10 s)"),
    )
}

fn toy_handle() -> ClassifierHandle {
    split_classifier(&ModelDescriptor::Registry {
        name: "toy-cnn".into(),
        num_classes: 4,
        seed: 0,
        input_size: None,
        class_names: Some(["cat", "dog", "bear", "bird"].map(String::from).to_vec()),
    })
    .unwrap()
    .handle
}

fn layer_params(layer: &DecisionLayer) -> Vec<f64> {
    layer.coefficients.iter().chain(&layer.biases).copied().collect()
}

fn set_param(layer: &mut DecisionLayer, idx: usize, v: f64) {
    let n = layer.coefficients.len();
    if idx < n {
        layer.coefficients[idx] = v;
    } else {
        layer.biases[idx - n] = v;
    }
}

/// Central differences of `f` over every decision-layer parameter.
fn layer_fd(layer: &DecisionLayer, f: impl Fn(&DecisionLayer) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let params = layer_params(layer);
    (0..params.len())
        .map(|j| {
            let mut up = layer.clone();
            set_param(&mut up, j, params[j] + h);
            let mut down = layer.clone();
            set_param(&mut down, j, params[j] - h);
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // counterfactual objective in omega, away from the l1 kinks
    let layer = random_layer(&mut rng, 4, 6);
    let f: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
    let omega: Vec<f64> = (0..6)
        .map(|_| rng.random_range(0.1..0.8) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let analytic = mistake_loss_grad(&layer, &f, &omega, 2, 0.1, 0.01);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..6)
        .map(|k| {
            let mut up = omega.clone();
            up[k] += h;
            let mut down = omega.clone();
            down[k] -= h;
            (mistake_loss(&layer, &f, &up, 2, 0.1, 0.01) - mistake_loss(&layer, &f, &down, 2, 0.1, 0.01)) / (2.0 * h)
        })
        .collect();
    let e_mis = rel_err(&analytic, &numeric);

    // illusion objective in pixels with the stub encoders
    let handle = toy_handle();
    let pair = encoder_pair(STUB_ENCODER).unwrap();
    let templates: Vec<String> = vec!["a photo of a {}.".into()];
    let objective = Objective {
        neuron_id: 3,
        class_term: Some((1, 0.7)),
        alignment: Some(Alignment {
            encoder: pair.image.clone(),
            text: build_prompt_embedding(pair.text.as_ref(), "dog", &templates).unwrap(),
            epsilon: 0.1,
        }),
    };
    let mut image = noise_image(&handle, &mut rng);
    image.data.iter_mut().for_each(|v| *v = rng.random_range(0.2..0.8));
    let eval = objective.evaluate(&handle, &image).unwrap();
    let pixels: Vec<usize> = (0..5).map(|_| rng.random_range(0..image.data.len())).collect();
    let h = 1e-5;
    let numeric: Vec<f64> = pixels
        .iter()
        .map(|&p| {
            let mut up = image.clone();
            up.data[p] += h;
            let mut down = image.clone();
            down.data[p] -= h;
            let lu = objective.evaluate(&handle, &up).unwrap().step.loss;
            let ld = objective.evaluate(&handle, &down).unwrap().step.loss;
            (lu - ld) / (2.0 * h)
        })
        .collect();
    let analytic: Vec<f64> = pixels.iter().map(|&p| eval.grad.data[p]).collect();
    let e_ci = rel_err(&analytic, &numeric);

    // editing and constraint objectives in the decision weights
    let layer = random_layer(&mut rng, 3, 4);
    let feats: Vec<FeatureVector> = (0..6)
        .map(|_| FeatureVector((0..4).map(|_| rng.random_range(0.0..2.0)).collect()))
        .collect();
    let refs: Vec<&FeatureVector> = feats.iter().collect();
    let labels = [0, 1, 2, 1, 0, 2];
    let target = vec![EditTarget { class_id: 1, neuron_id: 2 }];
    let edit = RatioRegularizer {
        targets: target.clone(),
        o: 1.0,
        lambda3: 1.0,
    };
    let con = ConstraintRegularizer {
        targets: target,
        lambda: 1.0,
    };
    let objective_grad = |reg: &dyn Regularizer| {
        let total = |l: &DecisionLayer| {
            let mut scratch = LayerGrad::zeros_like(l);
            cross_entropy(l, &refs, &labels, None) + reg.value_and_grad(l, &refs, &mut scratch)
        };
        let mut g = LayerGrad::zeros_like(&layer);
        cross_entropy(&layer, &refs, &labels, Some(&mut g));
        reg.value_and_grad(&layer, &refs, &mut g);
        let analytic: Vec<f64> = g.coefficients.iter().chain(&g.biases).copied().collect();
        rel_err(&analytic, &layer_fd(&layer, total))
    };
    let e_edit = objective_grad(&edit);
    let e_con = objective_grad(&con);

    let elapsed = start.elapsed();
    let pass = e_mis <= 1e-4 && e_ci <= 1e-3 && e_edit <= 1e-4 && e_con <= 1e-4 && elapsed < Duration::from_secs(60);
    Outcome::new(
        "gradient suite",
        pass,
        format!(
            "rel err mistake {e_mis:.1e}, illusion {e_ci:.1e} (tol 1e-3), edit {e_edit:.1e}, constraint {e_con:.1e} (tol 1e-4), {elapsed:.2?}"
        ),
    )
}

struct Planted {
    run: PlantedRun,
    report: RankingReport,
    n_mistakes: usize,
    elapsed: Duration,
}

fn prepare_planted() -> Planted {
    let start = Instant::now();
    let run = PlantedRun::prepare(&ScenarioSpec::five_class(7), 1).unwrap();
    let mistakes = run.mistakes().unwrap();
    let results = explain_mistakes(&run.handle, &run.data.test, &mistakes, &OmegaConfig::default()).unwrap();
    let report = rank_neurons(&results, 5, true).unwrap();
    Planted {
        n_mistakes: mistakes.len(),
        run,
        report,
        elapsed: start.elapsed(),
    }
}

fn flip_rate(p: &Planted) -> Outcome {
    let rate = p.report.flip_rate();
    Outcome::new(
        "counterfactual flip rate",
        rate >= 0.9,
        format!("{rate:.3} of {} mistakes flipped within 200 steps (need >= 0.90)", p.n_mistakes),
    )
}

fn neuron_recovery(p: &Planted) -> Outcome {
    let (neuron, corr) = p.run.confound_neuron().unwrap();
    let rate = p.report.rank_rate[neuron];
    let core = select_core_neurons(&p.report, 0.03).contains(&neuron);
    Outcome::new(
        "planted-neuron recovery",
        rate >= 0.5 && core && p.elapsed < Duration::from_secs(300),
        format!(
            "neuron {neuron} (confound corr {corr:.3}) rank rate {rate:.3} (need >= 0.5), core at 3%: {core}, {:.1?} (limit 5 min)",
            p.elapsed
        ),
    )
}

fn editing_efficacy(p: &Planted) -> Outcome {
    let run = &p.run;
    let (neuron, _) = run.confound_neuron().unwrap();
    let plan = EditPlan::planted(vec![EditTarget {
        class_id: run.target_class(),
        neuron_id: neuron,
    }]);
    let original = run.handle.decision_weights();
    let edited = edit_decision_layer(&mut run.handle.clone(), &run.train, &run.val, &plan).unwrap();
    let con = con_baseline(&mut run.handle.clone(), &run.train, &run.val, &plan).unwrap();
    let measure = |l: &DecisionLayer| {
        (
            run.confound_free_accuracy(l).unwrap(),
            run.overall_accuracy(l).unwrap(),
        )
    };
    let (cf0, all0) = measure(&original);
    let (cf_e, all_e) = measure(&edited.edited_layer);
    let (cf_c, all_c) = measure(&con.edited_layer);
    let (gain_e, drop_e) = (cf_e - cf0, all0 - all_e);
    let (gain_c, drop_c) = (cf_c - cf0, all0 - all_c);
    let tol = 1e-9;
    let ours = gain_e >= 0.05 - tol && drop_e <= 0.02 + tol;
    let beats_con = drop_c > drop_e + tol || gain_c < gain_e - tol;
    Outcome::new(
        "editing efficacy",
        ours && beats_con,
        format!(
            "edit: confound-free {cf0:.3} -> {cf_e:.3} ({:+.1} pts, need >= +5), overall {all0:.3} -> {all_e:.3} (drop {:.1} pts, limit 2); constraint: {:+.1} pts confound-free, drop {:.1} pts",
            100.0 * gain_e,
            100.0 * drop_e,
            100.0 * gain_c,
            100.0 * drop_c
        ),
    )
}

/// Gradient descent on `(R - 1)^2` alone; returns `max_j |a_k (B[j][k] - B[i][k])|`.
fn drive_ratio_to_one(mut layer: DecisionLayer, f: &[f64], i: usize, k: usize) -> f64 {
    let reg = RatioRegularizer {
        targets: vec![EditTarget { class_id: i, neuron_id: k }],
        o: 1.0,
        lambda3: 1.0,
    };
    for _ in 0..200_000 {
        let mut g = LayerGrad::zeros_like(&layer);
        let value = reg.at_features(&layer, f, Some(&mut g));
        if value < 1e-26 {
            break;
        }
        for (w, d) in layer.coefficients.iter_mut().zip(&g.coefficients) {
            *w -= 0.05 * d;
        }
        for (b, d) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= 0.05 * d;
        }
    }
    (0..layer.num_classes)
        .map(|j| (f[k] * (layer.coef(j, k) - layer.coef(i, k))).abs())
        .fold(0.0, f64::max)
}

fn regularizer_semantics() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = [0.8, 1.3, 0.4];
    let two = random_layer(&mut rng, 2, 3);
    let gap_two = drive_ratio_to_one(two, &f, 0, 1);
    let four = random_layer(&mut rng, 4, 3);
    let gap_four = drive_ratio_to_one(four, &f, 0, 1);
    vec![
        Outcome::new(
            "regularizer semantics",
            gap_two <= 1e-4,
            format!("two-class toy layer: max_j |a_k (B[j][k] - B[i][k])| = {gap_two:.2e} after R -> 1 (tol 1e-4)"),
        ),
        Outcome::skipped(
            "regularizer semantics, four classes (informational)",
            format!(
                "residual column spread {gap_four:.2e}; R = 1 only fixes a weighted mean of exp(a_k (B[j][k] - B[i][k])), so spreads can cancel with more than one other class"
            ),
        ),
    ]
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn visualizer_activation() -> Outcome {
    let handle = toy_handle();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise: Vec<_> = (0..1000).map(|_| noise_image(&handle, &mut rng)).collect();
    let feats = handle.extract_features(&noise).unwrap();
    let d = handle.feature_dim();
    let (mut fv_hits, mut il_hits) = (0, 0);
    for n in 0..d {
        let mut acts: Vec<f64> = feats.iter().map(|f| f[n]).collect();
        acts.sort_by(f64::total_cmp);
        let p99 = percentile(&acts, 0.99);
        let fv = generate_fv(&handle, &FvSpec::new(n)).unwrap();
        let il = generate_illusion(&handle, &IllusionSpec::new(n, None)).unwrap();
        fv_hits += usize::from(fv.activation > p99);
        il_hits += usize::from(il.activation > p99);
    }
    let mut means = Vec::new();
    for gamma in [0.0, 0.5, 1.0] {
        let total: f64 = (0..5)
            .map(|seed| {
                let spec = IllusionSpec {
                    gamma,
                    seed,
                    ..IllusionSpec::new(0, None)
                };
                generate_illusion(&handle, &spec).unwrap().class_logit.unwrap()
            })
            .sum();
        means.push(total / 5.0);
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let fv_frac = fv_hits as f64 / d as f64;
    let il_frac = il_hits as f64 / d as f64;
    Outcome::new(
        "visualizer activation",
        fv_frac >= 0.9 && il_frac >= 0.9 && monotone,
        format!(
            "above noise p99: fv {fv_hits}/{d}, illusion {il_hits}/{d} (need >= 90%); mean class logit over gamma 0, 0.5, 1: {:.3}, {:.3}, {:.3} (non-decreasing: {monotone})",
            means[0], means[1], means[2]
        ),
    )
}

/// Not a gating criterion: compares the core relevance of the planted neuron
/// with that of the neuron contributing most to the clean target logit.
fn core_relevance_example(p: &Planted) -> Outcome {
    let run = &p.run;
    let t = run.target_class();
    let (spurious, _) = run.confound_neuron().unwrap();
    let layer = run.handle.decision_weights();
    let clean = run.test.of_class(t).mean_features().unwrap();
    let core = (0..layer.feature_dim)
        .filter(|&k| k != spurious)
        .max_by(|&a, &b| (layer.coef(t, a) * clean[a]).total_cmp(&(layer.coef(t, b) * clean[b])))
        .unwrap();
    let rep = class_representative(&run.handle, &run.data.test, t).unwrap();
    let mean_score = |n: usize| {
        let scores: Vec<(f64, f64)> = (0..5)
            .filter_map(|seed| {
                let spec = IllusionSpec {
                    steps: 150,
                    seed,
                    ..IllusionSpec::new(n, Some(t))
                };
                let r = generate_illusion(&run.handle, &spec).unwrap();
                core_relevance(&r, &rep, &run.handle).ok().map(|c| (c.score, r.activation))
            })
            .collect();
        let k = scores.len().max(1) as f64;
        (
            scores.iter().map(|s| s.0).sum::<f64>() / k,
            scores.iter().map(|s| s.1).sum::<f64>() / k,
        )
    };
    let (s_sp, a_sp) = mean_score(spurious);
    let (s_core, a_core) = mean_score(core);
    Outcome::skipped(
        "core relevance, spurious vs core (informational)",
        format!(
            "spurious neuron {spurious}: score {s_sp:+.3} (activation {a_sp:.1}); core neuron {core}: score {s_core:+.3} (activation {a_core:.1}); spurious lower: {}",
            s_sp < s_core
        ),
    )
}

fn full_scale_mirror() -> Outcome {
    Outcome::skipped(
        "full-scale mirror (not gating)",
        "needs ResNet-18 weights and a production image/text encoder pair; only the stub pair is bundled".into(),
    )
}

fn determinism(p: &Planted) -> Outcome {
    let again = prepare_planted();
    let a = serde_json::to_string(&p.report).unwrap();
    let b = serde_json::to_string(&again.report).unwrap();
    let handle = toy_handle();
    let spec = IllusionSpec {
        steps: 100,
        seed: 4,
        ..IllusionSpec::new(2, Some(3))
    };
    let x = generate_illusion(&handle, &spec).unwrap();
    let y = generate_illusion(&handle, &spec).unwrap();
    let png_same = encode_png(&x.image).unwrap() == encode_png(&y.image).unwrap()
        && encode_png(&x.masked_image).unwrap() == encode_png(&y.masked_image).unwrap();
    let result_same = x == y;
    Outcome::new(
        "determinism",
        a == b && png_same && result_same,
        format!(
            "ranking JSON identical: {}, illusion PNG bytes identical: {png_same}, full result identical: {result_same}",
            a == b
        ),
    )
}

fn main() {
    let mut outcomes = vec![ratio_oracle(), gradient_suite()];
    let planted = prepare_planted();
    outcomes.push(flip_rate(&planted));
    outcomes.push(neuron_recovery(&planted));
    outcomes.push(editing_efficacy(&planted));
    outcomes.extend(regularizer_semantics());
    outcomes.push(visualizer_activation());
    outcomes.push(core_relevance_example(&planted));
    outcomes.push(full_scale_mirror());
    outcomes.push(determinism(&planted));
    for o in &outcomes {
        o.print();
    }
    let failed = outcomes.iter().filter(|o| o.pass == Some(false)).count();
    println!("{} passed, {failed} failed", outcomes.iter().filter(|o| o.pass == Some(true)).count());
    if failed > 0 {
        std::process::exit(1);
    }
}
