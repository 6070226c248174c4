use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use neurodebug::counterfactual::{OmegaConfig, OmegaMethod};
use neurodebug::editor::EditMethod;
use neurodebug::evaluation::DeltaReport;
use neurodebug::model::{ModelDescriptor, REGISTRY};
use neurodebug::scenarios::ScenarioSpec;
use neurodebug_workbench::api::{serve, AppState};
use neurodebug_workbench::pipeline::{load_splits, parse_targets, EditPreset, VisualOverrides};
use neurodebug_workbench::{
    ClassMode, DatasetDescriptor, EditRequest, RunRequest, RunStatus, VisualizationRequest, Workbench, WorkbenchConfig,
};

/// Neuron-level debugging for image classifiers.
#[derive(Debug, Parser)]
#[command(name = "neurodebug", version)]
struct Cli {
    /// TOML config; keys set there override the matching flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Print JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Find the neurons behind a class's mistakes.
    Inspect(InspectArgs),
    /// Render class-conditional visualisations for ranked neurons.
    Visualize(VisualizeArgs),
    /// Retrain the decision layer against selected neurons.
    Edit(EditArgs),
    /// Print base metrics and the effect of every edit.
    Evaluate(RunArg),
    /// Start the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Full run request as JSON; other inspect flags are ignored.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Registry name or path to a safetensors checkpoint.
    #[arg(long, default_value = "planted-cnn")]
    model: String,
    /// Classes of a registry model; defaults to the dataset's.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    input_size: Option<usize>,
    /// Separately stored decision layer for a checkpoint.
    #[arg(long)]
    decision_layer: Option<PathBuf>,
    /// Render the five-class planted scenario with this seed.
    #[arg(long, conflicts_with = "dataset_dir")]
    planted_seed: Option<u64>,
    /// Image folder with `train/` and `test/` (and optionally `val/`).
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Class whose mistakes are explained; defaults to the planted target.
    #[arg(long)]
    class_id: Option<usize>,
    #[arg(long)]
    fit_decision_layer: bool,
    /// Split the mistakes come from.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    omega_steps: Option<usize>,
    #[arg(long)]
    subgradient: bool,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0.03)]
    core_threshold: f64,
}

#[derive(Debug, Args)]
struct RunArg {
    #[arg(long)]
    run: String,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    run: String,
    /// Comma-separated neuron ids; defaults to the run's core neurons.
    #[arg(long, value_delimiter = ',')]
    neurons: Vec<usize>,
    /// `target` or `auto:K`.
    #[arg(long, default_value = "auto:25")]
    classes: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    encoder: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Ratio,
    Constraint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Default,
    Planted,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    run: String,
    /// `class:neuron`, repeatable or comma-separated.
    #[arg(long = "target", required = true)]
    targets: Vec<String>,
    #[arg(long, conflicts_with = "suggest_o")]
    o: Option<f64>,
    #[arg(long)]
    suggest_o: bool,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum, default_value = "default")]
    preset: PresetArg,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    /// Built UI to serve at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> anyhow::Result<WorkbenchConfig> {
    let mut config = WorkbenchConfig::default();
    if let Some(s) = &cli.store {
        config.store = s.clone();
    }
    if let Command::Serve(a) = &cli.command {
        if let Some(p) = a.port {
            config.port = p;
        }
        if a.ui_dir.is_some() {
            config.ui_dir = a.ui_dir.clone();
        }
    }
    if let Some(path) = &cli.config {
        config = config.overlay_file(path)?;
    }
    Ok(config.resolve_device()?)
}

fn run_request(a: &InspectArgs) -> anyhow::Result<RunRequest> {
    if let Some(path) = &a.request {
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        return Ok(serde_json::from_str(&text)?);
    }
    let (dataset, default_class) = match (&a.planted_seed, &a.dataset_dir) {
        (_, Some(root)) => (
            DatasetDescriptor::ImageFolder {
                root: root.clone(),
                val_fraction: 0.2,
                split_seed: 0,
            },
            None,
        ),
        (seed, None) => {
            let spec = ScenarioSpec::five_class(seed.unwrap_or(0));
            let target = spec.target_class;
            (DatasetDescriptor::Planted { spec }, Some(target))
        }
    };
    let class_id = a
        .class_id
        .or(default_class)
        .context("--class-id is required for image-folder datasets")?;
    let model = if REGISTRY.contains(&a.model.as_str()) {
        let num_classes = match a.num_classes {
            Some(n) => n,
            None => load_splits(&dataset)?.class_names().len(),
        };
        ModelDescriptor::Registry {
            name: a.model.clone(),
            num_classes,
            seed: a.model_seed,
            input_size: a.input_size,
            class_names: None,
        }
    } else {
        let path = PathBuf::from(&a.model);
        if !path.is_file() {
            bail!("{} is neither a registry model {REGISTRY:?} nor a file", a.model);
        }
        ModelDescriptor::File {
            path,
            decision_layer: a.decision_layer.clone(),
        }
    };
    let mut request = RunRequest::new(model, dataset, class_id);
    request.fit_decision_layer = a.fit_decision_layer;
    request.mistake_split = a.split.clone();
    request.top_k = a.top_k;
    request.core_threshold = a.core_threshold;
    let d = OmegaConfig::default();
    request.omega = OmegaConfig {
        lambda1: a.lambda1.unwrap_or(d.lambda1),
        lambda2: a.lambda2.unwrap_or(d.lambda2),
        max_steps: a.omega_steps.unwrap_or(d.max_steps),
        method: if a.subgradient { OmegaMethod::Subgradient } else { d.method },
        ..d
    };
    Ok(request)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn inspect(wb: &Workbench, a: &InspectArgs, json: bool) -> anyhow::Result<()> {
    let manifest = wb.create_run(&run_request(a)?)?;
    let run_id = manifest.run_id.clone();
    let manifest = wb.execute_run(&run_id)?;
    if json {
        let ranking = match manifest.status {
            RunStatus::Completed => Some(wb.ranking(&run_id)?),
            _ => None,
        };
        return print_json(&serde_json::json!({ "run_id": run_id, "status": manifest.status, "ranking": ranking }));
    }
    println!("run {run_id}: {:?}", manifest.status);
    if manifest.status == RunStatus::Completed {
        let r = wb.ranking(&run_id)?;
        println!(
            "class {} ({}): {} mistakes on {}, flip rate {:.2}",
            r.class_id,
            r.class_name,
            r.n_mistakes,
            r.mistake_split,
            r.report.flip_rate()
        );
        println!("{:>8} {:>10} {:>12}  category", "neuron", "rank rate", "mean omega");
        for n in r.report.ranked_neurons().into_iter().take(10) {
            let mark = if r.core_neurons.contains(&n) { "*" } else { " " };
            println!(
                "{n:>7}{mark} {:>10.3} {:>12.4}  {:?}",
                r.report.rank_rate[n],
                r.report.mean_signed_omega[n],
                r.report.category(n)
            );
        }
        println!("* core neurons at rank rate >= {}", r.core_threshold);
    }
    Ok(())
}

fn visualize(wb: &Workbench, a: &VisualizeArgs, json: bool) -> anyhow::Result<()> {
    let neurons = if a.neurons.is_empty() {
        wb.ranking(&a.run)?.core_neurons
    } else {
        a.neurons.clone()
    };
    let request = VisualizationRequest {
        neurons,
        classes: a.classes.parse::<ClassMode>()?,
        overrides: VisualOverrides {
            steps: a.steps,
            gamma: a.gamma,
            epsilon: a.epsilon,
            learning_rate: a.learning_rate,
            seed: a.seed,
            mask_threshold: None,
            encoder: a.encoder.clone(),
        },
    };
    let out = wb.visualize(&a.run, &request)?;
    let key = out.key.unwrap_or_default();
    let gallery = wb
        .gallery(&a.run)?
        .into_iter()
        .find(|g| g.key == key)
        .context("gallery missing after visualize")?;
    if json {
        return print_json(&gallery);
    }
    println!("gallery {key} in {}", wb.store.run_dir(&a.run).join("gallery").join(&key).display());
    println!(
        "{:>7} {:>14} {:>11} {:>9} {:>10} {:>9}",
        "neuron", "class", "activation", "logit", "alignment", "core rel"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for e in &gallery.entries {
        println!(
            "{:>7} {:>14} {:>11.3} {:>9} {:>10} {:>9}",
            e.neuron_id,
            e.class_name.as_deref().unwrap_or("-"),
            e.activation,
            opt(e.class_logit),
            opt(e.clip_alignment),
            opt(e.core_relevance)
        );
    }
    Ok(())
}

fn edit(wb: &Workbench, a: &EditArgs, json: bool) -> anyhow::Result<()> {
    let mut targets = Vec::new();
    for t in &a.targets {
        targets.extend(parse_targets(t)?);
    }
    let request = EditRequest {
        targets,
        preset: match a.preset {
            PresetArg::Default => EditPreset::Default,
            PresetArg::Planted => EditPreset::Planted,
        },
        method: a.method.map(|m| match m {
            MethodArg::Ratio => EditMethod::Ratio,
            MethodArg::Constraint => EditMethod::Constraint,
        }),
        o: a.o,
        suggest_o: a.suggest_o,
        lambda3: a.lambda3,
        epochs: a.epochs,
        seed: a.seed,
        plan: None,
    };
    let plan = wb.check_edit(&a.run, &request)?;
    let out = wb.edit(&a.run, &plan)?;
    let key = out.key.unwrap_or_default();
    let summary = wb
        .metrics(&a.run)?
        .edits
        .into_iter()
        .find(|e| e.key == key)
        .context("edit missing after edit")?;
    if json {
        return print_json(&summary);
    }
    println!("edit {key}: {:?}, o = {:.4}, lambda3 = {}", plan.method, plan.o, plan.lambda3);
    print!("{}", summary.delta.render_table());
    Ok(())
}

fn evaluate(wb: &Workbench, a: &RunArg, json: bool) -> anyhow::Result<()> {
    let view = wb.metrics(&a.run)?;
    if json {
        return print_json(&view);
    }
    for (split, m) in &view.base {
        print!("{}", m.render_table(&format!("base/{split}")));
    }
    if !view.edits.is_empty() {
        let mut table = DeltaReport::default();
        for e in &view.edits {
            table.extend(e.delta.clone());
        }
        println!();
        print!("{}", table.render_table());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = build_config(&cli)?;
    match &cli.command {
        Command::Serve(_) => {
            let port = config.port;
            let state = AppState::new(Workbench::open(config)?);
            tokio::runtime::Runtime::new()?.block_on(serve(state, port))?;
            Ok(())
        }
        command => {
            let wb = Workbench::open(config)?;
            match command {
                Command::Inspect(a) => inspect(&wb, a, cli.json),
                Command::Visualize(a) => visualize(&wb, a, cli.json),
                Command::Edit(a) => edit(&wb, a, cli.json),
                Command::Evaluate(a) => evaluate(&wb, a, cli.json),
                Command::Serve(_) => unreachable!(),
            }
        }
    }
}
