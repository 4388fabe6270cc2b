//! Command line verbs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use base64::Engine;
use bridgelab::data::{generate_dataset, DatasetSpec};
use bridgelab::metrics::CoutConfig;
use bridgelab::models::{load_models, save_classifier_bundle, save_score_bundle};
use bridgelab::numerics::io::{load_tensor, Dtype, TensorPayload};
use bridgelab::pipeline::{
    eval_dirs, execute, explain_batch, BatchSpec, ConfigOverrides, DatasetRef, EvalSpec,
    ExplainRequest, ImageInput, MaskInput, RegionSource, RunStore, TargetClass, TrainRecipe,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::service::{router, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "bridgelab",
    version,
    about = "Region-constrained counterfactual explanations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to a directory.
    GenData(GenDataArgs),
    /// Train the classifier and write its bundle to `<models>/classifier`.
    TrainClassifier(TrainArgs),
    /// Train the score network and write its bundle to `<models>/score`.
    TrainScore(TrainArgs),
    /// Run one explanation and print the stored run as JSON.
    Explain(ExplainArgs),
    /// Explain every correctly classified image of a class.
    ExplainBatch(BatchArgs),
    /// Aggregate metrics over factual and counterfactual directories.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "striped-blob,plain-blob")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 400)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model directory.
    #[arg(long, env = "BRIDGELAB_MODEL_DIR")]
    pub models: PathBuf,
    /// JSON training recipe; defaults are used for missing fields.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegionKind {
    Manual,
    Automated,
    ExactObject,
    Freeform,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, env = "BRIDGELAB_MODEL_DIR")]
    pub models: PathBuf,
    #[arg(long, env = "BRIDGELAB_RUN_DIR")]
    pub run_dir: PathBuf,
    /// Full request as JSON; other request flags are ignored when given.
    #[arg(long)]
    pub request: Option<PathBuf>,
    /// Image tensor file.
    #[arg(long, conflicts_with = "class")]
    pub image: Option<PathBuf>,
    /// Dataset reference class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value = "automated")]
    pub region: RegionKind,
    /// PNG mask for the manual region.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub lo: f64,
    #[arg(long, default_value_t = 0.2)]
    pub hi: f64,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Target class name or index.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_project: bool,
    /// Write the run JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[arg(long, env = "BRIDGELAB_MODEL_DIR")]
    pub models: PathBuf,
    #[arg(long, env = "BRIDGELAB_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON batch spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "BRIDGELAB_MODEL_DIR")]
    pub models: PathBuf,
    #[arg(long)]
    pub factual: PathBuf,
    #[arg(long)]
    pub counterfactual: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub cout_steps: usize,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "BRIDGELAB_MODEL_DIR")]
    pub models: Option<PathBuf>,
    #[arg(long, env = "BRIDGELAB_RUN_DIR", default_value = "runs")]
    pub run_dir: PathBuf,
    #[arg(long, env = "BRIDGELAB_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn recipe(args: &TrainArgs) -> Result<TrainRecipe> {
    Ok(match &args.recipe {
        Some(p) => read_json(p)?,
        None => TrainRecipe::default(),
    })
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let classes: Vec<&str> = args.classes.iter().map(String::as_str).collect();
    let data = generate_dataset(&DatasetSpec::new(&classes, args.per_class, args.seed))?;
    data.save(&args.out)?;
    println!(
        "{}",
        serde_json::json!({ "samples": data.len(), "fingerprint": data.fingerprint() })
    );
    Ok(())
}

fn train_classifier_cmd(args: TrainArgs) -> Result<()> {
    let mut recipe = recipe(&args)?;
    if let Some(steps) = args.steps {
        recipe.classifier.steps = steps;
    }
    let (clf, manifest, accuracy) = recipe.train_classifier()?;
    save_classifier_bundle(&args.models.join("classifier"), &clf, &manifest)?;
    println!(
        "{}",
        serde_json::json!({ "held_out_accuracy": accuracy, "fingerprint": manifest.fingerprint })
    );
    Ok(())
}

fn train_score_cmd(args: TrainArgs) -> Result<()> {
    let mut recipe = recipe(&args)?;
    if let Some(steps) = args.steps {
        recipe.score.train.steps = steps;
    }
    let (net, manifest, (before, after)) = recipe.train_score()?;
    save_score_bundle(&args.models.join("score"), &net, &manifest)?;
    println!(
        "{}",
        serde_json::json!({
            "held_out_loss_initial": before,
            "held_out_loss_final": after,
            "fingerprint": manifest.fingerprint,
        })
    );
    Ok(())
}

/// Builds the request described by the explain flags.
pub fn request_from_args(args: &ExplainArgs) -> Result<ExplainRequest> {
    if let Some(p) = &args.request {
        return read_json(p);
    }
    let image = match (&args.image, &args.class) {
        (Some(path), _) => {
            ImageInput::Tensor(TensorPayload::encode(&load_tensor(path)?, Dtype::F64))
        }
        (None, Some(class)) => ImageInput::Reference(DatasetRef {
            class: class.clone(),
            index: args.index,
            seed: args.data_seed,
        }),
        (None, None) => bail!("give --image, --class or --request"),
    };
    let region = match args.region {
        RegionKind::Manual => {
            let path = args.mask.as_ref().context("--region manual needs --mask")?;
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            RegionSource::Manual {
                mask: MaskInput::Png(base64::engine::general_purpose::STANDARD.encode(bytes)),
            }
        }
        RegionKind::Automated => RegionSource::Automated {
            a: args.a,
            c: args.c,
            method: args.method.clone(),
        },
        RegionKind::ExactObject => RegionSource::ExactObject,
        RegionKind::Freeform => RegionSource::Freeform {
            lo: args.lo,
            hi: args.hi,
            seed: args.mask_seed,
        },
    };
    let target = args.target.as_deref().context("--target is required")?;
    let target = match target.parse::<usize>() {
        Ok(i) => TargetClass::Index(i),
        Err(_) => TargetClass::Name(target.to_string()),
    };
    Ok(ExplainRequest {
        image,
        region,
        target,
        preset: args.preset.clone(),
        config: ConfigOverrides {
            s: args.s,
            tau: args.tau,
            steps: args.steps,
            seed: args.seed,
            project_region: args.no_project.then_some(false),
            ..ConfigOverrides::default()
        },
    })
}

fn explain_cmd(args: ExplainArgs) -> Result<()> {
    let request = request_from_args(&args)?;
    let models = load_models(&args.models)?;
    let store = RunStore::new(&args.run_dir)?;
    let run = execute(&models, &request)?;
    store.save(&run)?;
    write_output(args.out.as_deref(), &store.run_bytes(&run.id)?)
}

fn batch_cmd(args: BatchArgs) -> Result<()> {
    let mut spec: BatchSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => BatchSpec::default(),
    };
    if let Some(v) = &args.preset {
        spec.preset = v.clone();
    }
    if let Some(v) = &args.source {
        spec.source = v.clone();
    }
    if let Some(v) = &args.target {
        spec.target = v.clone();
    }
    if args.limit.is_some() {
        spec.limit = args.limit;
    }
    if let Some(v) = args.repeats {
        spec.repeats = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.per_class {
        spec.dataset.per_class = v;
    }
    if let Some(v) = args.data_seed {
        spec.dataset.seed = v;
    }
    let models = load_models(&args.models)?;
    let store = args.run_dir.as_ref().map(RunStore::new).transpose()?;
    let summary = explain_batch(&models, &spec, store.as_ref(), &args.out)?;
    let flipped = summary.runs.iter().filter(|r| r.flipped).count();
    println!(
        "{}",
        serde_json::json!({
            "candidates": summary.candidates,
            "selected": summary.selected,
            "runs": summary.runs.len(),
            "flipped": flipped,
            "out": args.out,
        })
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let models = load_models(&args.models)?;
    let spec = EvalSpec {
        factual_dir: args.factual,
        counterfactual_dir: args.counterfactual,
        target: args.target,
        source: args.source,
        cout: CoutConfig {
            steps: args.cout_steps,
            ..CoutConfig::default()
        },
        folds: args.folds,
        fold_seed: None,
    };
    let report = eval_dirs(&models, &spec)?;
    write_output(args.out.as_deref(), &serde_json::to_vec_pretty(&report)?)
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let models = match &args.models {
        Some(dir) => match load_models(dir) {
            Ok(m) => Some(Arc::new(m)),
            Err(e) => {
                log::warn!("serving without models: {e}");
                None
            }
        },
        None => None,
    };
    let state = AppState {
        models,
        store: RunStore::new(&args.run_dir)?,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainScore(a) => train_score_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::ExplainBatch(a) => batch_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
