mod config;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ged_core::checkpoint::load_checkpoint;
use ged_core::codec::AnalyticCodec;
use ged_core::dataset::{generate_synthetic_corpus, load_captions, DatasetManifest, Split, SynthConfig};
use ged_core::denoiser::{build_finetune_mask, Denoiser};
use ged_core::evaluation::{
    evaluate_multi_with, write_results_csv, GroundTruth, MatchConfig, Matcher, ReferenceMatcher,
};
use ged_core::imageio::load_prob;
use ged_core::inference::{prediction_file_name, Predictor};
use ged_core::training::{train_loop, TrainOutputs, Trainer};
use ged_core::{GedError, Granularity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ged", version, about = "Granularity-conditioned latent edge detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-annotator corpus.
    Synth(SynthArgs),
    /// Train the denoiser on a manifest.
    Train(TrainArgs),
    /// Predict edge maps for every image of a manifest.
    Infer(InferArgs),
    /// Score predictions against a manifest's annotations.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Flat JSON config with keys like `training.lr_start`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// JSONL training log (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Square crop size in pixels.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "sweep")]
    g: Option<f64>,
    /// Number of granularities on the uniform grid.
    #[arg(long)]
    sweep: Option<usize>,
    #[arg(long)]
    captions: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kernel {
    Ref,
    Fast,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Skip NMS and thinning.
    #[arg(long)]
    no_nms: bool,
    /// Evaluate the best of an M-granularity sweep.
    #[arg(long, conflicts_with = "g")]
    multi: Option<usize>,
    /// Use the predictions at this granularity.
    #[arg(long)]
    g: Option<f64>,
    #[arg(long, value_enum, default_value_t = Kernel::Ref)]
    kernel: Kernel,
    #[arg(long)]
    max_dist_frac: Option<f64>,
    #[arg(long)]
    thresholds: Option<usize>,
    /// Results CSV (default: `<pred_dir>/eval.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: the message and the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<GedError> for Failure {
    fn from(e: GedError) -> Self {
        let code = match e {
            GedError::NonFiniteLoss { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(f) = configure_workers() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `GED_NUM_WORKERS` caps the worker pool used for data loading and evaluation.
fn configure_workers() -> CmdResult {
    let Ok(raw) = std::env::var("GED_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::input(format!("GED_NUM_WORKERS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::input(e.to_string()))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let config = SynthConfig {
        height: a.height,
        width: a.width,
        split: match a.split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        },
    };
    generate_synthetic_corpus(a.n as usize, a.seed, &a.out, &config)?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

fn read_captions(path: Option<&Path>) -> Result<HashMap<String, String>, Failure> {
    match path {
        Some(p) => Ok(load_captions(p)?),
        None => Ok(HashMap::new()),
    }
}

fn effective_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let base = match &a.config {
        Some(p) => RunConfig::from_file(p).map_err(Failure::input)?,
        None => RunConfig::default(),
    };
    let mut flags = Map::new();
    if let Some(steps) = a.steps {
        flags.insert("training.total_steps".into(), Value::from(steps));
    }
    if let Some(crop) = a.crop {
        flags.insert("dataset.crop_size".into(), Value::from(vec![crop, crop]));
    }
    if let Some(seed) = a.seed {
        flags.insert("training.seed".into(), Value::from(seed));
        flags.insert("denoiser.init_seed".into(), Value::from(seed));
    }
    if let Some(every) = a.checkpoint_every {
        flags.insert("training.checkpoint_every".into(), Value::from(every));
    }
    base.merged(&flags).map_err(Failure::input)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let config = effective_config(&a)?;
    println!("effective config: {}", serde_json::to_string(&config.to_flat()).expect("json"));
    config.training.optim.validate()?;
    config.denoiser.validate()?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let captions = read_captions(a.captions.as_deref())?;
    if a.dry_run {
        return Ok(());
    }
    let data = manifest.load_all()?;

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let config_path = a.out.with_extension("config.json");
    if let Some(dir) = config_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(e.to_string()))?;
    }
    std::fs::write(&config_path, config.to_json() + "\n").map_err(|e| Failure::input(e.to_string()))?;

    let mask = build_finetune_mask(&config.denoiser, config.training.finetune);
    let model = Denoiser::with_mask(config.denoiser.clone(), mask, DType::F32, &Device::Cpu)?;
    let bounds = manifest.bounds();
    let mut trainer = Trainer::new(model, AnalyticCodec::new(), config.training.optim.clone(), Some(bounds))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let outputs = TrainOutputs {
        log: Some(log_path.clone()),
        checkpoint: Some(a.out.clone()),
    };
    let total = config.training.optim.total_steps;
    train_loop(&mut trainer, &data, &captions, &config.loop_config(), &outputs, &mut rng, |r| {
        if r.step % 50 == 0 || r.step + 1 == total {
            log::info!("step {} lr {:.3e} total {:.5}", r.step, r.lr, r.total);
        }
    })?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    if a.g.is_none() && a.sweep.is_none() {
        return Err(Failure::input("pass either --g or --sweep"));
    }
    let g = a.g.map(Granularity::new).transpose()?;
    let (model, codec, _) = load_checkpoint(&a.checkpoint, DType::F32, &Device::Cpu)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let captions = read_captions(a.captions.as_deref())?;
    let predictor = Predictor::new(model, codec);
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::input(e.to_string()))?;

    let mut written = 0;
    for entry in &manifest.entries {
        let image = ged_core::imageio::load_rgb(&manifest.resolve(&entry.image))?;
        let caption = captions.get(&entry.id).map(String::as_str).unwrap_or("");
        let preds = match (g, a.sweep) {
            (Some(g), _) => vec![predictor.predict(&image, &entry.id, g, caption)?],
            (None, Some(m)) => predictor.sweep(&image, &entry.id, m, caption)?,
            (None, None) => unreachable!(),
        };
        for p in preds {
            p.save(&a.out)?;
            written += 1;
        }
    }
    println!("wrote {written} predictions to {}", a.out.display());
    Ok(())
}

/// The optional accelerated matcher; not part of this build.
fn fast_matcher() -> Option<Box<dyn Matcher>> {
    None
}

/// Finds `<id>_<tag>.png` files for every manifest entry.
fn collect_predictions(
    dir: &Path,
    manifest: &DatasetManifest,
    tags: Option<&[Granularity]>,
) -> Result<BTreeMap<String, Vec<ndarray::Array2<f32>>>, Failure> {
    let mut sets = BTreeMap::new();
    let mut missing = Vec::new();
    for entry in &manifest.entries {
        let paths: Vec<PathBuf> = match tags {
            Some(tags) => tags.iter().map(|&g| dir.join(prediction_file_name(&entry.id, g))).collect(),
            None => {
                let prefix = format!("{}_g", entry.id);
                let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?
                    .filter_map(|d| d.ok().map(|d| d.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".png"))
                    })
                    .collect();
                found.sort();
                if found.len() > 1 {
                    return Err(Failure::input(format!(
                        "{}: {} candidate predictions; choose one with --g or use --multi",
                        entry.id,
                        found.len()
                    )));
                }
                found
            }
        };
        if paths.is_empty() || paths.iter().any(|p| !p.exists()) {
            missing.push(entry.id.clone());
            continue;
        }
        let maps = paths.iter().map(|p| load_prob(p)).collect::<ged_core::Result<Vec<_>>>()?;
        sets.insert(entry.id.clone(), maps);
    }
    if !missing.is_empty() {
        return Err(Failure::input(format!("missing predictions for: {}", missing.join(", "))));
    }
    Ok(sets)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let fast;
    let matcher: &dyn Matcher = match a.kernel {
        Kernel::Ref => &ReferenceMatcher,
        Kernel::Fast => {
            fast = fast_matcher().ok_or_else(|| {
                Failure::input("the fast matching kernel is not available in this build; use --kernel ref")
            })?;
            fast.as_ref()
        }
    };
    let mut cfg = MatchConfig {
        apply_nms: !a.no_nms,
        ..MatchConfig::default()
    };
    if let Some(f) = a.max_dist_frac {
        cfg.max_dist_frac = f;
    }
    if let Some(n) = a.thresholds {
        cfg.n_thresholds = n;
    }
    cfg.validate()?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let tags = match (a.multi, a.g) {
        (Some(m), _) => Some(Granularity::grid(m)?),
        (None, Some(g)) => Some(vec![Granularity::new(g)?]),
        (None, None) => None,
    };
    let sets = collect_predictions(&a.pred_dir, &manifest, tags.as_deref())?;
    let gts = manifest
        .entries
        .iter()
        .map(|e| {
            let maps = e
                .annotations
                .iter()
                .map(|p| ged_core::imageio::load_edge_map(&manifest.resolve(p)))
                .collect::<ged_core::Result<Vec<_>>>()?;
            Ok(GroundTruth { id: e.id.clone(), maps })
        })
        .collect::<ged_core::Result<Vec<_>>>()?;

    let result = evaluate_multi_with(matcher, &sets, &gts, &cfg)?;
    let out = a.out.unwrap_or_else(|| a.pred_dir.join("eval.csv"));
    let m = sets.values().next().map_or(0, Vec::len);
    write_results_csv(&out, &result, &cfg, m)?;
    println!(
        "ODS {:.4} OIS {:.4} AP {:.4} ({} images, {} granularit{}, kernel {})",
        result.ods,
        result.ois,
        result.ap,
        gts.len(),
        m,
        if m == 1 { "y" } else { "ies" },
        matcher.name()
    );
    println!("{}", out.display());
    Ok(())
}
