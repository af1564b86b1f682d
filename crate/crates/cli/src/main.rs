//! Command-line surface for the competency-estimation pipeline.
//!
//! `competency run --config run.toml` executes everything end to end;
//! the other subcommands run individual stages against artifacts from
//! earlier ones. Exit code is nonzero on failure with the failing stage
//! named on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use competency_core::bundle;
use competency_core::config::RunConfig;
use competency_core::dataset::{
    load_dataset, load_image_png, load_map_png16, save_dataset, save_map_png16, tensor_to_rgb8,
    write_atomic,
};
use competency_core::error::Error as CoreError;
use competency_core::evaluation::{compute_map, MethodDescriptor};
use competency_core::heatmap::{false_color_segments, render_heatmap, sidecar_text};
use competency_core::inpainter::train_inpainter;
use competency_core::perception::{
    stratified_holdout, train_classifier, LabeledDataset, Split,
};
use competency_core::pipeline::{prepare_data, run_pipeline};
use competency_core::regional::{DependencyMap, MethodKind};
use competency_core::segmentation::felzenszwalb_segment;
use competency_core::Scalar;

#[derive(Parser)]
#[command(
    name = "competency",
    version,
    about = "Train an image classifier, fit its competency score, and explain low competency by region"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the configured thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset under <out>/dataset.
    GenerateData,
    /// Train the perception classifier and write models/classifier.cmpb.
    TrainClassifier {
        /// Dataset directory (defaults to <out>/dataset or the configured path).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit the competency estimator on a trained classifier.
    FitCompetency {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Classifier bundle (defaults to <out>/models/classifier.cmpb).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the inpainting decoder against a trained classifier.
    TrainInpainter {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write false-color segmentations of a dataset split.
    Segment {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to segment: train, calibration, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Maximum number of images (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Compute dependency maps for one method over a dataset split.
    Map {
        /// cropping | masking | perturbation | gradients | reconstruction | combined
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        inpainter: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Score every configured method against the test split's masks.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        inpainter: Option<PathBuf>,
    },
    /// Blend a dependency-map PNG over its source image.
    Render {
        /// Source image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// 16-bit map PNG produced by `map` or `run`.
        #[arg(long)]
        map: PathBuf,
        /// Output path (defaults to <out>/render.png).
        #[arg(long)]
        out_file: Option<PathBuf>,
        /// Blend factor; defaults to the configured render_alpha.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full pipeline: data, training, maps, evaluation, artifacts.
    Run,
    /// Timing table: mean per-image wall time of each configured method.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        inpainter: Option<PathBuf>,
        /// Number of test images to time.
        #[arg(long, default_value_t = 10)]
        images: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.run.out = out.clone();
    }
    if let Some(threads) = cli.threads {
        config.run.threads = threads;
    }
    config.validate()?;
    Ok(config)
}

/// Resolve the dataset directory for stage-wise commands.
fn resolve_data(config: &RunConfig, flag: &Option<PathBuf>) -> Result<LabeledDataset<Scalar>> {
    if let Some(dir) = flag {
        return Ok(load_dataset(dir)?);
    }
    if let Some(dir) = &config.dataset.path {
        return Ok(load_dataset(dir)?);
    }
    let generated = config.run.out.join("dataset");
    if generated.join("manifest.txt").is_file() {
        return Ok(load_dataset(&generated)?);
    }
    bail!(
        "no dataset: pass --data, set dataset.path, or run `competency generate-data` first"
    );
}

fn model_path(config: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| config.run.out.join("models/classifier.cmpb"))
}

fn load_model(config: &RunConfig, flag: &Option<PathBuf>) -> Result<Arc<competency_core::perception::PerceptionModel<Scalar>>> {
    let path = model_path(config, flag);
    let (model, _) = bundle::load_classifier(&path)
        .with_context(|| format!("loading classifier {}", path.display()))?;
    Ok(Arc::new(model))
}

fn load_estimator(
    config: &RunConfig,
    model: Arc<competency_core::perception::PerceptionModel<Scalar>>,
    flag: &Option<PathBuf>,
) -> Result<competency_core::competency::CompetencyEstimator<Scalar>> {
    let path = flag
        .clone()
        .unwrap_or_else(|| config.run.out.join("models/estimator.cmpb"));
    let (est, _) = bundle::load_estimator(&path, model)
        .with_context(|| format!("loading estimator {}", path.display()))?;
    Ok(est)
}

fn load_decoder(
    config: &RunConfig,
    flag: &Option<PathBuf>,
) -> Result<Option<competency_core::inpainter::InpainterDecoder<Scalar>>> {
    let path = flag
        .clone()
        .unwrap_or_else(|| config.run.out.join("models/inpainter.cmpb"));
    if !path.is_file() {
        return Ok(None);
    }
    let (decoder, _) = bundle::load_decoder(&path)
        .with_context(|| format!("loading inpainter {}", path.display()))?;
    Ok(Some(decoder))
}

fn split_of(name: &str) -> Result<Split> {
    Split::from_tag(name).with_context(|| format!("unknown split '{name}'"))
}

/// Build the descriptor for a stage-wise `map`/`bench` invocation. Fill
/// methods use the first configured candidate; `evaluate` and `run` select
/// the best candidate on the calibration split instead.
fn descriptor_for(
    config: &RunConfig,
    kind: MethodKind,
    image_size: usize,
) -> Result<MethodDescriptor> {
    Ok(match kind {
        MethodKind::Cropping => {
            let (gh, gw) = config.methods.cropping.grid;
            let cell = (image_size.div_ceil(gh) + image_size.div_ceil(gw)) as f64 / 2.0;
            MethodDescriptor::Cropping {
                grid_h: gh,
                grid_w: gw,
                margin: (config.methods.cropping.margin_fraction * cell).round() as usize,
            }
        }
        MethodKind::Masking => MethodDescriptor::Masking {
            fill: config.methods.masking.strategies(config.run.seed)?[0],
        },
        MethodKind::Perturbation => MethodDescriptor::Perturbation {
            fill: config.methods.perturbation.strategies(config.run.seed)?[0],
        },
        MethodKind::Gradients => MethodDescriptor::Gradients,
        MethodKind::Reconstruction => MethodDescriptor::Reconstruction,
        MethodKind::Combined => MethodDescriptor::Combined,
    })
}

fn cmd_generate_data(config: &RunConfig) -> Result<()> {
    if config.dataset.source != "synthetic" {
        bail!("generate-data requires dataset.source = \"synthetic\"");
    }
    let data = prepare_data(config)?;
    let dir = config.run.out.join("dataset");
    save_dataset(&data, &dir)?;
    println!(
        "wrote {} images ({} train / {} calibration / {} test) to {}",
        data.images.len(),
        data.indices_of(Split::Train).len(),
        data.indices_of(Split::Calibration).len(),
        data.indices_of(Split::Test).len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train_classifier(config: &RunConfig, data_flag: &Option<PathBuf>) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let trained = train_classifier(&data, &config.classifier, config.run.seed)?;
    let dir = config.run.out.join("models");
    std::fs::create_dir_all(&dir)?;
    let meta = vec![
        ("seed".to_string(), config.run.seed.to_string()),
        ("train_accuracy".to_string(), format!("{:.6}", trained.train_accuracy)),
        ("holdout_accuracy".to_string(), format!("{:.6}", trained.holdout_accuracy)),
    ];
    bundle::save_classifier(&trained.model, &meta, &dir.join("classifier.cmpb"))?;
    println!(
        "classifier trained: accuracy train {:.3} holdout {:.3} -> {}",
        trained.train_accuracy,
        trained.holdout_accuracy,
        dir.join("classifier.cmpb").display()
    );
    Ok(())
}

fn cmd_fit_competency(
    config: &RunConfig,
    data_flag: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let model = load_model(config, model_flag)?;
    let (train_idx, holdout_idx) =
        stratified_holdout(&data, config.classifier.holdout_fraction, config.run.seed);
    let fit = competency_core::competency::fit_estimator(
        model,
        &data,
        &train_idx,
        &holdout_idx,
        &config.competency,
        config.run.seed,
    )?;
    let dir = config.run.out.join("models");
    std::fs::create_dir_all(&dir)?;
    let meta = vec![("seed".to_string(), config.run.seed.to_string())];
    bundle::save_estimator(&fit.estimator, &meta, &dir.join("estimator.cmpb"))?;
    println!(
        "estimator fitted (transfer {} iters, distance head {} iters) -> {}",
        fit.transfer_objective_trace.len(),
        fit.ood_objective_trace.len(),
        dir.join("estimator.cmpb").display()
    );
    Ok(())
}

fn cmd_train_inpainter(
    config: &RunConfig,
    data_flag: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let model = load_model(config, model_flag)?;
    let (decoder, trace) = train_inpainter(
        &model,
        &data,
        &config.segmentation,
        &config.inpainter,
        config.run.seed,
    )?;
    let dir = config.run.out.join("models");
    std::fs::create_dir_all(&dir)?;
    let meta = vec![("seed".to_string(), config.run.seed.to_string())];
    bundle::save_decoder(&decoder, &meta, &dir.join("inpainter.cmpb"))?;
    println!(
        "inpainter trained: loss {:.5} -> {:.5} over {} epochs -> {}",
        trace.first().unwrap_or(&f64::NAN),
        trace.last().unwrap_or(&f64::NAN),
        trace.len(),
        dir.join("inpainter.cmpb").display()
    );
    Ok(())
}

fn cmd_segment(
    config: &RunConfig,
    data_flag: &Option<PathBuf>,
    split: &str,
    limit: usize,
) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let split = split_of(split)?;
    let dir = config.run.out.join("segments");
    std::fs::create_dir_all(&dir)?;
    let mut indices = data.indices_of(split);
    if limit > 0 {
        indices.truncate(limit);
    }
    for &i in &indices {
        let segmap = felzenszwalb_segment(&data.images[i], &config.segmentation)?;
        let img = false_color_segments(&segmap);
        tensor_to_rgb8(&img)?.save(dir.join(format!("img_{i:05}.png")))?;
    }
    println!("wrote {} segmentations to {}", indices.len(), dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_map(
    config: &RunConfig,
    method: &str,
    data_flag: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
    estimator_flag: &Option<PathBuf>,
    inpainter_flag: &Option<PathBuf>,
    split: &str,
    limit: usize,
) -> Result<()> {
    let kind = MethodKind::parse(method).with_context(|| format!("unknown method '{method}'"))?;
    let data = resolve_data(config, data_flag)?;
    let model = load_model(config, model_flag)?;
    let est = load_estimator(config, model.clone(), estimator_flag)?;
    let decoder = load_decoder(config, inpainter_flag)?;
    let desc = descriptor_for(config, kind, data.image_shape()[1])?;
    let split = split_of(split)?;
    let mut indices = data.indices_of(split);
    if limit > 0 {
        indices.truncate(limit);
    }
    let dir = config.run.out.join("maps").join(kind.name());
    std::fs::create_dir_all(&dir)?;
    for &i in &indices {
        let segmap = felzenszwalb_segment(&data.images[i], &config.segmentation)?;
        let map = compute_map(&desc, &est, decoder.as_ref(), &data.images[i], &segmap)?;
        save_map_png16(
            &map.normalized,
            map.height,
            map.width,
            &dir.join(format!("img_{i:05}.png")),
        )?;
        write_atomic(
            &dir.join(format!("img_{i:05}.txt")),
            sidecar_text(&map, "").as_bytes(),
        )?;
    }
    println!("wrote {} {} maps to {}", indices.len(), kind.name(), dir.display());
    Ok(())
}

fn cmd_evaluate(
    config: &RunConfig,
    data_flag: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
    estimator_flag: &Option<PathBuf>,
    inpainter_flag: &Option<PathBuf>,
) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let model = load_model(config, model_flag)?;
    let estimator = load_estimator(config, model.clone(), estimator_flag)?;
    let decoder = load_decoder(config, inpainter_flag)?;
    let artifacts = competency_core::pipeline::Artifacts {
        model,
        estimator,
        decoder,
        train_accuracy: f64::NAN,
        holdout_accuracy: f64::NAN,
        inpainter_loss_trace: Vec::new(),
    };
    let runs = competency_core::pipeline::plan_and_evaluate(config, &data, &artifacts)?;
    let report = competency_core::evaluation::MetricsReport {
        rows: runs.iter().map(|r| r.row.clone()).collect(),
    };
    std::fs::create_dir_all(&config.run.out)?;
    write_atomic(&config.run.out.join("report.txt"), report.text_table().as_bytes())?;
    write_atomic(&config.run.out.join("report.csv"), report.csv().as_bytes())?;
    print!("{}", report.text_table());
    Ok(())
}

fn cmd_render(
    config: &RunConfig,
    image: &Path,
    map_path: &Path,
    out_file: &Option<PathBuf>,
    alpha: Option<f64>,
) -> Result<()> {
    let tensor = load_image_png::<Scalar>(image)
        .with_context(|| format!("opening {}", image.display()))?;
    let (normalized, h, w) = load_map_png16(map_path)?;
    let map = DependencyMap {
        method: MethodKind::Gradients,
        height: h,
        width: w,
        raw: normalized.clone(),
        normalized,
        wall_time: 0.0,
        evals: 0,
        segmap: None,
    };
    let alpha = alpha.unwrap_or(config.run.render_alpha);
    let rendered = render_heatmap(&tensor, &map, alpha)?;
    let out_path = out_file
        .clone()
        .unwrap_or_else(|| config.run.out.join("render.png"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    tensor_to_rgb8(&rendered)?.save(&out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_run(config: &RunConfig) -> Result<()> {
    let outputs = run_pipeline(config)?;
    print!("{}", outputs.report.text_table());
    if let Some(dir) = outputs.out_dir {
        println!("artifacts under {}", dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: &RunConfig,
    data_flag: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
    estimator_flag: &Option<PathBuf>,
    inpainter_flag: &Option<PathBuf>,
    images: usize,
) -> Result<()> {
    let data = resolve_data(config, data_flag)?;
    let model = load_model(config, model_flag)?;
    let est = load_estimator(config, model.clone(), estimator_flag)?;
    let decoder = load_decoder(config, inpainter_flag)?;
    let mut indices = data.indices_of(Split::Test);
    if indices.is_empty() {
        indices = (0..data.images.len()).collect();
    }
    indices.truncate(images.max(1));

    println!("{:<16} {:>14} {:>12}", "Method", "Mean time (s)", "Evals/img");
    println!("{}", "-".repeat(44));
    for name in &config.methods.list {
        let kind = MethodKind::parse(name).with_context(|| format!("unknown method '{name}'"))?;
        if matches!(kind, MethodKind::Reconstruction | MethodKind::Combined)
            && decoder.is_none()
        {
            println!("{:<16} {:>14} {:>12}", kind.name(), "(no decoder)", "-");
            continue;
        }
        let desc = descriptor_for(config, kind, data.image_shape()[1])?;
        let mut total = 0.0;
        let mut evals = 0usize;
        let start = Instant::now();
        for &i in &indices {
            let segmap = felzenszwalb_segment(&data.images[i], &config.segmentation)?;
            let map = compute_map(&desc, &est, decoder.as_ref(), &data.images[i], &segmap)?;
            total += map.wall_time;
            evals += map.evals;
        }
        let _ = start;
        println!(
            "{:<16} {:>14.4} {:>12.1}",
            kind.name(),
            total / indices.len() as f64,
            evals as f64 / indices.len() as f64
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error (config): {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let result = match &cli.command {
        Command::GenerateData => cmd_generate_data(&config),
        Command::TrainClassifier { data } => cmd_train_classifier(&config, data),
        Command::FitCompetency { data, model } => cmd_fit_competency(&config, data, model),
        Command::TrainInpainter { data, model } => cmd_train_inpainter(&config, data, model),
        Command::Segment { data, split, limit } => cmd_segment(&config, data, split, *limit),
        Command::Map {
            method,
            data,
            model,
            estimator,
            inpainter,
            split,
            limit,
        } => cmd_map(
            &config, method, data, model, estimator, inpainter, split, *limit,
        ),
        Command::Evaluate {
            data,
            model,
            estimator,
            inpainter,
        } => cmd_evaluate(&config, data, model, estimator, inpainter),
        Command::Render {
            image,
            map,
            out_file,
            alpha,
        } => cmd_render(&config, image, map, out_file, *alpha),
        Command::Run => cmd_run(&config),
        Command::Bench {
            data,
            model,
            estimator,
            inpainter,
            images,
        } => cmd_bench(&config, data, model, estimator, inpainter, *images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Surface the pipeline stage when one is attached.
            if let Some(CoreError::Stage { stage, .. }) = e.downcast_ref::<CoreError>() {
                eprintln!("error (stage {stage}): {e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
