//! End-to-end pipeline: data, training, fitting, method evaluation, and
//! artifact persistence.
//!
//! Every stage is deterministic given the run seed; failures surface with
//! the stage name attached. Calibration-split map computation may fan out
//! over a thread pool; the timed test-split calls are always serialized.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bundle;
use crate::competency::{fit_estimator, CompetencyEstimator};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, save_map_png16, write_atomic};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, binarize_map, compute_map, confusion, select_threshold, MethodDescriptor,
    MetricsReport, MetricsRow,
};
use crate::heatmap::sidecar_text;
use crate::inpainter::{train_inpainter, InpainterDecoder};
use crate::perception::{train_classifier, LabeledDataset, PerceptionModel, Split};
use crate::regional::{DependencyMap, FillKind, FillStrategy, MethodKind};
use crate::segmentation::{felzenszwalb_segment, SegmentMap};
use crate::synthetic::generate_synthetic;
use crate::Scalar;

/// Everything trained by the fitting stages.
pub struct Artifacts {
    pub model: Arc<PerceptionModel<Scalar>>,
    pub estimator: CompetencyEstimator<Scalar>,
    pub decoder: Option<InpainterDecoder<Scalar>>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub inpainter_loss_trace: Vec<f64>,
}

/// One evaluated method: its report row plus the per-test-image maps.
pub struct MethodRun {
    pub descriptor: MethodDescriptor,
    pub row: MetricsRow,
    pub chosen_fill: Option<FillKind>,
    pub test_maps: Vec<DependencyMap>,
}

pub struct PipelineOutputs {
    pub report: MetricsReport,
    pub runs: Vec<MethodRun>,
    pub out_dir: Option<PathBuf>,
}

/// Load the dataset named by the config, or generate the synthetic one.
pub fn prepare_data(config: &RunConfig) -> Result<LabeledDataset<Scalar>> {
    match config.dataset.source.as_str() {
        "synthetic" => generate_synthetic(&config.dataset.synthetic.to_spec(config.run.seed)),
        "disk" => load_dataset(config.dataset.path.as_ref().expect("validated")),
        other => Err(Error::Config(format!("unknown dataset source '{other}'"))),
    }
}

/// Train the classifier and fit the competency estimator; train the
/// inpainter only when a configured method needs it.
pub fn fit_artifacts(config: &RunConfig, data: &LabeledDataset<Scalar>) -> Result<Artifacts> {
    let seed = config.run.seed;
    let trained = train_classifier(data, &config.classifier, seed)
        .map_err(|e| e.in_stage("train-classifier"))?;
    let model = Arc::new(trained.model);

    let est_fit = fit_estimator(
        model.clone(),
        data,
        &trained.train_indices,
        &trained.holdout_indices,
        &config.competency,
        seed,
    )
    .map_err(|e| e.in_stage("fit-competency"))?;

    let needs_decoder = config
        .methods
        .list
        .iter()
        .any(|m| m == "reconstruction" || m == "combined");
    let (decoder, loss_trace) = if needs_decoder {
        let (d, trace) =
            train_inpainter(&model, data, &config.segmentation, &config.inpainter, seed)
                .map_err(|e| e.in_stage("train-inpainter"))?;
        (Some(d), trace)
    } else {
        (None, Vec::new())
    };

    Ok(Artifacts {
        model,
        estimator: est_fit.estimator,
        decoder,
        train_accuracy: trained.train_accuracy,
        holdout_accuracy: trained.holdout_accuracy,
        inpainter_loss_trace: loss_trace,
    })
}

/// Precomputed segmentations for a list of image indices.
fn segment_images(
    data: &LabeledDataset<Scalar>,
    indices: &[usize],
    config: &RunConfig,
) -> Result<Vec<SegmentMap>> {
    indices
        .par_iter()
        .map(|&i| felzenszwalb_segment(&data.images[i], &config.segmentation))
        .collect()
}

fn cal_truths(data: &LabeledDataset<Scalar>, cal_idx: &[usize]) -> Result<Vec<Vec<bool>>> {
    cal_idx
        .iter()
        .map(|&i| {
            data.masks[i].clone().ok_or_else(|| {
                Error::invalid(format!("calibration image {i} has no ground-truth mask"))
            })
        })
        .collect()
}

/// Compute one method's maps for the given images (parallel, untimed use).
fn maps_for(
    desc: &MethodDescriptor,
    artifacts: &Artifacts,
    data: &LabeledDataset<Scalar>,
    indices: &[usize],
    segmaps: &[SegmentMap],
) -> Result<Vec<DependencyMap>> {
    indices
        .par_iter()
        .zip(segmaps.par_iter())
        .map(|(&i, segmap)| {
            compute_map(
                desc,
                &artifacts.estimator,
                artifacts.decoder.as_ref(),
                &data.images[i],
                segmap,
            )
        })
        .collect()
}

/// Resolve the method list into concrete descriptors, selecting the best
/// fill strategy per fill-based method on the calibration split.
/// Returns descriptors, selected thresholds, and chosen fills.
pub fn plan_and_evaluate(
    config: &RunConfig,
    data: &LabeledDataset<Scalar>,
    artifacts: &Artifacts,
) -> Result<Vec<MethodRun>> {
    let cal_idx = data.indices_of(Split::Calibration);
    let test_idx = data.indices_of(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    for &i in &test_idx {
        if data.masks[i].is_none() {
            return Err(Error::invalid(format!("test image {i} has no mask")));
        }
    }
    if cal_idx.is_empty() {
        return Err(Error::invalid("calibration split is empty"));
    }
    let truths = cal_truths(data, &cal_idx)?;
    let cal_segmaps = segment_images(data, &cal_idx, config)?;
    let test_segmaps = segment_images(data, &test_idx, config)?;

    let image_size = data.image_shape()[1];
    let mut runs = Vec::new();
    for name in &config.methods.list {
        let kind = MethodKind::parse(name)
            .ok_or_else(|| Error::Config(format!("unknown method '{name}'")))?;

        // Resolve the descriptor; fill-based methods pick the candidate
        // with the best calibration overall accuracy.
        let (desc, chosen_fill, mut threshold) = match kind {
            MethodKind::Cropping => {
                let (gh, gw) = config.methods.cropping.grid;
                let cell = (image_size.div_ceil(gh) + image_size.div_ceil(gw)) as f64 / 2.0;
                let margin = (config.methods.cropping.margin_fraction * cell).round() as usize;
                (
                    MethodDescriptor::Cropping {
                        grid_h: gh,
                        grid_w: gw,
                        margin,
                    },
                    None,
                    None,
                )
            }
            MethodKind::Masking | MethodKind::Perturbation => {
                let fill_config = if kind == MethodKind::Masking {
                    &config.methods.masking
                } else {
                    &config.methods.perturbation
                };
                let candidates = fill_config.strategies(config.run.seed)?;
                let make = |fill: FillStrategy| -> MethodDescriptor {
                    if kind == MethodKind::Masking {
                        MethodDescriptor::Masking { fill }
                    } else {
                        MethodDescriptor::Perturbation { fill }
                    }
                };
                let mut best: Option<(f64, FillStrategy, f64)> = None;
                for fill in candidates {
                    let desc = make(fill);
                    let maps = maps_for(&desc, artifacts, data, &cal_idx, &cal_segmaps)?;
                    let t = select_threshold(&maps, &truths)?;
                    let mut confs = Vec::with_capacity(maps.len());
                    for (map, truth) in maps.iter().zip(&truths) {
                        confs.push(confusion(&binarize_map(map, t), truth)?);
                    }
                    let acc = aggregate(&confs)?.overall;
                    if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                        best = Some((acc, fill, t));
                    }
                }
                let (_, fill, t) = best.expect("nonempty candidate list");
                (make(fill), Some(fill.kind), Some(t))
            }
            MethodKind::Gradients => (MethodDescriptor::Gradients, None, None),
            MethodKind::Reconstruction => (MethodDescriptor::Reconstruction, None, None),
            MethodKind::Combined => (MethodDescriptor::Combined, None, None),
        };

        // Threshold on calibration maps unless fill selection already did.
        if threshold.is_none() {
            let maps = maps_for(&desc, artifacts, data, &cal_idx, &cal_segmaps)?;
            threshold = Some(select_threshold(&maps, &truths)?);
        }
        let threshold = threshold.unwrap();

        // Timed, serialized test pass.
        let mut test_maps = Vec::with_capacity(test_idx.len());
        let mut confs = Vec::with_capacity(test_idx.len());
        let mut time_sum = 0.0;
        for (&i, segmap) in test_idx.iter().zip(&test_segmaps) {
            let map = compute_map(
                &desc,
                &artifacts.estimator,
                artifacts.decoder.as_ref(),
                &data.images[i],
                segmap,
            )?;
            time_sum += map.wall_time;
            confs.push(confusion(
                &binarize_map(&map, threshold),
                data.masks[i].as_ref().unwrap(),
            )?);
            test_maps.push(map);
        }
        let row = MetricsRow {
            method: desc.display_name().to_string(),
            mean_time: time_sum / test_idx.len() as f64,
            threshold,
            rates: aggregate(&confs)?,
        };
        runs.push(MethodRun {
            descriptor: desc,
            row,
            chosen_fill,
            test_maps,
        });
    }
    Ok(runs)
}

/// Train everything and evaluate every configured method, in memory.
pub fn run_benchmark(config: &RunConfig) -> Result<(MetricsReport, Vec<MethodRun>, Artifacts)> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let data = prepare_data(config).map_err(|e| e.in_stage("prepare-data"))?;
    let artifacts = fit_artifacts(config, &data)?;
    let runs = pool
        .install(|| plan_and_evaluate(config, &data, &artifacts))
        .map_err(|e| e.in_stage("evaluate"))?;
    let report = MetricsReport {
        rows: runs.iter().map(|r| r.row.clone()).collect(),
    };
    Ok((report, runs, artifacts))
}

/// Full pipeline with artifact persistence under `config.run.out`.
///
/// On failure a `FAILED.txt` marker naming the stage is left in the output
/// directory next to whatever partial outputs exist.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutputs> {
    let out = config.run.out.clone();
    match run_pipeline_inner(config, &out) {
        Ok(outputs) => Ok(outputs),
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => "unknown".to_string(),
            };
            let _ = fs::create_dir_all(&out);
            let _ = fs::write(
                out.join("FAILED.txt"),
                format!("pipeline failed in stage: {stage}\n{e}\n"),
            );
            Err(e)
        }
    }
}

fn run_pipeline_inner(config: &RunConfig, out: &PathBuf) -> Result<PipelineOutputs> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let _ = fs::remove_file(out.join("FAILED.txt"));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let data = prepare_data(config).map_err(|e| e.in_stage("prepare-data"))?;
    let mut outputs: Vec<String> = Vec::new();

    // Persist the generated dataset so later stage-wise CLI calls can
    // reload exactly what the run saw.
    if config.dataset.source == "synthetic" {
        save_dataset(&data, &out.join("dataset")).map_err(|e| e.in_stage("prepare-data"))?;
        outputs.push("dataset/manifest.txt".into());
    }

    let artifacts = fit_artifacts(config, &data)?;
    let seed_meta = vec![("seed".to_string(), config.run.seed.to_string())];
    fs::create_dir_all(out.join("models"))?;
    bundle::save_classifier(&artifacts.model, &seed_meta, &out.join("models/classifier.cmpb"))
        .map_err(|e| e.in_stage("train-classifier"))?;
    outputs.push("models/classifier.cmpb".into());
    bundle::save_estimator(
        &artifacts.estimator,
        &seed_meta,
        &out.join("models/estimator.cmpb"),
    )
    .map_err(|e| e.in_stage("fit-competency"))?;
    outputs.push("models/estimator.cmpb".into());
    if let Some(decoder) = &artifacts.decoder {
        bundle::save_decoder(decoder, &seed_meta, &out.join("models/inpainter.cmpb"))
            .map_err(|e| e.in_stage("train-inpainter"))?;
        outputs.push("models/inpainter.cmpb".into());
    }

    let runs = pool
        .install(|| plan_and_evaluate(config, &data, &artifacts))
        .map_err(|e| e.in_stage("evaluate"))?;

    // Per-image map PNGsplus sidecar records.
    let test_idx = data.indices_of(Split::Test);
    for run in &runs {
        let dir = out.join("maps").join(run.descriptor.kind().name());
        fs::create_dir_all(&dir)?;
        for (&i, map) in test_idx.iter().zip(&run.test_maps) {
            let png = dir.join(format!("img_{i:05}.png"));
            save_map_png16(&map.normalized, map.height, map.width, &png)
                .map_err(|e| e.in_stage("persist"))?;
            let params = match (&run.chosen_fill, &run.descriptor) {
                (Some(fill), _) => format!("fill={}", fill.name()),
                (None, MethodDescriptor::Cropping { grid_h, grid_w, margin }) => {
                    format!("grid={grid_h}x{grid_w} margin={margin}")
                }
                _ => String::new(),
            };
            let sidecar = dir.join(format!("img_{i:05}.txt"));
            write_atomic(&sidecar, sidecar_text(map, &params).as_bytes())
                .map_err(|e| e.in_stage("persist"))?;
            outputs.push(format!("maps/{}/img_{i:05}.png", run.descriptor.kind().name()));
        }
    }

    let report = MetricsReport {
        rows: runs.iter().map(|r| r.row.clone()).collect(),
    };
    write_atomic(&out.join("report.txt"), report.text_table().as_bytes())
        .map_err(|e| e.in_stage("persist"))?;
    write_atomic(&out.join("report.csv"), report.csv().as_bytes())
        .map_err(|e| e.in_stage("persist"))?;
    outputs.push("report.txt".into());
    outputs.push("report.csv".into());

    let mut manifest = format!("config_hash {}\n", config.hash());
    manifest.push_str(&format!("seed {}\n", config.run.seed));
    manifest.push_str(&format!(
        "classifier_accuracy train={:.4} holdout={:.4}\n",
        artifacts.train_accuracy, artifacts.holdout_accuracy
    ));
    for path in &outputs {
        manifest.push_str(path);
        manifest.push('\n');
    }
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())
        .map_err(|e| e.in_stage("persist"))?;

    Ok(PipelineOutputs {
        report,
        runs,
        out_dir: Some(out.clone()),
    })
}
