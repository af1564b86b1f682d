//! Pixel-level accuracy and timing protocol for dependency maps.
//!
//! A pixel whose ground-truth mask is set counts as a positive (unfamiliar)
//! sample. Maps are binarized at a threshold selected on the calibration
//! split by balanced accuracy; rates are computed per image and averaged,
//! with undefined-denominator images excluded from that rate's mean and the
//! exclusion count reported.

use crate::competency::CompetencyEstimator;
use crate::error::{Error, Result};
use crate::inpainter::InpainterDecoder;
use crate::perception::{LabeledDataset, Split};
use crate::regional::{
    combine_maps, cropping_map, gradient_map, masking_map, perturbation_map, reconstruction_map,
    DependencyMap, FillStrategy, MethodKind,
};
use crate::scalar::Real;
use crate::segmentation::{felzenszwalb_segment, FelzParams, SegmentMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PixelConfusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl PixelConfusion {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn overall(&self) -> f64 {
        100.0 * (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    fn rate(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| 100.0 * num as f64 / den as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        Self::rate(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn tnr(&self) -> Option<f64> {
        Self::rate(self.true_neg, self.true_neg + self.false_pos)
    }

    pub fn ppv(&self) -> Option<f64> {
        Self::rate(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn npv(&self) -> Option<f64> {
        Self::rate(self.true_neg, self.true_neg + self.false_neg)
    }
}

/// `normalized > threshold` marks a pixel positive (unfamiliar).
pub fn binarize_map(map: &DependencyMap, threshold: f64) -> Vec<bool> {
    map.normalized.iter().map(|&v| v > threshold).collect()
}

/// Standard 2x2 counts; masks must agree in length.
pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<PixelConfusion> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = PixelConfusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Mean of a per-image rate over the images where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateStat {
    pub mean: Option<f64>,
    pub excluded: usize,
}

fn rate_stat(values: impl Iterator<Item = Option<f64>>) -> RateStat {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    RateStat {
        mean: (n > 0).then(|| sum / n as f64),
        excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRates {
    pub overall: f64,
    pub tpr: RateStat,
    pub tnr: RateStat,
    pub ppv: RateStat,
    pub npv: RateStat,
    pub n_images: usize,
}

/// Per-image rates averaged across images (the paper-style protocol).
pub fn aggregate(confusions: &[PixelConfusion]) -> Result<AggregateRates> {
    if confusions.is_empty() {
        return Err(Error::invalid("cannot aggregate zero images"));
    }
    let overall =
        confusions.iter().map(|c| c.overall()).sum::<f64>() / confusions.len() as f64;
    Ok(AggregateRates {
        overall,
        tpr: rate_stat(confusions.iter().map(|c| c.tpr())),
        tnr: rate_stat(confusions.iter().map(|c| c.tnr())),
        ppv: rate_stat(confusions.iter().map(|c| c.ppv())),
        npv: rate_stat(confusions.iter().map(|c| c.npv())),
        n_images: confusions.len(),
    })
}

/// Grid search over 101 thresholds maximizing mean per-image balanced
/// accuracy `(tpr + tnr) / 2`; ties resolve to the lowest threshold.
pub fn select_threshold(maps: &[DependencyMap], truths: &[Vec<bool>]) -> Result<f64> {
    if maps.is_empty() || maps.len() != truths.len() {
        return Err(Error::invalid("need matching, nonempty maps and truths"));
    }
    let mut best_t = 0.0;
    let mut best_score = f64::NEG_INFINITY;
    for step in 0..=100u32 {
        let t = step as f64 / 100.0;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (map, truth) in maps.iter().zip(truths) {
            let c = confusion(&binarize_map(map, t), truth)?;
            if let (Some(tpr), Some(tnr)) = (c.tpr(), c.tnr()) {
                sum += 0.5 * (tpr + tnr);
                n += 1;
            }
        }
        let score = if n > 0 { sum / n as f64 } else { 50.0 };
        if score > best_score {
            best_score = score;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Method descriptor: which map to compute and with what parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodDescriptor {
    Cropping {
        grid_h: usize,
        grid_w: usize,
        margin: usize,
    },
    Masking {
        fill: FillStrategy,
    },
    Perturbation {
        fill: FillStrategy,
    },
    Gradients,
    Reconstruction,
    /// Elementwise-mean combination of gradients and reconstruction.
    Combined,
}

impl MethodDescriptor {
    pub fn kind(&self) -> MethodKind {
        match self {
            MethodDescriptor::Cropping { .. } => MethodKind::Cropping,
            MethodDescriptor::Masking { .. } => MethodKind::Masking,
            MethodDescriptor::Perturbation { .. } => MethodKind::Perturbation,
            MethodDescriptor::Gradients => MethodKind::Gradients,
            MethodDescriptor::Reconstruction => MethodKind::Reconstruction,
            MethodDescriptor::Combined => MethodKind::Combined,
        }
    }

    /// Paper-style display name.
    pub fn display_name(&self) -> &'static str {
        match self {
            MethodDescriptor::Cropping { .. } => "Cropping",
            MethodDescriptor::Masking { .. } => "Masking",
            MethodDescriptor::Perturbation { .. } => "Perturbation",
            MethodDescriptor::Gradients => "Gradients",
            MethodDescriptor::Reconstruction => "Reconstruction",
            MethodDescriptor::Combined => "Grad. + Reco.",
        }
    }
}

/// Compute one method's map for one image.
pub fn compute_map<R: Real>(
    desc: &MethodDescriptor,
    est: &CompetencyEstimator<R>,
    decoder: Option<&InpainterDecoder<R>>,
    image: &Tensor<R>,
    segmap: &SegmentMap,
) -> Result<DependencyMap> {
    match desc {
        MethodDescriptor::Cropping {
            grid_h,
            grid_w,
            margin,
        } => cropping_map(est, image, *grid_h, *grid_w, *margin),
        MethodDescriptor::Masking { fill } => masking_map(est, image, segmap, fill),
        MethodDescriptor::Perturbation { fill } => perturbation_map(est, image, segmap, fill),
        MethodDescriptor::Gradients => gradient_map(est, image, segmap),
        MethodDescriptor::Reconstruction => {
            let decoder = decoder
                .ok_or_else(|| Error::invalid("reconstruction requires a trained decoder"))?;
            reconstruction_map(decoder, &est.model, image, segmap)
        }
        MethodDescriptor::Combined => {
            let decoder = decoder
                .ok_or_else(|| Error::invalid("combination requires a trained decoder"))?;
            let g = gradient_map(est, image, segmap)?;
            let r = reconstruction_map(decoder, &est.model, image, segmap)?;
            combine_maps(&g, &r)
        }
    }
}

/// One report row: method, mean per-call wall time, threshold, rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub mean_time: f64,
    pub threshold: f64,
    pub rates: AggregateRates,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn fmt_rate(r: &RateStat) -> String {
    match r.mean {
        Some(v) => format!("{v:.2}"),
        None => "--".to_string(),
    }
}

impl MetricsReport {
    /// Aligned plain-text table in the style of the evaluation tables.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>12} {:>9} {:>8} {:>8} {:>8} {:>8}\n",
            "Method", "Time (sec)", "Overall", "TPR", "TNR", "PPV", "NPV"
        ));
        out.push_str(&"-".repeat(76));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12.3} {:>9.2} {:>8} {:>8} {:>8} {:>8}\n",
                row.method,
                row.mean_time,
                row.rates.overall,
                fmt_rate(&row.rates.tpr),
                fmt_rate(&row.rates.tnr),
                fmt_rate(&row.rates.ppv),
                fmt_rate(&row.rates.npv),
            ));
        }
        out
    }

    /// Machine-readable CSV. Undefined rates are empty fields; the final
    /// column lists per-rate exclusion counts.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "method,time,overall,tpr,tnr,ppv,npv,threshold,n_images,n_excluded_per_rate\n",
        );
        let cell = |r: &RateStat| r.mean.map(|v| format!("{v:.6}")).unwrap_or_default();
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{},{},{:.2},{},tpr:{};tnr:{};ppv:{};npv:{}\n",
                row.method,
                row.mean_time,
                row.rates.overall,
                cell(&row.rates.tpr),
                cell(&row.rates.tnr),
                cell(&row.rates.ppv),
                cell(&row.rates.npv),
                row.threshold,
                row.rates.n_images,
                row.rates.tpr.excluded,
                row.rates.tnr.excluded,
                row.rates.ppv.excluded,
                row.rates.npv.excluded,
            ));
        }
        out
    }
}

/// Evaluate an arbitrary map producer against the dataset's test split,
/// selecting the threshold on the calibration split when none is given.
///
/// The per-image wall time is the map's own recorded time; segmentation is
/// shared across methods and excluded.
pub fn evaluate_method_with<R: Real>(
    mut map_fn: impl FnMut(&Tensor<R>, &SegmentMap) -> Result<DependencyMap>,
    method_name: &str,
    data: &LabeledDataset<R>,
    segparams: &FelzParams,
    threshold: Option<f64>,
) -> Result<MetricsRow> {
    let test_idx = data.indices_of(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    for &i in &test_idx {
        if data.masks[i].is_none() {
            return Err(Error::invalid(format!(
                "test image {i} has no ground-truth mask"
            )));
        }
    }

    let threshold = match threshold {
        Some(t) => t,
        None => {
            let cal_idx = data.indices_of(Split::Calibration);
            if cal_idx.is_empty() {
                return Err(Error::invalid(
                    "threshold selection needs a calibration split",
                ));
            }
            let mut maps = Vec::with_capacity(cal_idx.len());
            let mut truths = Vec::with_capacity(cal_idx.len());
            for &i in &cal_idx {
                let truth = data.masks[i].clone().ok_or_else(|| {
                    Error::invalid(format!("calibration image {i} has no mask"))
                })?;
                let segmap = felzenszwalb_segment(&data.images[i], segparams)?;
                maps.push(map_fn(&data.images[i], &segmap)?);
                truths.push(truth);
            }
            select_threshold(&maps, &truths)?
        }
    };

    let mut confusions = Vec::with_capacity(test_idx.len());
    let mut time_sum = 0.0;
    for &i in &test_idx {
        let segmap = felzenszwalb_segment(&data.images[i], segparams)?;
        let map = map_fn(&data.images[i], &segmap)?;
        time_sum += map.wall_time;
        let pred = binarize_map(&map, threshold);
        confusions.push(confusion(&pred, data.masks[i].as_ref().unwrap())?);
    }
    Ok(MetricsRow {
        method: method_name.to_string(),
        mean_time: time_sum / test_idx.len() as f64,
        threshold,
        rates: aggregate(&confusions)?,
    })
}

/// Evaluate one standard method end to end; see [`evaluate_method_with`].
pub fn evaluate_method<R: Real>(
    desc: &MethodDescriptor,
    data: &LabeledDataset<R>,
    est: &CompetencyEstimator<R>,
    decoder: Option<&InpainterDecoder<R>>,
    segparams: &FelzParams,
    threshold: Option<f64>,
) -> Result<MetricsRow> {
    evaluate_method_with(
        |image, segmap| compute_map(desc, est, decoder, image, segmap),
        desc.display_name(),
        data,
        segparams,
        threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regional::normalize;

    fn map_of(raw: Vec<f64>, h: usize, w: usize) -> DependencyMap {
        DependencyMap {
            method: MethodKind::Gradients,
            height: h,
            width: w,
            normalized: normalize(&raw),
            raw,
            wall_time: 1e-6,
            evals: 1,
            segmap: None,
        }
    }

    #[test]
    fn binarize_edge_thresholds() {
        let map = map_of(vec![0.0, 0.25, 0.5, 1.0], 2, 2);
        let at0 = binarize_map(&map, 0.0);
        assert_eq!(at0, vec![false, true, true, true]);
        let at1 = binarize_map(&map, 1.0);
        assert!(at1.iter().all(|&p| !p));
        let half = map_of(vec![0.0, 0.0, 1.0, 1.0], 2, 2);
        assert_eq!(binarize_map(&half, 0.5), vec![false, false, true, true]);
    }

    #[test]
    fn confusion_matches_hand_counts() {
        let pred = vec![true, true, false, false];
        let truth = vec![true, false, false, true];
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(
            c,
            PixelConfusion {
                true_pos: 1,
                false_pos: 1,
                true_neg: 1,
                false_neg: 1
            }
        );

        let same = confusion(&truth, &truth).unwrap();
        assert_eq!(same.false_pos, 0);
        assert_eq!(same.false_neg, 0);

        let inverted: Vec<bool> = truth.iter().map(|&t| !t).collect();
        let c = confusion(&inverted, &truth).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
    }

    #[test]
    fn inverting_prediction_swaps_counts() {
        let pred = vec![true, false, true, true, false, false];
        let truth = vec![true, true, false, true, false, true];
        let c = confusion(&pred, &truth).unwrap();
        let inv: Vec<bool> = pred.iter().map(|&p| !p).collect();
        let ci = confusion(&inv, &truth).unwrap();
        assert_eq!(ci.true_pos, c.false_neg);
        assert_eq!(ci.false_neg, c.true_pos);
        assert_eq!(ci.true_neg, c.false_pos);
        assert_eq!(ci.false_pos, c.true_neg);
    }

    #[test]
    fn aggregate_rates_and_exclusions() {
        let perfect = PixelConfusion {
            true_pos: 4,
            true_neg: 12,
            ..Default::default()
        };
        let agg = aggregate(&[perfect]).unwrap();
        assert_eq!(agg.overall, 100.0);
        assert_eq!(agg.tpr.mean, Some(100.0));
        assert_eq!(agg.tnr.mean, Some(100.0));
        assert_eq!(agg.ppv.mean, Some(100.0));
        assert_eq!(agg.npv.mean, Some(100.0));

        // Two images with overall 100 and 50 average to 75.
        let half = PixelConfusion {
            true_pos: 1,
            false_pos: 1,
            true_neg: 1,
            false_neg: 1,
        };
        let agg = aggregate(&[perfect, half]).unwrap();
        assert_eq!(agg.overall, 75.0);

        // An image without positives has undefined tpr, excluded once.
        let no_pos = PixelConfusion {
            true_neg: 5,
            false_pos: 3,
            ..Default::default()
        };
        let agg = aggregate(&[perfect, no_pos]).unwrap();
        assert_eq!(agg.tpr.excluded, 1);
        assert_eq!(agg.tpr.mean, Some(100.0));

        // aggregate of N copies equals the single-image rates.
        let agg1 = aggregate(&[half]).unwrap();
        let agg5 = aggregate(&[half; 5]).unwrap();
        assert_eq!(agg1.overall, agg5.overall);
        assert_eq!(agg1.tpr.mean, agg5.tpr.mean);
        assert_eq!(agg1.ppv.mean, agg5.ppv.mean);

        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn threshold_selection_prefers_lowest_tie() {
        // Perfectly separating map: thresholds 0.00 .. 0.99 all reach
        // balanced accuracy 100 under the strict-inequality binarization;
        // the tie rule picks the lowest.
        let raw: Vec<f64> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let truth: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let t = select_threshold(&[map_of(raw, 4, 4)], &[truth]).unwrap();
        assert_eq!(t, 0.0);

        // Constant maps: every threshold ties at 50; returns 0.
        let raw = vec![0.7; 16];
        let truth: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let t = select_threshold(&[map_of(raw, 4, 4)], &[truth]).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn threshold_selection_finds_separating_value() {
        // Noisy map where only thresholds above 0.6 separate cleanly.
        let raw: Vec<f64> = (0..100)
            .map(|i| if i < 20 { 0.8 + (i % 5) as f64 * 0.04 } else { 0.3 + (i % 7) as f64 * 0.04 })
            .collect();
        let truth: Vec<bool> = (0..100).map(|i| i < 20).collect();
        let t = select_threshold(&[map_of(raw.clone(), 10, 10)], &[truth.clone()]).unwrap();
        let c = confusion(&binarize_map(&map_of(raw, 10, 10), t), &truth).unwrap();
        assert_eq!(c.overall(), 100.0);
    }

    #[test]
    fn oracle_method_scores_perfectly() {
        use crate::perception::{LabeledDataset, Split};
        let size = 8;
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for i in 0..4 {
            images.push(Tensor::filled(&[3, size, size], 0.5f32 + 0.01 * i as f32));
            let mask: Vec<bool> = (0..size * size).map(|p| p % (i + 2) == 0).collect();
            masks.push(Some(mask));
        }
        let data = LabeledDataset {
            labels: vec![0, 0, 1, 1],
            splits: vec![Split::Test; 4],
            images,
            masks,
            n_classes: 2,
        };
        // Oracle: paint the truth mask directly.
        let mut call = 0usize;
        let truth_maps: Vec<Vec<f64>> = data
            .masks
            .iter()
            .map(|m| {
                m.as_ref()
                    .unwrap()
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let row = evaluate_method_with(
            |_, _| {
                let map = map_of(truth_maps[call].clone(), size, size);
                call += 1;
                Ok(map)
            },
            "Oracle",
            &data,
            &FelzParams::default(),
            Some(0.5),
        )
        .unwrap();
        assert_eq!(row.rates.overall, 100.0);
        assert_eq!(row.rates.tpr.mean, Some(100.0));
        assert_eq!(row.rates.tnr.mean, Some(100.0));
        assert_eq!(row.rates.ppv.mean, Some(100.0));
        assert_eq!(row.rates.npv.mean, Some(100.0));
    }

    #[test]
    fn missing_test_masks_rejected() {
        let data = LabeledDataset::<f32> {
            images: vec![Tensor::filled(&[3, 8, 8], 0.5)],
            labels: vec![0],
            splits: vec![Split::Test],
            masks: vec![None],
            n_classes: 2,
        };
        let err = evaluate_method_with(
            |_, _| Ok(map_of(vec![0.0; 64], 8, 8)),
            "x",
            &data,
            &FelzParams::default(),
            Some(0.5),
        );
        assert!(err.is_err());
    }

    #[test]
    fn report_formats_are_stable() {
        let rates = AggregateRates {
            overall: 96.16,
            tpr: RateStat {
                mean: Some(88.87),
                excluded: 0,
            },
            tnr: RateStat {
                mean: Some(98.83),
                excluded: 0,
            },
            ppv: RateStat {
                mean: Some(93.53),
                excluded: 1,
            },
            npv: RateStat {
                mean: None,
                excluded: 2,
            },
            n_images: 10,
        };
        let report = MetricsReport {
            rows: vec![MetricsRow {
                method: "Reconstruction".into(),
                mean_time: 0.081,
                threshold: 0.35,
                rates,
            }],
        };
        let table = report.text_table();
        assert!(table.contains("Reconstruction"));
        assert!(table.contains("96.16"));
        assert!(table.contains("--"));
        let csv = report.csv();
        assert!(csv.starts_with("method,time,overall"));
        assert!(csv.contains("tpr:0;tnr:0;ppv:1;npv:2"));
        assert!(csv.contains(",0.35,10,"));
    }
}
