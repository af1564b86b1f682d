//! Regional incompetency-dependency methods.
//!
//! Each method maps an image to a per-pixel dependency score: how much that
//! region contributes to low model competency. Scores are painted uniformly
//! over segments (grid cells for cropping) and min-max normalized per image,
//! with the all-equal case mapping to all-zero.
//!
//! Methods: cropping (score each zoomed grid cell), masking (keep a segment,
//! fill the rest), perturbation (fill the segment, keep the rest), gradients
//! (segment-mean gradient magnitude), and reconstruction (segment-restricted
//! inpainting error), plus the elementwise-mean combination of two maps.

use std::time::Instant;

use rand::Rng;

use crate::competency::CompetencyEstimator;
use crate::error::{Error, Result};
use crate::inpainter::{mask_with_ones, reconstruct, InpainterDecoder};
use crate::perception::PerceptionModel;
use crate::rng::{normal, stream};
use crate::scalar::Real;
use crate::segmentation::{gaussian_smooth, SegmentMap};
use crate::tensor::{crop, resize_bilinear, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    Cropping,
    Masking,
    Perturbation,
    Gradients,
    Reconstruction,
    Combined,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Cropping => "cropping",
            MethodKind::Masking => "masking",
            MethodKind::Perturbation => "perturbation",
            MethodKind::Gradients => "gradients",
            MethodKind::Reconstruction => "reconstruction",
            MethodKind::Combined => "combined",
        }
    }

    pub fn parse(name: &str) -> Option<MethodKind> {
        Some(match name {
            "cropping" => MethodKind::Cropping,
            "masking" => MethodKind::Masking,
            "perturbation" => MethodKind::Perturbation,
            "gradients" => MethodKind::Gradients,
            "reconstruction" => MethodKind::Reconstruction,
            "combined" => MethodKind::Combined,
            _ => return None,
        })
    }
}

/// Per-pixel incompetency dependency scores for one image.
#[derive(Debug, Clone)]
pub struct DependencyMap {
    pub method: MethodKind,
    pub height: usize,
    pub width: usize,
    pub raw: Vec<f64>,
    /// `(raw - min) / (max - min)`; all-equal raw maps to all-zero.
    pub normalized: Vec<f64>,
    /// Wall time of the producing call, seconds.
    pub wall_time: f64,
    /// Estimator/decoder evaluations the call performed.
    pub evals: usize,
    /// Segmentation the scores are painted over; absent for cropping.
    pub segmap: Option<SegmentMap>,
}

impl DependencyMap {
    fn from_raw(
        method: MethodKind,
        height: usize,
        width: usize,
        raw: Vec<f64>,
        segmap: Option<SegmentMap>,
    ) -> Self {
        let normalized = normalize(&raw);
        DependencyMap {
            method,
            height,
            width,
            raw,
            normalized,
            wall_time: 0.0,
            evals: 0,
            segmap,
        }
    }
}

/// Min-max normalization with the all-equal -> all-zero rule.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in raw {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return vec![0.0; raw.len()];
    }
    let span = max - min;
    raw.iter().map(|&v| (v - min) / span).collect()
}

/// Pixel-fill rule used by masking and perturbation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillKind {
    Zeros,
    Ones,
    Mean,
    UniformRandom,
    GaussianRandom,
    Blur,
    AdditiveNoise,
}

impl FillKind {
    pub fn name(&self) -> &'static str {
        match self {
            FillKind::Zeros => "zeros",
            FillKind::Ones => "ones",
            FillKind::Mean => "mean",
            FillKind::UniformRandom => "uniform-random",
            FillKind::GaussianRandom => "gaussian-random",
            FillKind::Blur => "blur",
            FillKind::AdditiveNoise => "additive-noise",
        }
    }

    pub fn parse(name: &str) -> Option<FillKind> {
        Some(match name {
            "zeros" => FillKind::Zeros,
            "ones" => FillKind::Ones,
            "mean" => FillKind::Mean,
            "uniform-random" => FillKind::UniformRandom,
            "gaussian-random" => FillKind::GaussianRandom,
            "blur" => FillKind::Blur,
            "additive-noise" => FillKind::AdditiveNoise,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillStrategy {
    pub kind: FillKind,
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl FillStrategy {
    pub fn new(kind: FillKind) -> Self {
        FillStrategy {
            kind,
            blur_sigma: 2.0,
            noise_std: 0.25,
            seed: 0,
        }
    }

    pub fn with_seed(kind: FillKind, seed: u64) -> Self {
        FillStrategy {
            seed,
            ..FillStrategy::new(kind)
        }
    }
}

/// Replace the pixels where `region` is true according to the strategy.
/// Random strategies are deterministic given the strategy seed.
pub fn apply_fill<R: Real>(
    image: &Tensor<R>,
    region: &[bool],
    fill: &FillStrategy,
) -> Result<Tensor<R>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if region.len() != h * w {
        return Err(Error::shape(format!(
            "region has {} pixels, image has {}",
            region.len(),
            h * w
        )));
    }
    let mut out = image.clone();
    let mut rng = stream(fill.seed, "fill", fill.kind as u64);
    match fill.kind {
        FillKind::Zeros | FillKind::Ones => {
            let v = if fill.kind == FillKind::Zeros {
                R::zero()
            } else {
                R::one()
            };
            for cc in 0..c {
                for (i, &m) in region.iter().enumerate() {
                    if m {
                        out.data_mut()[cc * h * w + i] = v;
                    }
                }
            }
        }
        FillKind::Mean => {
            // Per-channel mean of the whole image.
            for cc in 0..c {
                let plane = &image.data()[cc * h * w..(cc + 1) * h * w];
                let mean = R::of(plane.iter().map(|v| v.f64()).sum::<f64>() / (h * w) as f64);
                for (i, &m) in region.iter().enumerate() {
                    if m {
                        out.data_mut()[cc * h * w + i] = mean;
                    }
                }
            }
        }
        FillKind::UniformRandom => {
            for (i, &m) in region.iter().enumerate() {
                if m {
                    for cc in 0..c {
                        out.data_mut()[cc * h * w + i] = R::of(rng.gen_range(0.0..1.0));
                    }
                }
            }
        }
        FillKind::GaussianRandom => {
            for (i, &m) in region.iter().enumerate() {
                if m {
                    for cc in 0..c {
                        let v = 0.5 + 0.25 * normal(&mut rng);
                        out.data_mut()[cc * h * w + i] = R::of(v.clamp(0.0, 1.0));
                    }
                }
            }
        }
        FillKind::Blur => {
            let blurred = gaussian_smooth(image, fill.blur_sigma)?;
            for cc in 0..c {
                for (i, &m) in region.iter().enumerate() {
                    if m {
                        out.data_mut()[cc * h * w + i] = blurred.data()[cc * h * w + i];
                    }
                }
            }
        }
        FillKind::AdditiveNoise => {
            for (i, &m) in region.iter().enumerate() {
                if m {
                    for cc in 0..c {
                        let base = image.data()[cc * h * w + i].f64();
                        let v = base + fill.noise_std * normal(&mut rng);
                        out.data_mut()[cc * h * w + i] = R::of(v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn image_dims<R: Real>(image: &Tensor<R>) -> Result<(usize, usize, usize)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    Ok((c, h, w))
}

fn check_segmap<R: Real>(image: &Tensor<R>, segmap: &SegmentMap) -> Result<()> {
    let (_, h, w) = image_dims(image)?;
    if segmap.height != h || segmap.width != w {
        return Err(Error::shape(format!(
            "segment map is {}x{}, image is {h}x{w}",
            segmap.height, segmap.width
        )));
    }
    Ok(())
}

/// Score each zoomed grid cell: crop the cell plus `margin` pixels, resize
/// to the model input, and paint `1 - C` over the cell.
pub fn cropping_map<R: Real>(
    est: &CompetencyEstimator<R>,
    image: &Tensor<R>,
    grid_h: usize,
    grid_w: usize,
    margin: usize,
) -> Result<DependencyMap> {
    let start = Instant::now();
    let (_, h, w) = image_dims(image)?;
    if grid_h < 1 || grid_w < 1 || grid_h > h || grid_w > w {
        return Err(Error::invalid(format!(
            "grid {grid_h}x{grid_w} does not tile a {h}x{w} image"
        )));
    }
    let &[_, in_h, in_w] = est.model.spec.input_shape.as_slice() else {
        return Err(Error::shape("model input must be [C,H,W]".to_string()));
    };
    let cell_h = h.div_ceil(grid_h);
    let cell_w = w.div_ceil(grid_w);
    let mut raw = vec![0.0f64; h * w];
    let mut evals = 0;
    for gy in 0..grid_h {
        let y0 = gy * cell_h;
        let y1 = ((gy + 1) * cell_h).min(h);
        if y0 >= y1 {
            return Err(Error::invalid(format!("grid cell row {gy} is empty")));
        }
        for gx in 0..grid_w {
            let x0 = gx * cell_w;
            let x1 = ((gx + 1) * cell_w).min(w);
            if x0 >= x1 {
                return Err(Error::invalid(format!("grid cell column {gx} is empty")));
            }
            let wy0 = y0.saturating_sub(margin);
            let wy1 = (y1 + margin).min(h);
            let wx0 = x0.saturating_sub(margin);
            let wx1 = (x1 + margin).min(w);
            let window = crop(image, wy0, wy1, wx0, wx1)?;
            let resized = resize_bilinear(&window, in_h, in_w)?;
            let score = est.score(&resized)?;
            evals += 1;
            let d = 1.0 - score;
            for y in y0..y1 {
                for x in x0..x1 {
                    raw[y * w + x] = d;
                }
            }
        }
    }
    let mut map = DependencyMap::from_raw(MethodKind::Cropping, h, w, raw, None);
    map.evals = evals;
    map.wall_time = start.elapsed().as_secs_f64();
    Ok(map)
}

/// Keep each segment, fill the rest, and paint `1 - C_i` over the segment.
pub fn masking_map<R: Real>(
    est: &CompetencyEstimator<R>,
    image: &Tensor<R>,
    segmap: &SegmentMap,
    fill: &FillStrategy,
) -> Result<DependencyMap> {
    let start = Instant::now();
    check_segmap(image, segmap)?;
    let (_, h, w) = image_dims(image)?;
    let mut raw = vec![0.0f64; h * w];
    let mut complement = vec![false; h * w];
    for id in 0..segmap.n_segments {
        for (slot, &l) in complement.iter_mut().zip(&segmap.labels) {
            *slot = l as usize != id;
        }
        let masked = apply_fill(image, &complement, fill)?;
        let d = 1.0 - est.score(&masked)?;
        for (i, &l) in segmap.labels.iter().enumerate() {
            if l as usize == id {
                raw[i] = d;
            }
        }
    }
    let mut map = DependencyMap::from_raw(MethodKind::Masking, h, w, raw, Some(segmap.clone()));
    map.evals = segmap.n_segments;
    map.wall_time = start.elapsed().as_secs_f64();
    Ok(map)
}

/// Fill each segment (rest untouched) and paint `max(0, C_i - C)`.
pub fn perturbation_map<R: Real>(
    est: &CompetencyEstimator<R>,
    image: &Tensor<R>,
    segmap: &SegmentMap,
    fill: &FillStrategy,
) -> Result<DependencyMap> {
    let start = Instant::now();
    check_segmap(image, segmap)?;
    let (_, h, w) = image_dims(image)?;
    let base = est.score(image)?;
    let mut raw = vec![0.0f64; h * w];
    let mut region = vec![false; h * w];
    for id in 0..segmap.n_segments {
        for (slot, &l) in region.iter_mut().zip(&segmap.labels) {
            *slot = l as usize == id;
        }
        let perturbed = apply_fill(image, &region, fill)?;
        let d = (est.score(&perturbed)? - base).max(0.0);
        for (i, &l) in segmap.labels.iter().enumerate() {
            if l as usize == id {
                raw[i] = d;
            }
        }
    }
    let mut map =
        DependencyMap::from_raw(MethodKind::Perturbation, h, w, raw, Some(segmap.clone()));
    map.evals = segmap.n_segments + 1;
    map.wall_time = start.elapsed().as_secs_f64();
    Ok(map)
}

/// Mean absolute score gradient per segment (over pixels and channels).
pub fn gradient_map<R: Real>(
    est: &CompetencyEstimator<R>,
    image: &Tensor<R>,
    segmap: &SegmentMap,
) -> Result<DependencyMap> {
    let start = Instant::now();
    check_segmap(image, segmap)?;
    let (_, h, w) = image_dims(image)?;
    let grad = est.gradient(image)?;
    let raw = segment_mean_magnitude(&grad, segmap)?;
    let mut map = DependencyMap::from_raw(MethodKind::Gradients, h, w, raw, Some(segmap.clone()));
    map.evals = 1;
    map.wall_time = start.elapsed().as_secs_f64();
    Ok(map)
}

/// Paint each segment with the mean of `|field|` over the segment's pixels
/// and channels.
pub fn segment_mean_magnitude<R: Real>(
    field: &Tensor<R>,
    segmap: &SegmentMap,
) -> Result<Vec<f64>> {
    let (c, h, w) = image_dims(field)?;
    let mut sums = vec![0.0f64; segmap.n_segments];
    let mut counts = vec![0usize; segmap.n_segments];
    for (i, &l) in segmap.labels.iter().enumerate() {
        let mut acc = 0.0;
        for cc in 0..c {
            acc += field.data()[cc * h * w + i].f64().abs();
        }
        sums[l as usize] += acc;
        counts[l as usize] += c;
    }
    let mut raw = vec![0.0f64; h * w];
    for (i, &l) in segmap.labels.iter().enumerate() {
        raw[i] = sums[l as usize] / counts[l as usize] as f64;
    }
    Ok(raw)
}

/// Mask each segment with ones, reconstruct, and paint the segment with the
/// reconstruction error restricted to that segment's pixels.
pub fn reconstruction_map<R: Real>(
    decoder: &InpainterDecoder<R>,
    model: &PerceptionModel<R>,
    image: &Tensor<R>,
    segmap: &SegmentMap,
) -> Result<DependencyMap> {
    let start = Instant::now();
    check_segmap(image, segmap)?;
    let (c, h, w) = image_dims(image)?;
    let mut raw = vec![0.0f64; h * w];
    let mut region = vec![false; h * w];
    for id in 0..segmap.n_segments {
        for (slot, &l) in region.iter_mut().zip(&segmap.labels) {
            *slot = l as usize == id;
        }
        let masked = mask_with_ones(image, &region);
        let recon = reconstruct(decoder, model, &masked)?;
        // MSE over this segment's pixels only, all channels.
        let mut err = 0.0f64;
        let mut count = 0usize;
        for (i, &m) in region.iter().enumerate() {
            if m {
                for cc in 0..c {
                    let d = recon.data()[cc * h * w + i].f64()
                        - image.data()[cc * h * w + i].f64();
                    err += d * d;
                }
                count += c;
            }
        }
        let d = err / count as f64;
        for (i, &m) in region.iter().enumerate() {
            if m {
                raw[i] = d;
            }
        }
    }
    let mut map =
        DependencyMap::from_raw(MethodKind::Reconstruction, h, w, raw, Some(segmap.clone()));
    map.evals = segmap.n_segments;
    map.wall_time = start.elapsed().as_secs_f64();
    Ok(map)
}

/// Elementwise mean of two normalized maps, renormalized.
pub fn combine_maps(a: &DependencyMap, b: &DependencyMap) -> Result<DependencyMap> {
    let start = Instant::now();
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "maps are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let raw: Vec<f64> = a
        .normalized
        .iter()
        .zip(&b.normalized)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let mut map = DependencyMap::from_raw(
        MethodKind::Combined,
        a.height,
        a.width,
        raw,
        a.segmap.clone().or_else(|| b.segmap.clone()),
    );
    map.evals = a.evals + b.evals;
    map.wall_time = a.wall_time + b.wall_time + start.elapsed().as_secs_f64();
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::ClassGaussianMixture;
    use crate::logistic::{HeadMode, LogisticHead};
    use crate::nn::ParamSet;
    use crate::perception::{perception_spec, PerceptionModel};
    use crate::rng::stream;
    use crate::segmentation::{felzenszwalb_segment, FelzParams};
    use std::sync::Arc;

    /// Deterministic estimator without training: random perception params,
    /// identity-covariance mixtures, small random heads.
    fn random_estimator(seed: u64, size: usize, k: usize) -> CompetencyEstimator<f32> {
        let spec = perception_spec(&[3, size, size], k).unwrap();
        let mut rng = stream(seed, "reg-est", 0);
        let params = ParamSet::<f32>::init(&spec, &mut rng);
        let model = PerceptionModel {
            spec,
            params,
            n_classes: k,
            feature_dim: 64,
        };
        let dim = 64;
        let mut cov = vec![0.0f32; dim * dim];
        let mut cov_inv = vec![0.0f64; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
            cov_inv[i * dim + i] = 1.0;
        }
        let comp = crate::gmm::Component {
            weight: 1.0f32,
            mean: vec![0.0; dim],
            cov,
            cov_inv,
            log_det: 0.0,
        };
        let gmm = ClassGaussianMixture {
            dim,
            classes: vec![vec![comp]; k],
        };
        let mut transfer = LogisticHead::zeros(HeadMode::Multinomial, dim, k);
        let mut ood = LogisticHead::zeros(HeadMode::Binary, k, 1);
        for w in transfer.weights.iter_mut() {
            *w = rng.gen_range(-0.05..0.05);
        }
        for w in ood.weights.iter_mut() {
            *w = rng.gen_range(-0.2..-0.01);
        }
        CompetencyEstimator {
            model: Arc::new(model),
            gmm,
            transfer,
            ood,
            tau: 0.5,
        }
    }

    fn random_image(seed: u64, size: usize) -> Tensor<f32> {
        let mut rng = stream(seed, "reg-img", 0);
        Tensor::from_vec(
            &[3, size, size],
            (0..3 * size * size)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_cell_cropping_is_uniform_and_normalizes_to_zero() {
        let est = random_estimator(0, 16, 3);
        let img = random_image(1, 16);
        let map = cropping_map(&est, &img, 1, 1, 0).unwrap();
        let resized = resize_bilinear(&img, 16, 16).unwrap();
        let expect = 1.0 - est.score(&resized).unwrap();
        assert!(map.raw.iter().all(|&v| v == expect));
        assert!(map.normalized.iter().all(|&v| v == 0.0));
        assert_eq!(map.evals, 1);
    }

    #[test]
    fn constant_image_cropping_normalizes_to_zero() {
        let est = random_estimator(1, 16, 3);
        let img = Tensor::filled(&[3, 16, 16], 0.4f32);
        let map = cropping_map(&est, &img, 2, 2, 2).unwrap();
        assert_eq!(map.evals, 4);
        assert!(map.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cropping_rejects_grid_finer_than_pixels() {
        let est = random_estimator(2, 16, 3);
        let img = random_image(2, 16);
        assert!(cropping_map(&est, &img, 17, 1, 0).is_err());
    }

    #[test]
    fn whole_image_segment_masking_equals_one_minus_score() {
        let est = random_estimator(3, 16, 3);
        let img = random_image(3, 16);
        let segmap = SegmentMap {
            height: 16,
            width: 16,
            labels: vec![0; 256],
            n_segments: 1,
        };
        let fill = FillStrategy::new(FillKind::Mean);
        let map = masking_map(&est, &img, &segmap, &fill).unwrap();
        let expect = 1.0 - est.score(&img).unwrap();
        assert!(map.raw.iter().all(|&v| v == expect));
        assert!(map.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masking_zero_fill_on_zero_image_is_all_zero() {
        let est = random_estimator(4, 16, 3);
        let img = Tensor::zeros(&[3, 16, 16]);
        let segmap = felzenszwalb_segment(
            &random_image(4, 16),
            &FelzParams {
                k: 0.5,
                sigma: 0.5,
                min_size: 8,
                connectivity: 8,
            },
        )
        .unwrap();
        let map = masking_map(&est, &img, &segmap, &FillStrategy::new(FillKind::Zeros)).unwrap();
        let first = map.raw[0];
        assert!(map.raw.iter().all(|&v| v == first));
        assert!(map.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbation_noop_fill_gives_zero_map() {
        // Mean fill on a constant image replaces pixels with themselves.
        let est = random_estimator(5, 16, 3);
        let img = Tensor::filled(&[3, 16, 16], 0.37f32);
        let segmap = SegmentMap {
            height: 16,
            width: 16,
            labels: (0..256u32).map(|i| (i % 4) as u32).collect(),
            n_segments: 4,
        };
        let map =
            perturbation_map(&est, &img, &segmap, &FillStrategy::new(FillKind::Mean)).unwrap();
        assert!(map.raw.iter().all(|&v| v == 0.0));
        assert_eq!(map.evals, 5);
    }

    #[test]
    fn masking_and_perturbation_consistent_on_whole_image_segment() {
        let est = random_estimator(6, 16, 3);
        let img = random_image(6, 16);
        let segmap = SegmentMap {
            height: 16,
            width: 16,
            labels: vec![0; 256],
            n_segments: 1,
        };
        let fill = FillStrategy::with_seed(FillKind::UniformRandom, 11);
        let mask_map = masking_map(&est, &img, &segmap, &fill).unwrap();
        assert!(mask_map
            .raw
            .iter()
            .all(|&v| v == 1.0 - est.score(&img).unwrap()));

        let pert_map = perturbation_map(&est, &img, &segmap, &fill).unwrap();
        let filled = apply_fill(&img, &vec![true; 256], &fill).unwrap();
        let expect = (est.score(&filled).unwrap() - est.score(&img).unwrap()).max(0.0);
        assert!(pert_map.raw.iter().all(|&v| v == expect));
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let mut est = random_estimator(7, 16, 3);
        est.transfer = LogisticHead::zeros(HeadMode::Multinomial, 64, 3);
        est.ood = LogisticHead::zeros(HeadMode::Binary, 3, 1);
        let img = random_image(7, 16);
        let segmap = felzenszwalb_segment(
            &img,
            &FelzParams {
                k: 0.5,
                sigma: 0.5,
                min_size: 4,
                connectivity: 8,
            },
        )
        .unwrap();
        let map = gradient_map(&est, &img, &segmap).unwrap();
        assert!(map.raw.iter().all(|&v| v == 0.0));
        assert!(map.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_average_matches_per_pixel_oracle() {
        let est = random_estimator(8, 16, 3);
        let img = random_image(8, 16);
        let segmap = felzenszwalb_segment(
            &img,
            &FelzParams {
                k: 0.3,
                sigma: 0.4,
                min_size: 4,
                connectivity: 8,
            },
        )
        .unwrap();
        let grad = est.gradient(&img).unwrap();
        let raw = segment_mean_magnitude(&grad, &segmap).unwrap();

        // Brute-force loop per segment id.
        for id in 0..segmap.n_segments {
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for y in 0..16 {
                for x in 0..16 {
                    if segmap.labels[y * 16 + x] as usize == id {
                        for c in 0..3 {
                            acc += grad.data()[(c * 16 + y) * 16 + x].abs() as f64;
                            count += 1;
                        }
                    }
                }
            }
            let expect = acc / count as f64;
            for y in 0..16 {
                for x in 0..16 {
                    if segmap.labels[y * 16 + x] as usize == id {
                        assert!(
                            (raw[y * 16 + x] - expect).abs() < 1e-9,
                            "segment {id}: {} vs {expect}",
                            raw[y * 16 + x]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn two_segment_magnitude_field_normalizes_to_indicator() {
        // |g| = 1 on the left half, 0 on the right.
        let mut g = Tensor::<f32>::zeros(&[3, 4, 4]);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    g.data_mut()[(c * 4 + y) * 4 + x] = if c == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let segmap = SegmentMap {
            height: 4,
            width: 4,
            labels: (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect(),
            n_segments: 2,
        };
        let raw = segment_mean_magnitude(&g, &segmap).unwrap();
        let norm = normalize(&raw);
        for (i, &l) in segmap.labels.iter().enumerate() {
            assert_eq!(norm[i], if l == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn combine_is_idempotent_and_degenerate_cases_zero() {
        let est = random_estimator(9, 16, 3);
        let img = random_image(9, 16);
        let map = cropping_map(&est, &img, 4, 4, 2).unwrap();
        let twice = combine_maps(&map, &map).unwrap();
        for (a, b) in twice.normalized.iter().zip(&map.normalized) {
            assert!((a - b).abs() < 1e-12);
        }

        let zeros = DependencyMap::from_raw(MethodKind::Gradients, 4, 4, vec![0.0; 16], None);
        let ones = DependencyMap::from_raw(
            MethodKind::Reconstruction,
            4,
            4,
            (0..16).map(|i| i as f64 / 15.0).collect(),
            None,
        );
        let all_one = DependencyMap {
            normalized: vec![1.0; 16],
            ..ones.clone()
        };
        let combined = combine_maps(&zeros, &all_one).unwrap();
        assert!(combined.raw.iter().all(|&v| v == 0.5));
        assert!(combined.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_rejects_mismatched_shapes() {
        let a = DependencyMap::from_raw(MethodKind::Gradients, 4, 4, vec![0.0; 16], None);
        let b = DependencyMap::from_raw(MethodKind::Gradients, 4, 5, vec![0.0; 20], None);
        assert!(combine_maps(&a, &b).is_err());
    }

    #[test]
    fn fill_strategies_are_deterministic_and_bounded() {
        let img = random_image(10, 8);
        let region: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        for kind in [
            FillKind::Zeros,
            FillKind::Ones,
            FillKind::Mean,
            FillKind::UniformRandom,
            FillKind::GaussianRandom,
            FillKind::Blur,
            FillKind::AdditiveNoise,
        ] {
            let fill = FillStrategy::with_seed(kind, 42);
            let a = apply_fill(&img, &region, &fill).unwrap();
            let b = apply_fill(&img, &region, &fill).unwrap();
            assert_eq!(a.data(), b.data(), "{kind:?} not deterministic");
            assert!(
                a.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{kind:?} left pixel range"
            );
            // Untouched pixels are preserved.
            for (i, &m) in region.iter().enumerate() {
                if !m {
                    for c in 0..3 {
                        assert_eq!(a.data()[c * 64 + i], img.data()[c * 64 + i]);
                    }
                }
            }
        }
    }

    #[test]
    fn maps_record_time_and_eval_counts() {
        let est = random_estimator(11, 16, 3);
        let img = random_image(11, 16);
        let map = cropping_map(&est, &img, 3, 3, 1).unwrap();
        assert_eq!(map.evals, 9);
        assert!(map.wall_time > 0.0);

        let segmap = felzenszwalb_segment(
            &img,
            &FelzParams {
                k: 0.4,
                sigma: 0.5,
                min_size: 4,
                connectivity: 8,
            },
        )
        .unwrap();
        let m = masking_map(&est, &img, &segmap, &FillStrategy::new(FillKind::Mean)).unwrap();
        assert_eq!(m.evals, segmap.n_segments);
        assert!(m.wall_time > 0.0);
    }
}
