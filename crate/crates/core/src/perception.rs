//! The image classifier whose competency is being explained.
//!
//! Fixed architecture: conv(C->16, 3x3, pad 1), rectifier, pool, conv(16->32,
//! 3x3, pad 1), rectifier, pool, flatten, dense->64 (feature tap), rectifier,
//! dense->K (logit tap), softmax. Trained with minibatch momentum SGD on
//! cross-entropy; a stratified 20% holdout of the training split is reserved
//! for calibrating the competency heads and never sees a gradient update.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{forward, sgd_step, ForwardTrace, Layer, NetworkSpec, ParamSet};
use crate::rng::stream;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "calibration" => Some(Split::Calibration),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images with class labels, split tags, and optional per-pixel
/// unfamiliarity masks (`true` = unfamiliar feature at that pixel).
#[derive(Debug, Clone)]
pub struct LabeledDataset<R: Real> {
    pub images: Vec<Tensor<R>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub masks: Vec<Option<Vec<bool>>>,
    pub n_classes: usize,
}

impl<R: Real> LabeledDataset<R> {
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.labels.len() != n || self.splits.len() != n || self.masks.len() != n {
            return Err(Error::invalid("dataset columns have unequal lengths"));
        }
        let Some(shape) = self.images.first().map(|t| t.shape().to_vec()) else {
            return Err(Error::invalid("dataset is empty"));
        };
        let &[_, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!("images must be [C,H,W], got {shape:?}")));
        };
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if self.labels[i] >= self.n_classes {
                return Err(Error::invalid(format!(
                    "image {i} label {} >= n_classes {}",
                    self.labels[i], self.n_classes
                )));
            }
            if let Some(mask) = &self.masks[i] {
                if mask.len() != h * w {
                    return Err(Error::shape(format!(
                        "image {i} mask has {} pixels, expected {}",
                        mask.len(),
                        h * w
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

/// Classifier spec plus parameters.
#[derive(Debug, Clone)]
pub struct PerceptionModel<R: Real> {
    pub spec: NetworkSpec,
    pub params: ParamSet<R>,
    pub n_classes: usize,
    pub feature_dim: usize,
}

/// The fixed perception architecture for a `[C, H, W]` input and K classes.
/// H and W must be divisible by 4 (two pooling stages).
pub fn perception_spec(input_shape: &[usize], n_classes: usize) -> Result<NetworkSpec> {
    let &[c, h, w] = input_shape else {
        return Err(Error::shape(format!("input must be [C,H,W], got {input_shape:?}")));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} must be divisible by 4"
        )));
    }
    let flat = 32 * (h / 4) * (w / 4);
    let mut spec = NetworkSpec::new(
        vec![c, h, w],
        vec![
            Layer::Conv2d {
                in_ch: c,
                out_ch: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv2d {
                in_ch: 16,
                out_ch: 32,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                in_dim: flat,
                out_dim: FEATURE_DIM,
            },
            Layer::Relu,
            Layer::Dense {
                in_dim: FEATURE_DIM,
                out_dim: n_classes,
            },
            Layer::Softmax,
        ],
    );
    spec.features_tap = Some(7);
    spec.logits_tap = Some(9);
    spec.layer_shapes()?;
    Ok(spec)
}

impl<R: Real> PerceptionModel<R> {
    pub fn forward_trace(&self, image: &Tensor<R>) -> Result<ForwardTrace<R>> {
        forward(&self.spec, &self.params, image)
    }

    /// Predicted class (ties toward the lower id) and the softmax vector.
    pub fn predict(&self, image: &Tensor<R>) -> Result<(usize, Vec<R>)> {
        let trace = self.forward_trace(image)?;
        let probs = trace.output().data().to_vec();
        Ok((argmax(&probs), probs))
    }

    /// The 64-dimensional feature-tap activation.
    pub fn extract_features(&self, image: &Tensor<R>) -> Result<Vec<R>> {
        let trace = self.forward_trace(image)?;
        Ok(self.features_from_trace(&trace).to_vec())
    }

    pub fn features_from_trace<'t>(&self, trace: &'t ForwardTrace<R>) -> &'t [R] {
        let tap = self.spec.features_tap.expect("perception spec has a feature tap");
        trace.outputs[tap].data()
    }

    pub fn logits_from_trace<'t>(&self, trace: &'t ForwardTrace<R>) -> &'t [R] {
        let tap = self.spec.logits_tap.expect("perception spec has a logit tap");
        trace.outputs[tap].data()
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }
}

/// Strict argmax with ties broken toward the lower index.
pub fn argmax<R: Real>(vals: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the training split held out for head calibration.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            holdout_fraction: 0.2,
        }
    }
}

/// A trained classifier plus the index split used to produce it.
#[derive(Debug, Clone)]
pub struct TrainedClassifier<R: Real> {
    pub model: PerceptionModel<R>,
    /// Accuracy on the gradient-update portion of the training split.
    pub train_accuracy: f64,
    /// Accuracy on the stratified holdout ("calibration") portion.
    pub holdout_accuracy: f64,
    /// Dataset indices used for gradient updates.
    pub train_indices: Vec<usize>,
    /// Dataset indices of the stratified holdout.
    pub holdout_indices: Vec<usize>,
}

/// Stratified holdout: per class, shuffle that class's training indices and
/// reserve the first `fraction`.
pub fn stratified_holdout<R: Real>(
    data: &LabeledDataset<R>,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for c in 0..data.n_classes {
        let mut idx: Vec<usize> = data
            .indices_of(Split::Train)
            .into_iter()
            .filter(|&i| data.labels[i] == c)
            .collect();
        let mut rng = stream(seed, "holdout", c as u64);
        idx.shuffle(&mut rng);
        let n_hold = ((idx.len() as f64) * fraction).floor() as usize;
        holdout.extend_from_slice(&idx[..n_hold]);
        train.extend_from_slice(&idx[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

/// Train the classifier with minibatch momentum SGD on cross-entropy.
/// Deterministic given `seed`.
pub fn train_classifier<R: Real>(
    data: &LabeledDataset<R>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedClassifier<R>> {
    data.validate()?;
    if data.n_classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if data.indices_of(Split::Train).is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let spec = perception_spec(data.image_shape(), data.n_classes)?;
    let mut rng = stream(seed, "classifier-init", 0);
    let mut params = ParamSet::<R>::init(&spec, &mut rng);
    let mut velocity = ParamSet::zeros_like(&spec);
    let (train_idx, holdout_idx) = stratified_holdout(data, config.holdout_fraction, seed);
    let logits_tap = spec.logits_tap.unwrap();

    let mut order = train_idx.clone();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = stream(seed, "classifier-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = ParamSet::zeros_like(&spec);
            let inv = R::of(1.0 / batch.len() as f64);
            for &i in batch {
                let trace = forward(&spec, &params, &data.images[i])?;
                let probs = trace.output().data();
                let p_true = probs[data.labels[i]].f64();
                if !(p_true > 0.0) || !p_true.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, image {i}: p(true class) = {p_true}"
                    )));
                }
                // Fused softmax + cross-entropy: cotangent at the logits.
                let cot_data: Vec<R> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, p)| {
                        let delta = (c == data.labels[i]) as usize as f64;
                        R::of(p.f64() - delta)
                    })
                    .collect();
                let cot = Tensor::from_vec(&[data.n_classes], cot_data)?;
                let sample = crate::nn::backward_params_from_layer(
                    &spec, &params, &trace, logits_tap, &cot,
                )?;
                grads.add_scaled(&sample, inv)?;
            }
            sgd_step(&mut params, &grads, config.lr, config.momentum, &mut velocity)?;
        }
    }

    let model = PerceptionModel {
        spec,
        params,
        n_classes: data.n_classes,
        feature_dim: FEATURE_DIM,
    };
    let accuracy = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0usize;
        for &i in idx {
            let (c, _) = model.predict(&data.images[i])?;
            hits += (c == data.labels[i]) as usize;
        }
        Ok(hits as f64 / idx.len() as f64)
    };
    Ok(TrainedClassifier {
        train_accuracy: accuracy(&train_idx)?,
        holdout_accuracy: accuracy(&holdout_idx)?,
        model,
        train_indices: train_idx,
        holdout_indices: holdout_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Solid-color two-class set: class 0 red-ish, class 1 blue-ish.
    pub fn solid_two_class(n_per_class: usize, size: usize, seed: u64) -> LabeledDataset<f32> {
        let mut rng = stream(seed, "solid-data", 0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let c = i % 2;
            let jitter: f32 = rng.gen_range(-0.05..0.05);
            let (r, g, b) = if c == 0 {
                (0.8 + jitter, 0.1, 0.1)
            } else {
                (0.1, 0.1, 0.8 + jitter)
            };
            let mut img = Tensor::zeros(&[3, size, size]);
            for y in 0..size {
                for x in 0..size {
                    img.data_mut()[(0 * size + y) * size + x] = r;
                    img.data_mut()[(1 * size + y) * size + x] = g;
                    img.data_mut()[(2 * size + y) * size + x] = b;
                }
            }
            images.push(img);
            labels.push(c);
        }
        let n = images.len();
        LabeledDataset {
            images,
            labels,
            splits: vec![Split::Train; n],
            masks: vec![None; n],
            n_classes: 2,
        }
    }

    #[test]
    fn separable_classes_reach_full_train_accuracy() {
        let data = solid_two_class(16, 32, 0);
        let config = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let trained = train_classifier(&data, &config, 0).unwrap();
        assert_eq!(trained.train_accuracy, 1.0);
        // A red image classifies as class 0.
        let (c, _) = trained.model.predict(&data.images[0]).unwrap();
        assert_eq!(c, 0);
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        // Noise images with balanced labels: an untrained model's
        // predictions are independent of the labels.
        let mut rng = stream(1, "noise-data", 0);
        let n = 60;
        let images: Vec<Tensor<f32>> = (0..n)
            .map(|_| {
                Tensor::from_vec(
                    &[3, 16, 16],
                    (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let data = LabeledDataset {
            labels: (0..n).map(|i| i % 2).collect(),
            splits: vec![Split::Train; n],
            masks: vec![None; n],
            images,
            n_classes: 2,
        };
        let config = TrainConfig {
            epochs: 0,
            holdout_fraction: 0.0,
            ..TrainConfig::default()
        };
        let trained = train_classifier(&data, &config, 1).unwrap();
        assert!(
            (0.3..=0.7).contains(&trained.train_accuracy),
            "untrained accuracy {} not near chance",
            trained.train_accuracy
        );
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = solid_two_class(8, 16, 2);
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_classifier(&data, &config, 7).unwrap();
        let b = train_classifier(&data, &config, 7).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let data = solid_two_class(4, 16, 3);
        let trained = train_classifier(
            &data,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            0,
        )
        .unwrap();
        let (_, probs) = trained.model.predict(&data.images[0]).unwrap();
        let sum: f64 = probs.iter().map(|p| p.f64()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_id() {
        assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1f32, 0.5, 0.5]), 1);
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        // Shifting all logits leaves the softmax argmax unchanged.
        let logits = [1.0f64, 3.0, 2.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn features_are_pure_and_fixed_width() {
        let data = solid_two_class(4, 16, 4);
        let trained = train_classifier(
            &data,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            0,
        )
        .unwrap();
        let f1 = trained.model.extract_features(&data.images[0]).unwrap();
        let f2 = trained.model.extract_features(&data.images[0]).unwrap();
        assert_eq!(f1.len(), FEATURE_DIM);
        assert_eq!(f1, f2);
    }

    #[test]
    fn trained_features_separate_classes() {
        let data = solid_two_class(10, 16, 5);
        let trained = train_classifier(
            &data,
            &TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            0,
        )
        .unwrap();
        let feats: Vec<Vec<f64>> = data
            .images
            .iter()
            .map(|img| {
                trained
                    .model
                    .extract_features(img)
                    .unwrap()
                    .iter()
                    .map(|v| v.f64())
                    .collect()
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut within = (0.0, 0usize);
        let mut between = (0.0, 0usize);
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let d = dist(&feats[i], &feats[j]);
                if data.labels[i] == data.labels[j] {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    between = (between.0 + d, between.1 + 1);
                }
            }
        }
        let within = within.0 / within.1 as f64;
        let between = between.0 / between.1 as f64;
        assert!(
            within < between,
            "within-class distance {within} not below between-class {between}"
        );
    }

    #[test]
    fn stratified_holdout_is_disjoint_and_sized() {
        let data = solid_two_class(20, 16, 6);
        let (train, holdout) = stratified_holdout(&data, 0.2, 0);
        assert_eq!(train.len() + holdout.len(), 40);
        assert_eq!(holdout.len(), 8);
        for i in &holdout {
            assert!(!train.contains(i));
        }
        // Stratified: 4 holdout images per class.
        for c in 0..2 {
            let n = holdout.iter().filter(|&&i| data.labels[i] == c).count();
            assert_eq!(n, 4);
        }
    }
}
