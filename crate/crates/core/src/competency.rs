//! The probabilistic competency score and its image-space gradient.
//!
//! The score multiplies two heads evaluated on one forward pass of the
//! perception model: a calibrated multinomial head over the feature vector,
//! read at the model's predicted class (class-correctness probability
//! assuming in-distribution input), and a binary head over the per-class
//! Mahalanobis distances (in-distribution probability). Both factors are
//! strictly inside (0, 1), so the score is too.
//!
//! The gradient treats the predicted class and the per-class argmin
//! component as fixed selections and differentiates the rest exactly.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gmm::{fit_class_gaussians, ClassGaussianMixture};
use crate::logistic::{fit_ood_head, fit_transfer_head, LogisticHead};
use crate::nn::{backward_from_layer, selection_signature};
use crate::perception::{argmax, LabeledDataset, PerceptionModel};
use crate::rng::{normal, stream};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompetencyConfig {
    pub components_per_class: usize,
    /// Competency threshold below which the model is deemed incompetent.
    pub tau: f64,
    /// Scale of the feature-space Gaussian perturbation used to synthesize
    /// out-of-distribution examples, in units of per-dimension std.
    pub negative_sigma_scale: f64,
    /// Tile edge for patch-shuffled negative images.
    pub shuffle_tile: usize,
}

impl Default for CompetencyConfig {
    fn default() -> Self {
        CompetencyConfig {
            components_per_class: 1,
            tau: 0.5,
            negative_sigma_scale: 3.0,
            shuffle_tile: 16,
        }
    }
}

/// Perception model plus the fitted competency heads.
#[derive(Debug, Clone)]
pub struct CompetencyEstimator<R: Real> {
    pub model: Arc<PerceptionModel<R>>,
    pub gmm: ClassGaussianMixture<R>,
    pub transfer: LogisticHead<R>,
    pub ood: LogisticHead<R>,
    pub tau: f64,
}

/// Score plus the intermediate quantities the regional methods reuse.
#[derive(Debug, Clone)]
pub struct ScoreDetail {
    pub score: f64,
    pub predicted_class: usize,
    /// Transfer-head probability of the predicted class.
    pub p_class: f64,
    /// In-distribution probability from the distance head.
    pub p_in_dist: f64,
    pub distances: Vec<f64>,
    pub argmin_components: Vec<usize>,
    /// Discrete-selection hash: network rectifier/pool pattern, predicted
    /// class, and per-class argmin component. Finite-difference checks skip
    /// probe points whose hash differs from the base point.
    pub selections: u64,
}

/// Fit diagnostics alongside the estimator.
#[derive(Debug, Clone)]
pub struct EstimatorFit<R: Real> {
    pub estimator: CompetencyEstimator<R>,
    pub gmm_loglik_traces: Vec<Vec<f64>>,
    pub transfer_objective_trace: Vec<f64>,
    pub ood_objective_trace: Vec<f64>,
}

impl<R: Real> CompetencyEstimator<R> {
    /// The competency score `p(class | in-dist) * p(in-dist)` in (0, 1).
    pub fn score(&self, image: &Tensor<R>) -> Result<f64> {
        Ok(self.score_detail(image)?.score)
    }

    pub fn score_detail(&self, image: &Tensor<R>) -> Result<ScoreDetail> {
        let trace = self.model.forward_trace(image)?;
        let features = self.model.features_from_trace(&trace);
        let logits = self.model.logits_from_trace(&trace);
        let predicted = argmax(logits);
        let p_class = self.transfer.multinomial_probs(features)?[predicted];
        let (distances, argmins) = self.gmm.mahalanobis_with_argmin(features)?;
        let p_in_dist = self.ood.binary_prob(&distances)?;

        let mut selections = selection_signature(&self.model.spec, &trace);
        let mut fold = |v: u64| {
            selections ^= v.wrapping_add(0x9e3779b97f4a7c15);
            selections = selections.wrapping_mul(0x100000001b3);
        };
        fold(predicted as u64);
        for &a in &argmins {
            fold(a as u64);
        }

        Ok(ScoreDetail {
            score: p_class * p_in_dist,
            predicted_class: predicted,
            p_class,
            p_in_dist,
            distances,
            argmin_components: argmins,
            selections,
        })
    }

    /// Exact reverse-mode gradient of the score with respect to the image.
    ///
    /// The predicted class is held fixed (no gradient through the argmax)
    /// and each class distance follows its achieving component's branch.
    pub fn gradient(&self, image: &Tensor<R>) -> Result<Tensor<R>> {
        let trace = self.model.forward_trace(image)?;
        let features = self.model.features_from_trace(&trace);
        let logits = self.model.logits_from_trace(&trace);
        let predicted = argmax(logits);

        let p_class_grad = self
            .transfer
            .multinomial_prob_gradient(features, predicted)?;
        let p_class = self.transfer.multinomial_probs(features)?[predicted];
        let (distances, dist_grads) = self.gmm.distance_gradients(features)?;
        let p_in_dist = self.ood.binary_prob(&distances)?;
        let p_in_dist_grad = self.ood.binary_prob_gradient(&distances)?;

        // d score / d feature = p_D * d p_c/d f + p_c * sum_k d p_D/d d_k * d d_k/d f
        let dim = features.len();
        let mut cot = vec![0.0f64; dim];
        for j in 0..dim {
            let mut acc = p_in_dist * p_class_grad[j];
            let mut dist_term = 0.0;
            for (k, dg) in dist_grads.iter().enumerate() {
                dist_term += p_in_dist_grad[k] * dg[j];
            }
            acc += p_class * dist_term;
            cot[j] = acc;
        }
        let cot = Tensor::from_vec(&[dim], cot.iter().map(|&v| R::of(v)).collect())?;
        let tap = self
            .model
            .spec
            .features_tap
            .ok_or_else(|| Error::invalid("model has no feature tap"))?;
        backward_from_layer(&self.model.spec, &self.model.params, &trace, tap, &cot)
    }
}

/// Tile-permuted copy of an image; destroys structure, keeps the palette.
pub fn patch_shuffle<R: Real>(
    image: &Tensor<R>,
    tile: usize,
    rng: &mut crate::rng::Stream,
) -> Tensor<R> {
    let &[c, h, w] = image.shape() else {
        return image.clone();
    };
    let tile = tile.max(1);
    let (ty, tx) = (h / tile, w / tile);
    if ty * tx <= 1 {
        return image.clone();
    }
    let mut perm: Vec<usize> = (0..ty * tx).collect();
    perm.shuffle(rng);
    let mut out = image.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / tx * tile, dst % tx * tile);
        let (sy, sx) = (src / tx * tile, src % tx * tile);
        for cc in 0..c {
            for y in 0..tile {
                for x in 0..tile {
                    let from = (cc * h + sy + y) * w + (sx + x);
                    let to = (cc * h + dy + y) * w + (dx + x);
                    out.data_mut()[to] = image.data()[from];
                }
            }
        }
    }
    out
}

/// Fit the competency heads on top of a trained perception model.
///
/// The Gaussian mixtures model the gradient-update portion of the training
/// split; both logistic heads are fit on the held-out calibration portion.
/// Out-of-distribution examples are synthesized: feature-space Gaussian
/// perturbations and features of patch-shuffled calibration images, half
/// each, matching the positive count.
pub fn fit_estimator<R: Real>(
    model: Arc<PerceptionModel<R>>,
    data: &LabeledDataset<R>,
    train_indices: &[usize],
    calibration_indices: &[usize],
    config: &CompetencyConfig,
    seed: u64,
) -> Result<EstimatorFit<R>> {
    if train_indices.is_empty() {
        return Err(Error::invalid("no training indices for the mixtures"));
    }
    if calibration_indices.is_empty() {
        return Err(Error::invalid("no calibration indices for the heads"));
    }

    let features_of = |idx: &[usize]| -> Result<Vec<Vec<R>>> {
        idx.iter()
            .map(|&i| model.extract_features(&data.images[i]))
            .collect()
    };
    let train_features = features_of(train_indices)?;
    let train_labels: Vec<usize> = train_indices.iter().map(|&i| data.labels[i]).collect();
    let cal_features = features_of(calibration_indices)?;
    let cal_labels: Vec<usize> = calibration_indices.iter().map(|&i| data.labels[i]).collect();

    let gmm_fit = fit_class_gaussians(
        &train_features,
        &train_labels,
        data.n_classes,
        config.components_per_class,
        seed,
    )?;
    let transfer_fit = fit_transfer_head(&cal_features, &cal_labels, data.n_classes)?;

    // Per-dimension std of the calibration features, for negative synthesis.
    let dim = model.feature_dim;
    let n_cal = cal_features.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for f in &cal_features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v.f64();
        }
    }
    for m in &mut mean {
        *m /= n_cal;
    }
    let mut std = vec![0.0f64; dim];
    for f in &cal_features {
        for ((s, v), m) in std.iter_mut().zip(f).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n_cal).sqrt().max(1e-6);
    }

    let mut perturb_rng = stream(seed, "ood-neg-perturb", 0);
    let mut shuffle_rng = stream(seed, "ood-neg-shuffle", 0);
    let mut neg_features: Vec<Vec<R>> = Vec::with_capacity(cal_features.len());
    for (pos, &idx) in calibration_indices.iter().enumerate() {
        if pos % 2 == 0 {
            let base = &cal_features[pos];
            neg_features.push(
                base.iter()
                    .zip(&std)
                    .map(|(v, s)| {
                        R::of(v.f64() + config.negative_sigma_scale * s * normal(&mut perturb_rng))
                    })
                    .collect(),
            );
        } else {
            let shuffled = patch_shuffle(&data.images[idx], config.shuffle_tile, &mut shuffle_rng);
            neg_features.push(model.extract_features(&shuffled)?);
        }
    }

    let mut dist_inputs = Vec::with_capacity(cal_features.len() + neg_features.len());
    let mut dist_labels = Vec::with_capacity(dist_inputs.capacity());
    for f in &cal_features {
        dist_inputs.push(gmm_fit.mixture.mahalanobis_distances(f)?);
        dist_labels.push(true);
    }
    for f in &neg_features {
        dist_inputs.push(gmm_fit.mixture.mahalanobis_distances(f)?);
        dist_labels.push(false);
    }
    let ood_fit = fit_ood_head(&dist_inputs, &dist_labels)?;

    Ok(EstimatorFit {
        estimator: CompetencyEstimator {
            model,
            gmm: gmm_fit.mixture,
            transfer: transfer_fit.head,
            ood: ood_fit.head,
            tau: config.tau,
        },
        gmm_loglik_traces: gmm_fit.loglik_traces,
        transfer_objective_trace: transfer_fit.objective_trace,
        ood_objective_trace: ood_fit.objective_trace,
    })
}
