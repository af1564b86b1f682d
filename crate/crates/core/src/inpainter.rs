//! Decoder that reconstructs an image from the perception model's feature
//! vector of a masked copy.
//!
//! Training: per image per epoch, one randomly chosen segment is masked with
//! ones, the masked image is encoded with the frozen perception model, and
//! the decoder minimizes mean squared error against the original image over
//! all pixels. High reconstruction error over a segment then marks image
//! content the encoder never learned to represent.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{backward_to_params, forward, sgd_step, Layer, NetworkSpec, ParamSet};
use crate::perception::{LabeledDataset, PerceptionModel, Split};
use crate::rng::stream;
use crate::scalar::Real;
use crate::segmentation::{felzenszwalb_segment, FelzParams, SegmentMap};
use crate::tensor::Tensor;

/// Decoder network plus a fingerprint of the encoder it was trained against.
#[derive(Debug, Clone)]
pub struct InpainterDecoder<R: Real> {
    pub spec: NetworkSpec,
    pub params: ParamSet<R>,
    /// Fingerprint of the perception-model parameters at training time.
    pub encoder_fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpainterConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl Default for InpainterConfig {
    fn default() -> Self {
        InpainterConfig {
            lr: 5e-2,
            momentum: 0.9,
            epochs: 20,
        }
    }
}

/// Decoder architecture: dense from the feature vector to a
/// `32 x H/4 x W/4` block, two upsample+conv+rectifier stages, a final
/// conv to the image channel count, and a logistic squash into (0, 1).
pub fn decoder_spec(feature_dim: usize, image_shape: &[usize]) -> Result<NetworkSpec> {
    let &[c, h, w] = image_shape else {
        return Err(Error::shape(format!("image must be [C,H,W], got {image_shape:?}")));
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!("image {h}x{w} must be divisible by 4")));
    }
    let (h4, w4) = (h / 4, w / 4);
    let spec = NetworkSpec::new(
        vec![feature_dim],
        vec![
            Layer::Dense {
                in_dim: feature_dim,
                out_dim: 32 * h4 * w4,
            },
            Layer::Relu,
            Layer::Reshape(vec![32, h4, w4]),
            Layer::Upsample2,
            Layer::Conv2d {
                in_ch: 32,
                out_ch: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Relu,
            Layer::Upsample2,
            Layer::Conv2d {
                in_ch: 16,
                out_ch: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Relu,
            Layer::Conv2d {
                in_ch: 8,
                out_ch: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Sigmoid,
        ],
    );
    spec.layer_shapes()?;
    Ok(spec)
}

/// Replace the pixels of `mask` (true entries) with ones, all channels.
pub fn mask_with_ones<R: Real>(image: &Tensor<R>, mask: &[bool]) -> Tensor<R> {
    let &[c, h, w] = image.shape() else {
        return image.clone();
    };
    let mut out = image.clone();
    for cc in 0..c {
        for (i, &m) in mask.iter().enumerate().take(h * w) {
            if m {
                out.data_mut()[cc * h * w + i] = R::one();
            }
        }
    }
    out
}

/// Decode the original image from the features of (usually masked) `image`.
pub fn reconstruct<R: Real>(
    decoder: &InpainterDecoder<R>,
    model: &PerceptionModel<R>,
    image: &Tensor<R>,
) -> Result<Tensor<R>> {
    if model.fingerprint() != decoder.encoder_fingerprint {
        return Err(Error::ModelMismatch(
            "decoder was trained against a different perception model".into(),
        ));
    }
    let features = model.extract_features(image)?;
    let input = Tensor::from_vec(&[features.len()], features)?;
    let trace = forward(&decoder.spec, &decoder.params, &input)?;
    Ok(trace.output().clone())
}

/// Train the decoder against a frozen perception model.
///
/// Returns the decoder and the per-epoch mean training loss trace.
pub fn train_inpainter<R: Real>(
    model: &PerceptionModel<R>,
    data: &LabeledDataset<R>,
    segparams: &FelzParams,
    config: &InpainterConfig,
    seed: u64,
) -> Result<(InpainterDecoder<R>, Vec<f64>)> {
    data.validate()?;
    let train_idx = data.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let image_shape = data.image_shape().to_vec();
    let &[c, h, w] = image_shape.as_slice() else {
        return Err(Error::shape("images must be [C,H,W]".to_string()));
    };
    let n_pixels = c * h * w;
    let spec = decoder_spec(model.feature_dim, &image_shape)?;
    let mut init_rng = stream(seed, "inpainter-init", 0);
    let mut params = ParamSet::<R>::init(&spec, &mut init_rng);
    let mut velocity = ParamSet::zeros_like(&spec);
    let encoder_fingerprint = model.fingerprint();

    // Segment maps are a pure function of the image; compute once.
    let segmaps: Vec<SegmentMap> = train_idx
        .iter()
        .map(|&i| felzenszwalb_segment(&data.images[i], segparams))
        .collect::<Result<_>>()?;

    let mut mask_rng = stream(seed, "inpainter-mask", 0);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0f64;
        for (pos, &i) in train_idx.iter().enumerate() {
            let original = &data.images[i];
            let segmap = &segmaps[pos];
            let segment = mask_rng.gen_range(0..segmap.n_segments);
            let mask = segmap.segment_mask(segment)?;
            let masked = mask_with_ones(original, &mask);

            let features = model.extract_features(&masked)?;
            let input = Tensor::from_vec(&[features.len()], features)?;
            let trace = forward(&spec, &params, &input)?;
            let output = trace.output();

            // MSE over all pixels against the original image.
            let mut loss = 0.0f64;
            let mut cot = Tensor::zeros(&image_shape);
            for (k, (o, t)) in output.data().iter().zip(original.data()).enumerate() {
                let diff = o.f64() - t.f64();
                loss += diff * diff;
                cot.data_mut()[k] = R::of(2.0 * diff / n_pixels as f64);
            }
            loss /= n_pixels as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "inpainter loss at epoch {epoch}, image {i}"
                )));
            }
            epoch_loss += loss;

            let grads = backward_to_params(&spec, &params, &trace, &cot)?;
            sgd_step(&mut params, &grads, config.lr, config.momentum, &mut velocity)?;
        }
        loss_trace.push(epoch_loss / train_idx.len() as f64);
    }

    if model.fingerprint() != encoder_fingerprint {
        return Err(Error::ModelMismatch(
            "perception model changed during inpainter training".into(),
        ));
    }
    Ok((
        InpainterDecoder {
            spec,
            params,
            encoder_fingerprint,
        },
        loss_trace,
    ))
}

/// Convenience wrapper tying a decoder to its encoder.
#[derive(Debug, Clone)]
pub struct Inpainter<R: Real> {
    pub model: Arc<PerceptionModel<R>>,
    pub decoder: InpainterDecoder<R>,
}

impl<R: Real> Inpainter<R> {
    pub fn reconstruct(&self, image: &Tensor<R>) -> Result<Tensor<R>> {
        reconstruct(&self.decoder, &self.model, image)
    }
}
