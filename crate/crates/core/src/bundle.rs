//! Versioned binary containers for trained artifacts.
//!
//! Little-endian throughout; floats are stored as raw IEEE bits so a save /
//! load / save cycle is byte-identical. Three kinds share one header:
//! classifier (network spec + parameters), estimator (mixtures, heads,
//! threshold, and the fingerprint of the perception model they belong to),
//! and decoder (spec + parameters + encoder fingerprint).
//!
//! Containers hold the pipeline scalar (`f32` storage); the cached f64
//! solve data of the mixtures is serialized as-is to keep scoring
//! bit-identical after a reload.

use std::path::Path;
use std::sync::Arc;

use crate::competency::CompetencyEstimator;
use crate::error::{Error, Result};
use crate::gmm::{ClassGaussianMixture, Component};
use crate::inpainter::InpainterDecoder;
use crate::logistic::{HeadMode, LogisticHead};
use crate::nn::{Layer, NetworkSpec, ParamSet};
use crate::perception::PerceptionModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CMPB";
const VERSION: u16 = 1;

const KIND_CLASSIFIER: u8 = 1;
const KIND_ESTIMATOR: u8 = 2;
const KIND_DECODER: u8 = 3;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f32(v);
        }
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }

    fn layer(&mut self, layer: &Layer) {
        match layer {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                self.u8(0);
                for v in [in_ch, out_ch, kernel, stride, pad] {
                    self.u32(*v as u32);
                }
            }
            Layer::Relu => self.u8(1),
            Layer::MaxPool2 => self.u8(2),
            Layer::Flatten => self.u8(3),
            Layer::Dense { in_dim, out_dim } => {
                self.u8(4);
                self.u32(*in_dim as u32);
                self.u32(*out_dim as u32);
            }
            Layer::Softmax => self.u8(5),
            Layer::Sigmoid => self.u8(6),
            Layer::Upsample2 => self.u8(7),
            Layer::Reshape(shape) => {
                self.u8(8);
                self.u8(shape.len() as u8);
                for &d in shape {
                    self.u32(d as u32);
                }
            }
        }
    }

    fn spec(&mut self, spec: &NetworkSpec) {
        self.u8(spec.input_shape.len() as u8);
        for &d in &spec.input_shape {
            self.u32(d as u32);
        }
        self.u32(spec.layers.len() as u32);
        for layer in &spec.layers {
            self.layer(layer);
        }
        let tap = |t: Option<usize>| t.map(|v| v as u32 + 1).unwrap_or(0);
        self.u32(tap(spec.features_tap));
        self.u32(tap(spec.logits_tap));
    }

    fn params(&mut self, params: &ParamSet<f32>) {
        self.u32(params.layers.len() as u32);
        for layer in &params.layers {
            self.u8(layer.len() as u8);
            for t in layer {
                self.tensor(t);
            }
        }
    }

    fn metadata(&mut self, meta: &[(String, String)]) {
        self.u32(meta.len() as u32);
        for (k, v) in meta {
            self.str(k);
            self.str(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], expect_kind: u8) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Bundle("bad magic; not a model bundle".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Bundle(format!("unsupported bundle version {version}")));
        }
        let kind = r.u8()?;
        if kind != expect_kind {
            return Err(Error::Bundle(format!(
                "bundle kind {kind} does not match expected {expect_kind}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Bundle("truncated bundle".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(u32::from_le_bytes(
            self.take(4)?.try_into().unwrap(),
        )))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        Ok(String::from_utf8_lossy(self.take(n)?).into_owned())
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f32()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.f32()).collect::<Result<_>>()?;
        Tensor::from_vec(&shape, data)
    }

    fn layer(&mut self) -> Result<Layer> {
        Ok(match self.u8()? {
            0 => Layer::Conv2d {
                in_ch: self.u32()? as usize,
                out_ch: self.u32()? as usize,
                kernel: self.u32()? as usize,
                stride: self.u32()? as usize,
                pad: self.u32()? as usize,
            },
            1 => Layer::Relu,
            2 => Layer::MaxPool2,
            3 => Layer::Flatten,
            4 => Layer::Dense {
                in_dim: self.u32()? as usize,
                out_dim: self.u32()? as usize,
            },
            5 => Layer::Softmax,
            6 => Layer::Sigmoid,
            7 => Layer::Upsample2,
            8 => {
                let ndim = self.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(self.u32()? as usize);
                }
                Layer::Reshape(shape)
            }
            tag => return Err(Error::Bundle(format!("unknown layer tag {tag}"))),
        })
    }

    fn spec(&mut self) -> Result<NetworkSpec> {
        let ndim = self.u8()? as usize;
        let mut input_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input_shape.push(self.u32()? as usize);
        }
        let n_layers = self.u32()? as usize;
        let layers: Vec<Layer> = (0..n_layers).map(|_| self.layer()).collect::<Result<_>>()?;
        let tap = |v: u32| (v > 0).then(|| v as usize - 1);
        let features_tap = tap(self.u32()?);
        let logits_tap = tap(self.u32()?);
        Ok(NetworkSpec {
            input_shape,
            layers,
            features_tap,
            logits_tap,
        })
    }

    fn params(&mut self) -> Result<ParamSet<f32>> {
        let n = self.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.u8()? as usize;
            layers.push((0..k).map(|_| self.tensor()).collect::<Result<_>>()?);
        }
        Ok(ParamSet { layers })
    }

    fn metadata(&mut self) -> Result<Vec<(String, String)>> {
        let n = self.u32()? as usize;
        (0..n)
            .map(|_| Ok((self.str()?, self.str()?)))
            .collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Bundle(format!(
                "{} trailing bytes in bundle",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn classifier_to_bytes(model: &PerceptionModel<f32>, meta: &[(String, String)]) -> Vec<u8> {
    let mut w = Writer::new(KIND_CLASSIFIER);
    w.spec(&model.spec);
    w.params(&model.params);
    w.u32(model.n_classes as u32);
    w.u32(model.feature_dim as u32);
    w.metadata(meta);
    w.buf
}

pub fn classifier_from_bytes(bytes: &[u8]) -> Result<(PerceptionModel<f32>, Vec<(String, String)>)> {
    let mut r = Reader::new(bytes, KIND_CLASSIFIER)?;
    let spec = r.spec()?;
    let params = r.params()?;
    let n_classes = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let meta = r.metadata()?;
    r.done()?;
    spec.layer_shapes()?;
    if !params.matches(&spec) {
        return Err(Error::Bundle("parameters do not match the stored spec".into()));
    }
    Ok((
        PerceptionModel {
            spec,
            params,
            n_classes,
            feature_dim,
        },
        meta,
    ))
}

pub fn save_classifier(
    model: &PerceptionModel<f32>,
    meta: &[(String, String)],
    path: &Path,
) -> Result<()> {
    crate::dataset::write_atomic(path, &classifier_to_bytes(model, meta))
}

pub fn load_classifier(path: &Path) -> Result<(PerceptionModel<f32>, Vec<(String, String)>)> {
    classifier_from_bytes(&std::fs::read(path)?)
}

pub fn estimator_to_bytes(est: &CompetencyEstimator<f32>, meta: &[(String, String)]) -> Vec<u8> {
    let mut w = Writer::new(KIND_ESTIMATOR);
    w.u64(est.model.fingerprint());
    w.f64(est.tau);
    w.u32(est.gmm.dim as u32);
    w.u32(est.gmm.classes.len() as u32);
    for comps in &est.gmm.classes {
        w.u32(comps.len() as u32);
        for c in comps {
            w.f32(c.weight);
            w.f32s(&c.mean);
            w.f32s(&c.cov);
            w.f64s(&c.cov_inv);
            w.f64(c.log_det);
        }
    }
    for head in [&est.transfer, &est.ood] {
        w.u8(match head.mode {
            HeadMode::Multinomial => 0,
            HeadMode::Binary => 1,
        });
        w.u32(head.n_in as u32);
        w.u32(head.n_out as u32);
        w.f32s(&head.weights);
        w.f32s(&head.bias);
    }
    w.metadata(meta);
    w.buf
}

pub fn estimator_from_bytes(
    bytes: &[u8],
    model: Arc<PerceptionModel<f32>>,
) -> Result<(CompetencyEstimator<f32>, Vec<(String, String)>)> {
    let mut r = Reader::new(bytes, KIND_ESTIMATOR)?;
    let fingerprint = r.u64()?;
    if fingerprint != model.fingerprint() {
        return Err(Error::ModelMismatch(
            "estimator bundle references a different perception model".into(),
        ));
    }
    let tau = r.f64()?;
    let dim = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let n_comps = r.u32()? as usize;
        let mut comps = Vec::with_capacity(n_comps);
        for _ in 0..n_comps {
            comps.push(Component {
                weight: r.f32()?,
                mean: r.f32s()?,
                cov: r.f32s()?,
                cov_inv: r.f64s()?,
                log_det: r.f64()?,
            });
        }
        classes.push(comps);
    }
    let mut heads = Vec::with_capacity(2);
    for _ in 0..2 {
        let mode = match r.u8()? {
            0 => HeadMode::Multinomial,
            1 => HeadMode::Binary,
            tag => return Err(Error::Bundle(format!("unknown head mode {tag}"))),
        };
        heads.push(LogisticHead {
            mode,
            n_in: r.u32()? as usize,
            n_out: r.u32()? as usize,
            weights: r.f32s()?,
            bias: r.f32s()?,
        });
    }
    let meta = r.metadata()?;
    r.done()?;
    let ood = heads.pop().unwrap();
    let transfer = heads.pop().unwrap();
    Ok((
        CompetencyEstimator {
            model,
            gmm: ClassGaussianMixture { dim, classes },
            transfer,
            ood,
            tau,
        },
        meta,
    ))
}

pub fn save_estimator(
    est: &CompetencyEstimator<f32>,
    meta: &[(String, String)],
    path: &Path,
) -> Result<()> {
    crate::dataset::write_atomic(path, &estimator_to_bytes(est, meta))
}

pub fn load_estimator(
    path: &Path,
    model: Arc<PerceptionModel<f32>>,
) -> Result<(CompetencyEstimator<f32>, Vec<(String, String)>)> {
    estimator_from_bytes(&std::fs::read(path)?, model)
}

pub fn decoder_to_bytes(decoder: &InpainterDecoder<f32>, meta: &[(String, String)]) -> Vec<u8> {
    let mut w = Writer::new(KIND_DECODER);
    w.spec(&decoder.spec);
    w.params(&decoder.params);
    w.u64(decoder.encoder_fingerprint);
    w.metadata(meta);
    w.buf
}

pub fn decoder_from_bytes(bytes: &[u8]) -> Result<(InpainterDecoder<f32>, Vec<(String, String)>)> {
    let mut r = Reader::new(bytes, KIND_DECODER)?;
    let spec = r.spec()?;
    let params = r.params()?;
    let encoder_fingerprint = r.u64()?;
    let meta = r.metadata()?;
    r.done()?;
    spec.layer_shapes()?;
    if !params.matches(&spec) {
        return Err(Error::Bundle("parameters do not match the stored spec".into()));
    }
    Ok((
        InpainterDecoder {
            spec,
            params,
            encoder_fingerprint,
        },
        meta,
    ))
}

pub fn save_decoder(
    decoder: &InpainterDecoder<f32>,
    meta: &[(String, String)],
    path: &Path,
) -> Result<()> {
    crate::dataset::write_atomic(path, &decoder_to_bytes(decoder, meta))
}

pub fn load_decoder(path: &Path) -> Result<(InpainterDecoder<f32>, Vec<(String, String)>)> {
    decoder_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::perception::perception_spec;
    use crate::rng::stream;

    fn model(seed: u64) -> PerceptionModel<f32> {
        let spec = perception_spec(&[3, 16, 16], 3).unwrap();
        let mut rng = stream(seed, "bundle-model", 0);
        let params = ParamSet::init(&spec, &mut rng);
        PerceptionModel {
            spec,
            params,
            n_classes: 3,
            feature_dim: 64,
        }
    }

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let m = model(0);
        let meta = vec![("seed".to_string(), "0".to_string())];
        let bytes = classifier_to_bytes(&m, &meta);
        let (loaded, loaded_meta) = classifier_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.spec, m.spec);
        assert_eq!(loaded_meta, meta);
        assert_eq!(classifier_to_bytes(&loaded, &loaded_meta), bytes);
    }

    #[test]
    fn estimator_round_trip_checks_model_identity() {
        use crate::gmm::fit_class_gaussians;
        use crate::logistic::{fit_ood_head, fit_transfer_head};
        let m = Arc::new(model(1));
        let feats: Vec<Vec<f32>> = (0..12)
            .map(|i| (0..4).map(|j| (i * 4 + j) as f32 * 0.1).collect())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let gmm = fit_class_gaussians(&feats, &labels, 3, 1, 0).unwrap().mixture;
        let transfer = fit_transfer_head::<f32>(&feats, &labels, 3).unwrap().head;
        let dists: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| gmm.mahalanobis_distances(f).unwrap())
            .collect();
        let flags: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let ood = fit_ood_head::<f32>(&dists, &flags).unwrap().head;
        let est = CompetencyEstimator {
            model: m.clone(),
            gmm,
            transfer,
            ood,
            tau: 0.4,
        };
        let bytes = estimator_to_bytes(&est, &[]);
        let (loaded, _) = estimator_from_bytes(&bytes, m.clone()).unwrap();
        assert_eq!(loaded.gmm, est.gmm);
        assert_eq!(loaded.transfer, est.transfer);
        assert_eq!(loaded.ood, est.ood);
        assert_eq!(loaded.tau, est.tau);
        assert_eq!(estimator_to_bytes(&loaded, &[]), bytes);

        // A different model is rejected.
        let other = Arc::new(model(2));
        assert!(matches!(
            estimator_from_bytes(&bytes, other),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn decoder_round_trip_is_bit_exact() {
        use crate::inpainter::decoder_spec;
        let spec = decoder_spec(64, &[3, 16, 16]).unwrap();
        let mut rng = stream(3, "bundle-dec", 0);
        let decoder = InpainterDecoder {
            params: ParamSet::init(&spec, &mut rng),
            spec,
            encoder_fingerprint: 0xabcd,
        };
        let bytes = decoder_to_bytes(&decoder, &[]);
        let (loaded, _) = decoder_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.params, decoder.params);
        assert_eq!(loaded.encoder_fingerprint, 0xabcd);
        assert_eq!(decoder_to_bytes(&loaded, &[]), bytes);
    }

    #[test]
    fn corrupted_bundles_rejected() {
        let m = model(4);
        let mut bytes = classifier_to_bytes(&m, &[]);
        assert!(classifier_from_bytes(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(classifier_from_bytes(&bytes).is_err());
        let good = classifier_to_bytes(&m, &[]);
        assert!(decoder_from_bytes(&good).is_err(), "kind mismatch accepted");
    }
}
