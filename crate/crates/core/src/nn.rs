//! Minimal dense/conv network engine with reverse-mode differentiation.
//!
//! The layer vocabulary is fixed: convolution, rectifier, 2x2 max-pool,
//! flatten/reshape, dense, softmax, logistic squash, and nearest-neighbor
//! 2x upsampling. Forward evaluation records every layer output in a
//! [`ForwardTrace`]; the backward pass can start from any recorded layer,
//! which is how gradients are taken at the feature tap rather than the
//! network output.
//!
//! Dot products and reductions accumulate in `f64`; results are stored back
//! in the network scalar `R`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Real;
use crate::tensor::{chw, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// 2x2 max-pool with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
    Sigmoid,
    /// Nearest-neighbor 2x upsampling.
    Upsample2,
    Reshape(Vec<usize>),
}

impl Layer {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch]],
            Layer::Dense { in_dim, out_dim } => vec![vec![*out_dim, *in_dim], vec![*out_dim]],
            _ => vec![],
        }
    }

    fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::Conv2d { in_ch, kernel, .. } => Some(in_ch * kernel * kernel),
            Layer::Dense { in_dim, .. } => Some(*in_dim),
            _ => None,
        }
    }
}

/// Architecture description plus optional named tap points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Layer index whose output is the feature vector.
    pub features_tap: Option<usize>,
    /// Layer index whose output holds the pre-softmax logits.
    pub logits_tap: Option<usize>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        NetworkSpec {
            input_shape,
            layers,
            features_tap: None,
            logits_tap: None,
        }
    }

    /// Per-layer output shapes; errors name the offending layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |reason: String| Error::Layer { layer: i, reason };
            cur = match layer {
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                } => {
                    let &[c, h, w] = cur.as_slice() else {
                        return Err(bad(format!("conv expects [C,H,W] input, got {cur:?}")));
                    };
                    if c != *in_ch {
                        return Err(bad(format!("conv expects {in_ch} channels, got {c}")));
                    }
                    if *stride == 0 || *kernel == 0 {
                        return Err(bad("conv kernel/stride must be positive".into()));
                    }
                    let span_h = h + 2 * pad;
                    let span_w = w + 2 * pad;
                    if span_h < *kernel || span_w < *kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input")));
                    }
                    if (span_h - kernel) % stride != 0 || (span_w - kernel) % stride != 0 {
                        return Err(bad("conv stride does not tile the input".into()));
                    }
                    vec![
                        *out_ch,
                        (span_h - kernel) / stride + 1,
                        (span_w - kernel) / stride + 1,
                    ]
                }
                Layer::Relu | Layer::Sigmoid => cur,
                Layer::MaxPool2 => {
                    let &[c, h, w] = cur.as_slice() else {
                        return Err(bad(format!("max-pool expects [C,H,W], got {cur:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(bad(format!("max-pool needs >=2x2 input, got {h}x{w}")));
                    }
                    vec![c, h / 2, w / 2]
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Dense { in_dim, out_dim } => {
                    let &[n] = cur.as_slice() else {
                        return Err(bad(format!("dense expects a vector, got {cur:?}")));
                    };
                    if n != *in_dim {
                        return Err(bad(format!("dense expects {in_dim} inputs, got {n}")));
                    }
                    vec![*out_dim]
                }
                Layer::Softmax => {
                    let &[_] = cur.as_slice() else {
                        return Err(bad(format!("softmax expects a vector, got {cur:?}")));
                    };
                    cur
                }
                Layer::Upsample2 => {
                    let &[c, h, w] = cur.as_slice() else {
                        return Err(bad(format!("upsample expects [C,H,W], got {cur:?}")));
                    };
                    vec![c, 2 * h, 2 * w]
                }
                Layer::Reshape(shape) => {
                    let n: usize = cur.iter().product();
                    let m: usize = shape.iter().product();
                    if n != m {
                        return Err(bad(format!("cannot reshape {cur:?} to {shape:?}")));
                    }
                    shape.clone()
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone()))
    }
}

/// Parameter tensors, index-aligned with the spec's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<R: Real> {
    pub layers: Vec<Vec<Tensor<R>>>,
}

impl<R: Real> ParamSet<R> {
    /// Uniform init in +/- 1/sqrt(fan_in); biases start at a small positive
    /// value so rectifier units are live at the first step.
    pub fn init(spec: &NetworkSpec, rng: &mut Stream) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|layer| {
                let shapes = layer.param_shapes();
                let fan_in = layer.fan_in().unwrap_or(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                shapes
                    .iter()
                    .enumerate()
                    .map(|(pi, shape)| {
                        if pi == 0 {
                            let n: usize = shape.iter().product();
                            let data = (0..n)
                                .map(|_| R::of(rng.gen_range(-bound..bound)))
                                .collect();
                            Tensor::from_vec(shape, data).expect("init shape")
                        } else {
                            Tensor::filled(shape, R::of(0.01))
                        }
                    })
                    .collect()
            })
            .collect();
        ParamSet { layers }
    }

    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        ParamSet {
            layers: spec
                .layers
                .iter()
                .map(|layer| {
                    layer
                        .param_shapes()
                        .iter()
                        .map(|s| Tensor::zeros(s))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.layers.len() == spec.layers.len()
            && self
                .layers
                .iter()
                .zip(&spec.layers)
                .all(|(ts, layer)| {
                    let shapes = layer.param_shapes();
                    ts.len() == shapes.len()
                        && ts.iter().zip(&shapes).all(|(t, s)| t.shape() == &s[..])
                })
    }

    pub fn iter_tensors(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.layers.iter().flatten()
    }

    pub fn iter_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.layers.iter_mut().flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.iter_tensors().all(|t| t.all_finite())
    }

    pub fn n_scalars(&self) -> usize {
        self.iter_tensors().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, elementwise; shapes must mirror.
    pub fn add_scaled(&mut self, other: &ParamSet<R>, scale: R) -> Result<()> {
        for (a, b) in self.iter_tensors_mut().zip(other.iter_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("parameter sets do not mirror"));
            }
            for (av, &bv) in a.data_mut().iter_mut().zip(b.data()) {
                *av = *av + scale * bv;
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the exact parameter bits; detects any mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        let mut push = |byte: u8| {
            acc ^= byte as u64;
            acc = acc.wrapping_mul(0x100000001b3);
        };
        for t in self.iter_tensors() {
            for v in t.data() {
                for b in v.f64().to_le_bytes() {
                    push(b);
                }
            }
        }
        acc
    }
}

/// Outputs of every layer for one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<R: Real> {
    pub input: Tensor<R>,
    pub outputs: Vec<Tensor<R>>,
}

impl<R: Real> ForwardTrace<R> {
    pub fn output(&self) -> &Tensor<R> {
        self.outputs.last().unwrap_or(&self.input)
    }

    fn layer_input(&self, i: usize) -> &Tensor<R> {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

pub fn forward<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    input: &Tensor<R>,
) -> Result<ForwardTrace<R>> {
    if input.shape() != spec.input_shape.as_slice() {
        return Err(Error::shape(format!(
            "input shape {:?} does not match spec input {:?}",
            input.shape(),
            spec.input_shape
        )));
    }
    if !params.matches(spec) {
        return Err(Error::invalid("parameter set does not match spec"));
    }
    let mut outputs = Vec::with_capacity(spec.layers.len());
    let mut cur = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        cur = eval_layer(layer, &params.layers[i], &cur)
            .map_err(|e| Error::Layer {
                layer: i,
                reason: e.to_string(),
            })?;
        outputs.push(cur.clone());
    }
    Ok(ForwardTrace {
        input: input.clone(),
        outputs,
    })
}

fn eval_layer<R: Real>(layer: &Layer, params: &[Tensor<R>], x: &Tensor<R>) -> Result<Tensor<R>> {
    match layer {
        Layer::Conv2d {
            out_ch,
            kernel,
            stride,
            pad,
            ..
        } => conv_forward(x, &params[0], &params[1], *out_ch, *kernel, *stride, *pad),
        Layer::Relu => Ok(x.map(|v| if v > R::zero() { v } else { R::zero() })),
        Layer::Sigmoid => Ok(x.map(|v| R::of(1.0 / (1.0 + (-v.f64()).exp())))),
        Layer::MaxPool2 => maxpool_forward(x),
        Layer::Flatten => x.clone().reshaped(&[x.len()]),
        Layer::Dense { .. } => dense_forward(x, &params[0], &params[1]),
        Layer::Softmax => softmax_forward(x),
        Layer::Upsample2 => upsample_forward(x),
        Layer::Reshape(shape) => x.clone().reshaped(shape),
    }
}

/// Valid output index range for one kernel offset: `i = o * stride + k - pad`
/// must land in `[0, n)`. Returns `(o_start, o_end)`.
#[inline(always)]
fn conv_span(n: usize, o_count: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let start = pad.saturating_sub(k).div_ceil(stride);
    let end = if n + pad > k {
        (((n + pad - k - 1) / stride) + 1).min(o_count)
    } else {
        0
    };
    (start.min(end), end)
}

fn conv_forward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    bias: &Tensor<R>,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<R>> {
    let &[in_ch, h, w] = x.shape() else {
        return Err(Error::shape(format!("conv input {:?}", x.shape())));
    };
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Tensor::zeros(&[out_ch, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let mut acc = vec![0.0f64; oh * ow];
    for oc in 0..out_ch {
        let b = bias.data()[oc].f64();
        acc.iter_mut().for_each(|a| *a = b);
        for ic in 0..in_ch {
            let xplane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                let (oy0, oy1) = conv_span(h, oh, stride, ky, pad);
                for kx in 0..kernel {
                    let wv = wd[((oc * in_ch + ic) * kernel + ky) * kernel + kx].f64();
                    let (ox0, ox1) = conv_span(w, ow, stride, kx, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xplane[iy * w..(iy + 1) * w];
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            arow[ox] += wv * xrow[ox * stride + kx - pad].f64();
                        }
                    }
                }
            }
        }
        let od = out.data_mut();
        for (i, &a) in acc.iter().enumerate() {
            od[oc * oh * ow + i] = R::of(a);
        }
    }
    Ok(out)
}

fn maxpool_forward<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(format!("max-pool input {:?}", x.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for cc in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                // First maximal element wins on ties (scan order).
                let mut best = x.data()[chw(h, w, cc, 2 * oy, 2 * ox)];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x.data()[chw(h, w, cc, 2 * oy + dy, 2 * ox + dx)];
                    if v > best {
                        best = v;
                    }
                }
                out.data_mut()[chw(oh, ow, cc, oy, ox)] = best;
            }
        }
    }
    Ok(out)
}

fn dense_forward<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let &[out_dim, in_dim] = weight.shape() else {
        return Err(Error::shape(format!("dense weight {:?}", weight.shape())));
    };
    if x.len() != in_dim {
        return Err(Error::shape(format!(
            "dense expects {in_dim} inputs, got {}",
            x.len()
        )));
    }
    let mut out = Tensor::zeros(&[out_dim]);
    for o in 0..out_dim {
        let row = &weight.data()[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias.data()[o].f64();
        for (wv, xv) in row.iter().zip(x.data()) {
            acc += wv.f64() * xv.f64();
        }
        out.data_mut()[o] = R::of(acc);
    }
    Ok(out)
}

fn softmax_forward<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let mut max = f64::NEG_INFINITY;
    for v in x.data() {
        max = max.max(v.f64());
    }
    let exps: Vec<f64> = x.data().iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let data = exps.iter().map(|e| R::of(e / sum)).collect();
    Tensor::from_vec(x.shape(), data)
}

fn upsample_forward<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(format!("upsample input {:?}", x.shape())));
    };
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for cc in 0..c {
        for y in 0..2 * h {
            for x_ in 0..2 * w {
                out.data_mut()[chw(2 * h, 2 * w, cc, y, x_)] =
                    x.data()[chw(h, w, cc, y / 2, x_ / 2)];
            }
        }
    }
    Ok(out)
}

/// Gradient of `cotangent . output` with respect to the network input,
/// starting at the final layer.
pub fn backward_to_input<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    cotangent: &Tensor<R>,
) -> Result<Tensor<R>> {
    let last = spec.layers.len().checked_sub(1).ok_or_else(|| {
        Error::invalid("cannot backpropagate through an empty network")
    })?;
    let (dx, _) = backward_impl(spec, params, trace, last, cotangent, false)?;
    Ok(dx)
}

/// Gradient of `cotangent . outputs[layer]` with respect to the input.
pub fn backward_from_layer<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    layer: usize,
    cotangent: &Tensor<R>,
) -> Result<Tensor<R>> {
    let (dx, _) = backward_impl(spec, params, trace, layer, cotangent, false)?;
    Ok(dx)
}

/// Parameter gradients of `cotangent . output`.
pub fn backward_to_params<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    cotangent: &Tensor<R>,
) -> Result<ParamSet<R>> {
    let last = spec.layers.len().checked_sub(1).ok_or_else(|| {
        Error::invalid("cannot backpropagate through an empty network")
    })?;
    let (_, grads) = backward_impl(spec, params, trace, last, cotangent, true)?;
    Ok(grads.expect("param gradients requested"))
}

/// Parameter gradients of `cotangent . outputs[layer]`; layers above
/// `layer` receive zero gradients.
pub fn backward_params_from_layer<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    layer: usize,
    cotangent: &Tensor<R>,
) -> Result<ParamSet<R>> {
    let (_, grads) = backward_impl(spec, params, trace, layer, cotangent, true)?;
    Ok(grads.expect("param gradients requested"))
}

/// Input and (optionally) parameter gradients in one backward sweep.
pub fn backward<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    cotangent: &Tensor<R>,
) -> Result<(Tensor<R>, ParamSet<R>)> {
    let last = spec.layers.len().checked_sub(1).ok_or_else(|| {
        Error::invalid("cannot backpropagate through an empty network")
    })?;
    let (dx, grads) = backward_impl(spec, params, trace, last, cotangent, true)?;
    Ok((dx, grads.expect("param gradients requested")))
}

fn backward_impl<R: Real>(
    spec: &NetworkSpec,
    params: &ParamSet<R>,
    trace: &ForwardTrace<R>,
    from_layer: usize,
    cotangent: &Tensor<R>,
    want_params: bool,
) -> Result<(Tensor<R>, Option<ParamSet<R>>)> {
    if trace.outputs.len() != spec.layers.len() {
        return Err(Error::invalid(format!(
            "trace has {} layers, spec has {}",
            trace.outputs.len(),
            spec.layers.len()
        )));
    }
    if from_layer >= spec.layers.len() {
        return Err(Error::invalid(format!(
            "layer index {from_layer} out of range"
        )));
    }
    if cotangent.shape() != trace.outputs[from_layer].shape() {
        return Err(Error::shape(format!(
            "cotangent shape {:?} does not match layer output {:?}",
            cotangent.shape(),
            trace.outputs[from_layer].shape()
        )));
    }
    if !params.matches(spec) {
        return Err(Error::invalid("parameter set does not match spec"));
    }
    let mut grads = want_params.then(|| ParamSet::zeros_like(spec));
    let mut cot = cotangent.clone();
    for i in (0..=from_layer).rev() {
        let x = trace.layer_input(i);
        let y = &trace.outputs[i];
        let layer_grads = grads.as_mut().map(|g| &mut g.layers[i]);
        cot = layer_backward(&spec.layers[i], &params.layers[i], x, y, &cot, layer_grads)
            .map_err(|e| Error::Layer {
                layer: i,
                reason: e.to_string(),
            })?;
    }
    Ok((cot, grads))
}

fn layer_backward<R: Real>(
    layer: &Layer,
    params: &[Tensor<R>],
    x: &Tensor<R>,
    y: &Tensor<R>,
    dy: &Tensor<R>,
    grads: Option<&mut Vec<Tensor<R>>>,
) -> Result<Tensor<R>> {
    match layer {
        Layer::Conv2d {
            out_ch,
            kernel,
            stride,
            pad,
            ..
        } => conv_backward(x, &params[0], dy, *out_ch, *kernel, *stride, *pad, grads),
        Layer::Relu => {
            let mut dx = dy.clone();
            for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                if xv <= R::zero() {
                    *d = R::zero();
                }
            }
            Ok(dx)
        }
        Layer::Sigmoid => {
            let mut dx = dy.clone();
            for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                let yf = yv.f64();
                *d = R::of(d.f64() * yf * (1.0 - yf));
            }
            Ok(dx)
        }
        Layer::MaxPool2 => maxpool_backward(x, dy),
        Layer::Flatten => dy.clone().reshaped(x.shape()),
        Layer::Dense { .. } => dense_backward(x, &params[0], dy, grads),
        Layer::Softmax => {
            // dz_i = p_i * (dy_i - sum_j dy_j p_j)
            let dot: f64 = dy
                .data()
                .iter()
                .zip(y.data())
                .map(|(d, p)| d.f64() * p.f64())
                .sum();
            let data = dy
                .data()
                .iter()
                .zip(y.data())
                .map(|(d, p)| R::of(p.f64() * (d.f64() - dot)))
                .collect();
            Tensor::from_vec(x.shape(), data)
        }
        Layer::Upsample2 => upsample_backward(x, dy),
        Layer::Reshape(_) => dy.clone().reshaped(x.shape()),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    dy: &Tensor<R>,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grads: Option<&mut Vec<Tensor<R>>>,
) -> Result<Tensor<R>> {
    let &[in_ch, h, w] = x.shape() else {
        return Err(Error::shape(format!("conv input {:?}", x.shape())));
    };
    let &[_, oh, ow] = dy.shape() else {
        return Err(Error::shape(format!("conv cotangent {:?}", dy.shape())));
    };
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();

    let mut dx_acc = vec![0.0f64; in_ch * h * w];
    for oc in 0..out_ch {
        let dplane = &dyd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..in_ch {
            let dx_plane = &mut dx_acc[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                let (oy0, oy1) = conv_span(h, oh, stride, ky, pad);
                for kx in 0..kernel {
                    let wv = wd[((oc * in_ch + ic) * kernel + ky) * kernel + kx].f64();
                    let (ox0, ox1) = conv_span(w, ow, stride, kx, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        let xrow = &mut dx_plane[iy * w..(iy + 1) * w];
                        for ox in ox0..ox1 {
                            xrow[ox * stride + kx - pad] += wv * drow[ox].f64();
                        }
                    }
                }
            }
        }
    }
    let mut dx = Tensor::zeros(&[in_ch, h, w]);
    for (o, a) in dx.data_mut().iter_mut().zip(&dx_acc) {
        *o = R::of(*a);
    }

    if let Some(grads) = grads {
        let dw = &mut grads[0];
        let mut dw_acc = vec![0.0f64; dw.len()];
        let mut db_acc = vec![0.0f64; out_ch];
        for oc in 0..out_ch {
            let dplane = &dyd[oc * oh * ow..(oc + 1) * oh * ow];
            db_acc[oc] = dplane.iter().map(|v| v.f64()).sum();
            for ic in 0..in_ch {
                let xplane = &xd[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kernel {
                    let (oy0, oy1) = conv_span(h, oh, stride, ky, pad);
                    for kx in 0..kernel {
                        let (ox0, ox1) = conv_span(w, ow, stride, kx, pad);
                        let mut acc = 0.0f64;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                acc += xrow[ox * stride + kx - pad].f64() * drow[ox].f64();
                            }
                        }
                        dw_acc[((oc * in_ch + ic) * kernel + ky) * kernel + kx] = acc;
                    }
                }
            }
        }
        for (o, a) in dw.data_mut().iter_mut().zip(&dw_acc) {
            *o = R::of(*a);
        }
        for (o, a) in grads[1].data_mut().iter_mut().zip(&db_acc) {
            *o = R::of(*a);
        }
    }
    Ok(dx)
}

fn upsample_backward<R: Real>(x: &Tensor<R>, dy: &Tensor<R>) -> Result<Tensor<R>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(format!("upsample input {:?}", x.shape())));
    };
    let mut dx = Tensor::zeros(&[c, h, w]);
    for cc in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let g = dy.data()[chw(2 * h, 2 * w, cc, y, xx)];
                let slot = &mut dx.data_mut()[chw(h, w, cc, y / 2, xx / 2)];
                *slot = *slot + g;
            }
        }
    }
    Ok(dx)
}

fn maxpool_backward<R: Real>(x: &Tensor<R>, dy: &Tensor<R>) -> Result<Tensor<R>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape(format!("max-pool input {:?}", x.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for cc in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                // Route to the first maximal element, matching forward.
                let (mut by, mut bx) = (2 * oy, 2 * ox);
                let mut best = x.data()[chw(h, w, cc, by, bx)];
                for (dy_, dx_) in [(0, 1), (1, 0), (1, 1)] {
                    let (yy, xx) = (2 * oy + dy_, 2 * ox + dx_);
                    let v = x.data()[chw(h, w, cc, yy, xx)];
                    if v > best {
                        best = v;
                        by = yy;
                        bx = xx;
                    }
                }
                let g = dy.data()[chw(oh, ow, cc, oy, ox)];
                let slot = &mut dx.data_mut()[chw(h, w, cc, by, bx)];
                *slot = *slot + g;
            }
        }
    }
    Ok(dx)
}

fn dense_backward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    dy: &Tensor<R>,
    grads: Option<&mut Vec<Tensor<R>>>,
) -> Result<Tensor<R>> {
    let &[out_dim, in_dim] = weight.shape() else {
        return Err(Error::shape(format!("dense weight {:?}", weight.shape())));
    };
    let mut dx_acc = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let g = dy.data()[o].f64();
        if g == 0.0 {
            continue;
        }
        let row = &weight.data()[o * in_dim..(o + 1) * in_dim];
        for (a, wv) in dx_acc.iter_mut().zip(row) {
            *a += wv.f64() * g;
        }
    }
    let mut dx = Tensor::zeros(&[in_dim]);
    for (o, a) in dx.data_mut().iter_mut().zip(&dx_acc) {
        *o = R::of(*a);
    }
    if let Some(grads) = grads {
        let dw = &mut grads[0];
        for o in 0..out_dim {
            let g = dy.data()[o].f64();
            let row = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
            for (slot, xv) in row.iter_mut().zip(x.data()) {
                *slot = R::of(g * xv.f64());
            }
        }
        grads[1] = dy.clone();
    }
    Ok(dx)
}

/// Hash of the discrete selections a trace made: rectifier support sets and
/// max-pool argmax positions.
///
/// Finite-difference checks compare signatures at the probe points and skip
/// probes that straddle a selection switch, where the network is piecewise
/// and central differences do not estimate the one-sided derivative.
pub fn selection_signature<R: Real>(spec: &NetworkSpec, trace: &ForwardTrace<R>) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    let mut push = |byte: u8| {
        acc ^= byte as u64;
        acc = acc.wrapping_mul(0x100000001b3);
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            Layer::Relu => {
                for v in trace.outputs[i].data() {
                    push((*v > R::zero()) as u8);
                }
            }
            Layer::MaxPool2 => {
                let x = trace.layer_input(i);
                let &[c, h, w] = x.shape() else { continue };
                for cc in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut sel = 0u8;
                            let mut best = x.data()[chw(h, w, cc, 2 * oy, 2 * ox)];
                            for (s, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                                let v = x.data()[chw(h, w, cc, 2 * oy + dy, 2 * ox + dx)];
                                if v > best {
                                    best = v;
                                    sel = s as u8 + 1;
                                }
                            }
                            push(sel);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    acc
}

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
///
/// A non-finite gradient rejects the whole step, leaving parameters and
/// state untouched.
pub fn sgd_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &ParamSet<R>,
    lr: f64,
    momentum: f64,
    state: &mut ParamSet<R>,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!(
            "momentum must be in [0, 1), got {momentum}"
        )));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient; step rejected".into()));
    }
    let lr = R::of(lr);
    let momentum = R::of(momentum);
    for ((p, g), v) in params
        .iter_tensors_mut()
        .zip(grads.iter_tensors())
        .zip(state.iter_tensors_mut())
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "gradient/state shapes do not mirror parameters",
            ));
        }
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vv = momentum * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}
