//! Dense row-major tensors.
//!
//! Shapes follow the `[channels, height, width]` convention for images and
//! `[out, in]` for dense weights. Reductions accumulate in `f64` regardless
//! of the storage scalar so that metrics are reproducible across platforms.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: R) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum with 64-bit accumulation.
    pub fn sum64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert storage scalar, e.g. to widen a map to `f64` for export.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }
}

/// Offset of `(c, y, x)` in a `[C, H, W]` tensor.
#[inline(always)]
pub fn chw(h: usize, w: usize, c: usize, y: usize, x: usize) -> usize {
    (c * h + y) * w + x
}

/// Bilinear resize of a `[C, H, W]` image to `[C, out_h, out_w]`.
///
/// Uses pixel-center alignment: output pixel `(i, j)` samples the source at
/// `((i + 0.5) * h / out_h - 0.5, (j + 0.5) * w / out_w - 0.5)`, clamped.
pub fn resize_bilinear<R: Real>(img: &Tensor<R>, out_h: usize, out_w: usize) -> Result<Tensor<R>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape(format!(
            "expected [C,H,W] image, got {:?}",
            img.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be nonempty"));
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for ch in 0..c {
                let d = img.data();
                let f00 = d[chw(h, w, ch, y0, x0)].f64();
                let f01 = d[chw(h, w, ch, y0, x1)].f64();
                let f10 = d[chw(h, w, ch, y1, x0)].f64();
                let f11 = d[chw(h, w, ch, y1, x1)].f64();
                let top = f00 * (1.0 - dx) + f01 * dx;
                let bot = f10 * (1.0 - dx) + f11 * dx;
                out.data_mut()[chw(out_h, out_w, ch, i, j)] = R::of(top * (1.0 - dy) + bot * dy);
            }
        }
    }
    Ok(out)
}

/// Crop rows `y0..y1` and columns `x0..x1` of a `[C, H, W]` image.
pub fn crop<R: Real>(
    img: &Tensor<R>,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
) -> Result<Tensor<R>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape(format!(
            "expected [C,H,W] image, got {:?}",
            img.shape()
        )));
    };
    if y1 > h || x1 > w || y0 >= y1 || x0 >= x1 {
        return Err(Error::invalid(format!(
            "crop [{y0}..{y1}, {x0}..{x1}] out of bounds for {h}x{w}"
        )));
    }
    let (ch_, cw) = (y1 - y0, x1 - x0);
    let mut out = Tensor::zeros(&[c, ch_, cw]);
    for cc in 0..c {
        for y in 0..ch_ {
            for x in 0..cw {
                out.data_mut()[chw(ch_, cw, cc, y, x)] =
                    img.data()[chw(h, w, cc, y0 + y, x0 + x)];
            }
        }
    }
    Ok(out)
}
