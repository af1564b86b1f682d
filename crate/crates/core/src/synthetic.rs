//! Synthetic benchmark with ground-truth unfamiliarity masks.
//!
//! Familiar classes are striped color textures (direction and palette vary
//! by class; frequency, phase, and pixel noise vary by image). Calibration
//! and test images composite one rectangular patch drawn from a catalog of
//! textures never present in training - a fine off-palette checkerboard,
//! per-pixel noise, a solid off-palette color, and grayscale rings - and the
//! mask marks exactly the patch pixels. Training images are familiar only.
//!
//! All pixels are quantized to the 8-bit grid at generation time so that a
//! PNG round trip reproduces the tensors bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{LabeledDataset, Split};
use crate::rng::{stream, Stream};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_classes: usize,
    /// Patch area as a fraction of image pixels, inclusive range.
    pub patch_fraction: (f64, f64),
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            n_classes: 3,
            patch_fraction: (0.08, 0.25),
            n_train: 300,
            n_calibration: 60,
            n_test: 60,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be >= 8 and divisible by 4",
                self.image_size
            )));
        }
        if self.n_classes < 2 || self.n_classes > PALETTES.len() {
            return Err(Error::invalid(format!(
                "n_classes {} outside supported 2..={}",
                self.n_classes,
                PALETTES.len()
            )));
        }
        let (lo, hi) = self.patch_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(format!(
                "patch_fraction ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        if self.n_train == 0 {
            return Err(Error::invalid("n_train must be positive"));
        }
        Ok(())
    }
}

/// Base colors per familiar class.
const PALETTES: [[f64; 3]; 6] = [
    [0.70, 0.25, 0.20],
    [0.20, 0.62, 0.25],
    [0.22, 0.28, 0.70],
    [0.62, 0.58, 0.20],
    [0.58, 0.22, 0.58],
    [0.20, 0.58, 0.58],
];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// A striped familiar-texture image of class `c`.
fn familiar_image<R: Real>(c: usize, size: usize, rng: &mut Stream) -> Tensor<R> {
    let base = PALETTES[c].map(|v| 0.6 * v);
    let freq: f64 = rng.gen_range(1.5..2.0);
    let phase: f64 =
        c as f64 * 1.3 + rng.gen_range(-0.3..0.3);
    let amp: f64 = 0.06;
    let brightness: f64 = rng.gen_range(-0.06..0.06);
    let mut img = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            // Stripe direction cycles with the class id.
            let t = match c % 3 {
                0 => y as f64 / size as f64,
                1 => x as f64 / size as f64,
                _ => (x + y) as f64 / (2 * size) as f64,
            };
            let s = amp * (std::f64::consts::TAU * freq * t + phase).sin();
            for ch in 0..3 {
                let noise: f64 = rng.gen_range(-0.05..0.05);
                img.data_mut()[(ch * size + y) * size + x] =
                    R::of(quantize(base[ch] + brightness + s + noise));
            }
        }
    }
    img
}

const N_PATCH_KINDS: u64 = 4;

/// Paint one unfamiliar patch texture over the rectangle.
fn paint_patch<R: Real>(
    img: &mut Tensor<R>,
    kind: u64,
    y0: usize,
    x0: usize,
    ph: usize,
    pw: usize,
    rng: &mut Stream,
) {
    let &[_, _, size] = img.shape() else { return };
    let h = img.shape()[1];
    let set = |img: &mut Tensor<R>, y: usize, x: usize, px: [f64; 3]| {
        for ch in 0..3 {
            img.data_mut()[(ch * h + y) * size + x] = R::of(quantize(px[ch]));
        }
    };
    match kind {
        0 => {
            // Yellow/magenta checkerboard, 4-pixel cells.
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    let on = ((y - y0) / 4 + (x - x0) / 4) % 2 == 0;
                    let px = if on {
                        [0.95, 0.90, 0.10]
                    } else {
                        [0.85, 0.05, 0.80]
                    };
                    set(img, y, x, px);
                }
            }
        }
        1 => {
            // Uniform random colors in 4-pixel blocks; the block scale
            // survives the model's pooling stages.
            let (by, bx) = (ph.div_ceil(4), pw.div_ceil(4));
            let blocks: Vec<[f64; 3]> = (0..by * bx)
                .map(|_| {
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ]
                })
                .collect();
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    let b = ((y - y0) / 4) * bx + (x - x0) / 4;
                    set(img, y, x, blocks[b]);
                }
            }
        }
        2 => {
            // Solid bright cyan.
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    set(img, y, x, [0.05, 0.90, 0.95]);
                }
            }
        }
        _ => {
            // Grayscale concentric rings around the patch center.
            let (cy, cx) = (y0 as f64 + ph as f64 / 2.0, x0 as f64 + pw as f64 / 2.0);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let on = (r / 4.0) as usize % 2 == 0;
                    let v = if on { 0.95 } else { 0.05 };
                    set(img, y, x, [v, v, v]);
                }
            }
        }
    }
}

/// Sample a patch rectangle whose area fraction lies inside the range.
fn sample_patch_rect(size: usize, frac: (f64, f64), rng: &mut Stream) -> (usize, usize, usize, usize) {
    let total = (size * size) as f64;
    let target: f64 = rng.gen_range(frac.0..=frac.1);
    let aspect: f64 = rng.gen_range(0.75..1.3333);
    let area = target * total;
    let mut ph = ((area * aspect).sqrt().round() as usize).clamp(2, size - 1);
    let mut pw = ((area / ph as f64).round() as usize).clamp(2, size - 1);
    // Nudge dimensions until the realized fraction is back inside the range.
    for _ in 0..8 {
        let f = (ph * pw) as f64 / total;
        if f < frac.0 {
            if pw < size - 1 {
                pw += 1;
            } else if ph < size - 1 {
                ph += 1;
            }
        } else if f > frac.1 {
            if pw > 2 {
                pw -= 1;
            } else if ph > 2 {
                ph -= 1;
            }
        } else {
            break;
        }
    }
    let y0 = rng.gen_range(0..=size - ph);
    let x0 = rng.gen_range(0..=size - pw);
    (y0, x0, ph, pw)
}

/// Generate the dataset. Training images are familiar-only; calibration and
/// test images carry one composited unfamiliar patch and its exact mask.
pub fn generate_synthetic<R: Real>(spec: &SyntheticSpec) -> Result<LabeledDataset<R>> {
    spec.validate()?;
    let size = spec.image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut masks: Vec<Option<Vec<bool>>> = Vec::new();

    let sections: [(Split, usize, &str); 3] = [
        (Split::Train, spec.n_train, "train"),
        (Split::Calibration, spec.n_calibration, "calibration"),
        (Split::Test, spec.n_test, "test"),
    ];
    for (split, count, tag) in sections {
        let mut rng = stream(spec.seed, tag, 0);
        for i in 0..count {
            let class = i % spec.n_classes;
            let mut img = familiar_image::<R>(class, size, &mut rng);
            if split == Split::Train {
                masks.push(None);
            } else {
                let (y0, x0, ph, pw) = sample_patch_rect(size, spec.patch_fraction, &mut rng);
                let kind = rng.gen_range(0..N_PATCH_KINDS);
                paint_patch(&mut img, kind, y0, x0, ph, pw, &mut rng);
                let mut mask = vec![false; size * size];
                for y in y0..y0 + ph {
                    for x in x0..x0 + pw {
                        mask[y * size + x] = true;
                    }
                }
                masks.push(Some(mask));
            }
            images.push(img);
            labels.push(class);
            splits.push(split);
        }
    }
    let data = LabeledDataset {
        images,
        labels,
        splits,
        masks,
        n_classes: spec.n_classes,
    };
    data.validate()?;
    Ok(data)
}
