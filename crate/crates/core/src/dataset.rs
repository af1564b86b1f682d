//! Dataset on disk: a directory of PNG images plus a manifest.
//!
//! Manifest lines are `path label split [mask_path]`, paths relative to the
//! manifest's directory. Masks are single-channel PNGs with nonzero marking
//! unfamiliar pixels. An optional `classes K` header pins the class count;
//! otherwise it is inferred as `max label + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::perception::{LabeledDataset, Split};
use crate::scalar::Real;
use crate::tensor::{chw, Tensor};

/// Decode a `[3, H, W]` tensor in [0, 1] from 8-bit RGB.
pub fn tensor_from_rgb8<R: Real>(img: &RgbImage) -> Tensor<R> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data_mut()[chw(h, w, c, y, x)] = R::of(px[c] as f64 / 255.0);
            }
        }
    }
    out
}

/// Encode a `[3, H, W]` tensor to 8-bit RGB, clamping to [0, 1].
pub fn tensor_to_rgb8<R: Real>(t: &Tensor<R>) -> Result<RgbImage> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::shape(format!("expected [3,H,W], got {:?}", t.shape())));
    };
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| -> u8 {
                (t.data()[chw(h, w, ch, y, x)].f64().clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

/// Write a boolean mask as an 8-bit grayscale PNG (255 = unfamiliar).
pub fn save_mask(mask: &[bool], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Luma([if mask[y * w + x] { 255u8 } else { 0 }]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write a normalized dependency map as a 16-bit grayscale PNG.
pub fn save_map_png16(normalized: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (normalized[y * w + x].clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Read a 16-bit grayscale PNG back into normalized scores.
pub fn load_map_png16(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0;
        }
    }
    Ok((out, h, w))
}

/// Load a single PNG as a `[3, H, W]` tensor in [0, 1].
pub fn load_image_png<R: Real>(path: &Path) -> Result<Tensor<R>> {
    Ok(tensor_from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Write the dataset as PNGs plus a manifest under `dir`.
pub fn save_dataset<R: Real>(data: &LabeledDataset<R>, dir: &Path) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let has_masks = data.masks.iter().any(|m| m.is_some());
    if has_masks {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let mut manifest = format!("classes {}\n", data.n_classes);
    for (i, img) in data.images.iter().enumerate() {
        let name = format!("images/img_{i:05}.png");
        tensor_to_rgb8(img)?.save(dir.join(&name))?;
        let mut line = format!("{name} {} {}", data.labels[i], data.splits[i].tag());
        if let Some(mask) = &data.masks[i] {
            let &[_, h, w] = img.shape() else { unreachable!() };
            let mask_name = format!("masks/img_{i:05}.png");
            save_mask(mask, h, w, &dir.join(&mask_name))?;
            line.push(' ');
            line.push_str(&mask_name);
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset from a manifest directory; errors carry path and line.
pub fn load_dataset<R: Real>(dir: &Path) -> Result<LabeledDataset<R>> {
    let manifest_path = dir.join("manifest.txt");
    let manifest_str = manifest_path.to_string_lossy().to_string();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Dataset {
        path: manifest_str.clone(),
        line: 0,
        reason: format!("cannot read manifest: {e}"),
    })?;

    let bad = |line: usize, reason: String| Error::Dataset {
        path: manifest_str.clone(),
        line,
        reason,
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut masks = Vec::new();
    let mut declared_classes: Option<usize> = None;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "classes" {
            if fields.len() != 2 {
                return Err(bad(lineno, "classes header expects one integer".into()));
            }
            declared_classes = Some(
                fields[1]
                    .parse()
                    .map_err(|_| bad(lineno, format!("bad class count '{}'", fields[1])))?,
            );
            continue;
        }
        if fields.len() < 3 || fields.len() > 4 {
            return Err(bad(
                lineno,
                format!("expected 'path label split [mask]', got {} fields", fields.len()),
            ));
        }
        let img_path = dir.join(fields[0]);
        let img = image::open(&img_path)
            .map_err(|e| bad(lineno, format!("cannot open image {}: {e}", fields[0])))?
            .to_rgb8();
        let label: usize = fields[1]
            .parse()
            .map_err(|_| bad(lineno, format!("bad label '{}'", fields[1])))?;
        let split = Split::from_tag(fields[2])
            .ok_or_else(|| bad(lineno, format!("unknown split tag '{}'", fields[2])))?;
        let mask = if fields.len() == 4 {
            let mask_path = dir.join(fields[3]);
            let m = image::open(&mask_path)
                .map_err(|e| bad(lineno, format!("cannot open mask {}: {e}", fields[3])))?
                .to_luma8();
            if (m.width(), m.height()) != (img.width(), img.height()) {
                return Err(bad(
                    lineno,
                    format!(
                        "mask is {}x{}, image is {}x{}",
                        m.width(),
                        m.height(),
                        img.width(),
                        img.height()
                    ),
                ));
            }
            Some(m.pixels().map(|p| p[0] != 0).collect::<Vec<bool>>())
        } else {
            None
        };

        images.push(tensor_from_rgb8::<R>(&img));
        labels.push(label);
        splits.push(split);
        masks.push(mask);
    }

    if images.is_empty() {
        return Err(bad(0, "manifest lists no images".into()));
    }
    let n_classes =
        declared_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
        return Err(bad(i + 2, format!("label {l} >= class count {n_classes}")));
    }
    let data = LabeledDataset {
        images,
        labels,
        splits,
        masks,
        n_classes,
    };
    data.validate()?;
    Ok(data)
}

/// Atomic-rename write used by pipeline outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 16,
            n_train: 6,
            n_calibration: 3,
            n_test: 3,
            seed: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_preserves_tensors() {
        let data = generate_synthetic::<f32>(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let loaded = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.n_classes, data.n_classes);
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.splits, data.splits);
        assert_eq!(loaded.masks, data.masks);
        for (a, b) in loaded.images.iter().zip(&data.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn missing_mask_error_names_line() {
        let data = generate_synthetic::<f32>(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        // Remove the first mask file; its manifest line is 8 (header + 6
        // train + 1).
        fs::remove_file(dir.path().join("masks/img_00006.png")).unwrap();
        match load_dataset::<f32>(dir.path()) {
            Err(Error::Dataset { line, reason, .. }) => {
                assert_eq!(line, 8, "{reason}");
                assert!(reason.contains("img_00006"), "{reason}");
            }
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn all_white_png_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        img.save(dir.path().join("images/white.png")).unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "classes 2\nimages/white.png 1 train\n",
        )
        .unwrap();
        let data = load_dataset::<f32>(dir.path()).unwrap();
        assert!(data.images[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        let img = RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]));
        img.save(dir.path().join("images/a.png")).unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "classes 2\nimages/a.png 5 train\n",
        )
        .unwrap();
        assert!(load_dataset::<f32>(dir.path()).is_err());
    }

    #[test]
    fn map_png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let values: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        save_map_png16(&values, 8, 8, &path).unwrap();
        let (loaded, h, w) = load_map_png16(&path).unwrap();
        assert_eq!((h, w), (8, 8));
        for (a, b) in loaded.iter().zip(&values) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }
}
