//! Heatmap rendering: dependency maps blended over the grayscale input.
//!
//! The colormap runs blue (score 0) to red (score 1); redder regions are
//! more associated with low competency.

use crate::error::{Error, Result};
use crate::regional::DependencyMap;
use crate::scalar::Real;
use crate::tensor::{chw, Tensor};

/// Blue-to-red colormap over [0, 1].
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Alpha-blend the colored normalized map onto the grayscale input.
/// `alpha = 0` returns the grayscale image; `alpha = 1` pure colormap.
pub fn render_heatmap<R: Real>(
    image: &Tensor<R>,
    map: &DependencyMap,
    alpha: f64,
) -> Result<Tensor<R>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if map.height != h || map.width != w {
        return Err(Error::shape(format!(
            "map is {}x{}, image is {h}x{w}",
            map.height, map.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let gray = if c == 3 {
                0.299 * image.data()[chw(h, w, 0, y, x)].f64()
                    + 0.587 * image.data()[chw(h, w, 1, y, x)].f64()
                    + 0.114 * image.data()[chw(h, w, 2, y, x)].f64()
            } else {
                image.data()[chw(h, w, 0, y, x)].f64()
            };
            let color = colormap(map.normalized[y * w + x]);
            for ch in 0..3 {
                out.data_mut()[chw(h, w, ch, y, x)] =
                    R::of(alpha * color[ch] + (1.0 - alpha) * gray);
            }
        }
    }
    Ok(out)
}

/// False-color rendering of a segment map for visual debugging.
/// Colors are assigned by golden-ratio hue stepping, so neighboring ids
/// differ strongly.
pub fn false_color_segments(segmap: &crate::segmentation::SegmentMap) -> Tensor<f32> {
    let (h, w) = (segmap.height, segmap.width);
    let mut out = Tensor::zeros(&[3, h, w]);
    let color = |id: u32| -> [f32; 3] {
        let hue = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
        let sector = hue as usize % 6;
        let f = (hue - hue.floor()) as f32;
        let (v, p, q, t) = (0.95f32, 0.25f32, 0.95 - 0.7 * f, 0.25 + 0.7 * f);
        match sector {
            0 => [v, t, p],
            1 => [q, v, p],
            2 => [p, v, t],
            3 => [p, q, v],
            4 => [t, p, v],
            _ => [v, p, q],
        }
    };
    for (i, &l) in segmap.labels.iter().enumerate() {
        let c = color(l);
        for ch in 0..3 {
            out.data_mut()[ch * h * w + i] = c[ch];
        }
    }
    out
}

/// Sidecar text record accompanying an exported map PNG.
pub fn sidecar_text(map: &DependencyMap, params: &str) -> String {
    let (raw_min, raw_max) = map.raw.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), &v| (lo.min(v), hi.max(v)),
    );
    format!(
        "method: {}\nparams: {}\nwall_time_s: {:.6}\nevals: {}\nraw_min: {:e}\nraw_max: {:e}\n",
        map.method.name(),
        params,
        map.wall_time,
        map.evals,
        raw_min,
        raw_max
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regional::MethodKind;

    fn map_of(normalized: Vec<f64>, h: usize, w: usize) -> DependencyMap {
        DependencyMap {
            method: MethodKind::Gradients,
            height: h,
            width: w,
            raw: normalized.clone(),
            normalized,
            wall_time: 0.001,
            evals: 1,
            segmap: None,
        }
    }

    #[test]
    fn alpha_zero_returns_grayscale() {
        let mut img = Tensor::<f32>::zeros(&[3, 2, 2]);
        for (i, v) in [0.2f32, 0.4, 0.6, 0.8].iter().enumerate() {
            img.data_mut()[i] = *v;
            img.data_mut()[4 + i] = *v;
            img.data_mut()[8 + i] = *v;
        }
        let map = map_of(vec![1.0, 0.5, 0.2, 0.0], 2, 2);
        let out = render_heatmap(&img, &map, 0.0).unwrap();
        for i in 0..4 {
            let g = 0.299 * img.data()[i] + 0.587 * img.data()[4 + i] + 0.114 * img.data()[8 + i];
            for ch in 0..3 {
                assert!((out.data()[ch * 4 + i] - g).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_alpha_all_one_map_is_pure_red() {
        let img = Tensor::<f32>::filled(&[3, 2, 2], 0.5);
        let map = map_of(vec![1.0; 4], 2, 2);
        let out = render_heatmap(&img, &map, 1.0).unwrap();
        for i in 0..4 {
            assert_eq!(out.data()[i], 1.0); // red
            assert_eq!(out.data()[4 + i], 0.0);
            assert_eq!(out.data()[8 + i], 0.0); // no blue
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let img = Tensor::<f32>::filled(&[3, 4, 4], 0.3);
        let map = map_of((0..16).map(|i| i as f64 / 15.0).collect(), 4, 4);
        let a = render_heatmap(&img, &map, 0.6).unwrap();
        let b = render_heatmap(&img, &map, 0.6).unwrap();
        assert_eq!(a.data(), b.data());
        let png_a = crate::dataset::tensor_to_rgb8(&a).unwrap();
        let png_b = crate::dataset::tensor_to_rgb8(&b).unwrap();
        assert_eq!(png_a.as_raw(), png_b.as_raw());
    }

    #[test]
    fn sidecar_lists_method_and_range() {
        let mut map = map_of(vec![0.0, 1.0, 0.5, 0.25], 2, 2);
        map.raw = vec![3.0, 9.0, 5.0, 4.0];
        let text = sidecar_text(&map, "k=1");
        assert!(text.contains("method: gradients"));
        assert!(text.contains("raw_min: 3e0"));
        assert!(text.contains("raw_max: 9e0"));
    }

    #[test]
    fn shape_and_alpha_validation() {
        let img = Tensor::<f32>::filled(&[3, 2, 2], 0.5);
        let map = map_of(vec![0.0; 9], 3, 3);
        assert!(render_heatmap(&img, &map, 0.5).is_err());
        let map = map_of(vec![0.0; 4], 2, 2);
        assert!(render_heatmap(&img, &map, 1.5).is_err());
    }
}
