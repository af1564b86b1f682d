//! Shared fixtures for the integration and acceptance suites.

#![allow(dead_code)]

use competency_core::rng::{stream, Stream};
use competency_core::scalar::Real;
use competency_core::segmentation::{gaussian_smooth, grid_edges, FelzParams};
use competency_core::tensor::Tensor;
use rand::Rng;

/// Straightforward reference of the graph-merge rule, independent of the
/// production union-find: components are explicit pixel lists, merges are
/// linear scans. Same edge order, same thresholds, same min-size pass.
pub fn reference_segment<R: Real>(image: &Tensor<R>, params: &FelzParams) -> Vec<u32> {
    let &[_, h, w] = image.shape() else { panic!("expected [C,H,W]") };
    let smoothed = gaussian_smooth(image, params.sigma).unwrap();
    let edges = grid_edges(&smoothed, params.connectivity);

    let n = h * w;
    // component id per pixel; component members; internal difference.
    let mut comp_of: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut internal: Vec<f64> = vec![0.0; n];

    let mut merge = |comp_of: &mut Vec<usize>,
                     members: &mut Vec<Vec<usize>>,
                     internal: &mut Vec<f64>,
                     keep: usize,
                     drop: usize,
                     weight: f64| {
        let moved = std::mem::take(&mut members[drop]);
        for &p in &moved {
            comp_of[p] = keep;
        }
        members[keep].extend(moved);
        internal[keep] = internal[keep].max(internal[drop]).max(weight);
    };

    for e in &edges {
        let (ca, cb) = (comp_of[e.a as usize], comp_of[e.b as usize]);
        if ca == cb {
            continue;
        }
        let ta = internal[ca] + params.k / members[ca].len() as f64;
        let tb = internal[cb] + params.k / members[cb].len() as f64;
        if e.weight <= ta.min(tb) {
            merge(&mut comp_of, &mut members, &mut internal, ca, cb, e.weight);
        }
    }
    if params.min_size > 1 {
        for e in &edges {
            let (ca, cb) = (comp_of[e.a as usize], comp_of[e.b as usize]);
            if ca == cb {
                continue;
            }
            if members[ca].len() < params.min_size || members[cb].len() < params.min_size {
                merge(&mut comp_of, &mut members, &mut internal, ca, cb, e.weight);
            }
        }
    }

    // Contiguous labels in raster order of first occurrence.
    let mut labels = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut label_of = vec![u32::MAX; n];
    for p in 0..n {
        let c = comp_of[p];
        if label_of[c] == u32::MAX {
            label_of[c] = next;
            next += 1;
        }
        labels[p] = label_of[c];
    }
    labels
}

pub fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = stream(seed, "test-image", 0);
    Tensor::from_vec(
        &[c, h, w],
        (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn rng_for(seed: u64, tag: &str) -> Stream {
    stream(seed, tag, 0)
}
