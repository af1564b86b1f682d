//! Graph-based image segmentation (Felzenszwalb-Huttenlocher).
//!
//! Edges of the pixel grid are weighted by Euclidean RGB distance on the
//! Gaussian-smoothed image and processed in nondecreasing weight order; two
//! components merge when the edge weight is at most
//! `min(internal(C1) + k/|C1|, internal(C2) + k/|C2|)`. A final pass merges
//! components below `min_size` into their nearest-edge neighbor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{chw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FelzParams {
    /// Scale of observation: threshold function numerator.
    pub k: f64,
    /// Gaussian pre-smoothing standard deviation.
    pub sigma: f64,
    /// Minimum component size enforced by the post-merge pass.
    pub min_size: usize,
    /// Pixel connectivity: 4 or 8.
    pub connectivity: u8,
}

impl Default for FelzParams {
    fn default() -> Self {
        FelzParams {
            k: 1.0,
            sigma: 0.8,
            min_size: 20,
            connectivity: 8,
        }
    }
}

impl FelzParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid(format!("k must be positive, got {}", self.k)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.min_size < 1 {
            return Err(Error::invalid("min_size must be at least 1"));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::invalid(format!(
                "connectivity must be 4 or 8, got {}",
                self.connectivity
            )));
        }
        Ok(())
    }
}

/// Per-pixel segment labels, contiguous `0..n_segments`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_segments: usize,
}

impl SegmentMap {
    /// Boolean mask of the pixels carrying segment `id`.
    pub fn segment_mask(&self, id: usize) -> Result<Vec<bool>> {
        if id >= self.n_segments {
            return Err(Error::invalid(format!(
                "segment id {id} out of range (n_segments = {})",
                self.n_segments
            )));
        }
        Ok(self.labels.iter().map(|&l| l as usize == id).collect())
    }

    /// Pixel count per segment.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Separable Gaussian blur per channel with kernel radius `ceil(3 sigma)`
/// and reflected borders. `sigma = 0` returns the input unchanged.
pub fn gaussian_smooth<R: Real>(image: &Tensor<R>, sigma: f64) -> Result<Tensor<R>> {
    if sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= norm;
    }

    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    // Horizontal pass into f64 scratch, then vertical pass.
    let mut tmp = vec![0.0f64; c * h * w];
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w as isize);
                    acc += kv * image.data()[chw(h, w, cc, y, sx)].f64();
                }
                tmp[chw(h, w, cc, y, x)] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h as isize);
                    acc += kv * tmp[chw(h, w, cc, sy, x)];
                }
                out.data_mut()[chw(h, w, cc, y, x)] = R::of(acc);
            }
        }
    }
    Ok(out)
}

/// Grid edge: weight plus endpoint pixel indices. The sort key includes the
/// source pixel and direction so ties resolve identically on every platform.
#[derive(Debug, Clone, Copy)]
pub struct GridEdge {
    pub weight: f64,
    pub a: u32,
    pub b: u32,
    pub dir: u8,
}

/// Edge list of the pixel grid over the (smoothed) image, sorted by
/// `(weight, source pixel, direction)`.
pub fn grid_edges<R: Real>(smoothed: &Tensor<R>, connectivity: u8) -> Vec<GridEdge> {
    let &[c, h, w] = smoothed.shape() else {
        panic!("grid_edges expects [C,H,W]");
    };
    let dist = |pa: usize, pb: usize| -> f64 {
        let (ya, xa) = (pa / w, pa % w);
        let (yb, xb) = (pb / w, pb % w);
        let mut acc = 0.0;
        for cc in 0..c {
            let d = smoothed.data()[chw(h, w, cc, ya, xa)].f64()
                - smoothed.data()[chw(h, w, cc, yb, xb)].f64();
            acc += d * d;
        }
        acc.sqrt()
    };
    // Directions: 0 right, 1 down, 2 down-right, 3 down-left.
    let deltas: &[(isize, isize)] = if connectivity == 8 {
        &[(0, 1), (1, 0), (1, 1), (1, -1)]
    } else {
        &[(0, 1), (1, 0)]
    };
    let mut edges = Vec::with_capacity(h * w * deltas.len());
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            for (dir, &(dy, dx)) in deltas.iter().enumerate() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                    continue;
                }
                let b = ny as usize * w + nx as usize;
                edges.push(GridEdge {
                    weight: dist(a, b),
                    a: a as u32,
                    b: b as u32,
                    dir: dir as u8,
                });
            }
        }
    }
    edges.sort_by(|p, q| {
        p.weight
            .partial_cmp(&q.weight)
            .expect("finite edge weights")
            .then(p.a.cmp(&q.a))
            .then(p.dir.cmp(&q.dir))
    });
    edges
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    internal: Vec<f64>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let p = self.parent[i as usize];
            self.parent[i as usize] = self.parent[p as usize];
            i = self.parent[i as usize];
        }
        i
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = self.internal[a as usize]
            .max(self.internal[b as usize])
            .max(weight);
        big
    }
}

/// Segment an image; see the module docs for the merge rule.
pub fn felzenszwalb_segment<R: Real>(image: &Tensor<R>, params: &FelzParams) -> Result<SegmentMap> {
    params.validate()?;
    let &[_, h, w] = image.shape() else {
        return Err(Error::shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if h == 0 || w == 0 {
        return Err(Error::invalid("image must be nonempty"));
    }
    let smoothed = gaussian_smooth(image, params.sigma)?;
    let edges = grid_edges(&smoothed, params.connectivity);

    let n = h * w;
    let mut uf = UnionFind::new(n);
    for e in &edges {
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        if ra == rb {
            continue;
        }
        let ta = uf.internal[ra as usize] + params.k / uf.size[ra as usize] as f64;
        let tb = uf.internal[rb as usize] + params.k / uf.size[rb as usize] as f64;
        if e.weight <= ta.min(tb) {
            uf.union(ra, rb, e.weight);
        }
    }

    // Post-merge: walking edges in the same order joins undersized
    // components to the neighbor behind their cheapest boundary edge.
    if params.min_size > 1 {
        for e in &edges {
            let ra = uf.find(e.a);
            let rb = uf.find(e.b);
            if ra == rb {
                continue;
            }
            if (uf.size[ra as usize] as usize) < params.min_size
                || (uf.size[rb as usize] as usize) < params.min_size
            {
                uf.union(ra, rb, e.weight);
            }
        }
    }

    // Relabel contiguously in raster order of first occurrence.
    let mut labels = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut root_label = vec![u32::MAX; n];
    for i in 0..n {
        let r = uf.find(i as u32) as usize;
        if root_label[r] == u32::MAX {
            root_label[r] = next;
            next += 1;
        }
        labels[i] = root_label[r];
    }
    Ok(SegmentMap {
        height: h,
        width: w,
        labels,
        n_segments: next as usize,
    })
}
