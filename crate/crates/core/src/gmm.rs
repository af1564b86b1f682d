//! Per-class Gaussian mixtures over feature vectors and Mahalanobis
//! distances to them.
//!
//! Each class gets its own mixture fit by expectation-maximization on that
//! class's features. Fitting runs in `f64` and stores parameters in the
//! pipeline scalar at the end; inverse covariances and log-determinants are
//! cached in `f64`.

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Real;
use rand::Rng;

const EM_MAX_ITERS: usize = 200;
const EM_REL_TOL: f64 = 1e-7;
/// Ridge scale: `1e-6 * trace(cov) / dim` is added to each diagonal.
const RIDGE_SCALE: f64 = 1e-6;

/// One Gaussian component with cached solve data.
#[derive(Debug, Clone, PartialEq)]
pub struct Component<R: Real> {
    pub weight: R,
    pub mean: Vec<R>,
    /// Row-major `dim x dim` covariance (after ridge regularization).
    pub cov: Vec<R>,
    /// Cached inverse of `cov`, kept in f64.
    pub cov_inv: Vec<f64>,
    /// Cached `ln det cov`, kept in f64.
    pub log_det: f64,
}

/// Per-class Gaussian mixtures, one entry per class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussianMixture<R: Real> {
    pub dim: usize,
    pub classes: Vec<Vec<Component<R>>>,
}

/// Fit result: the mixture plus per-class log-likelihood traces.
#[derive(Debug, Clone)]
pub struct GmmFit<R: Real> {
    pub mixture: ClassGaussianMixture<R>,
    /// Recorded total log-likelihood after each EM iteration, per class.
    pub loglik_traces: Vec<Vec<f64>>,
}

/// Symmetric positive-definite Cholesky factorization, `a = l l^T`.
/// Returns the lower factor, or `None` if a pivot is not positive.
fn cholesky(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut acc = a[i * dim + j];
            for k in 0..j {
                acc -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l[i * dim + i] = acc.sqrt();
            } else {
                l[i * dim + j] = acc / l[j * dim + j];
            }
        }
    }
    Some(l)
}

/// Solve `l l^T x = b` given the lower Cholesky factor.
fn cholesky_solve(l: &[f64], dim: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; dim];
    for i in 0..dim {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[i * dim + k] * y[k];
        }
        y[i] = acc / l[i * dim + i];
    }
    let mut x = vec![0.0f64; dim];
    for i in (0..dim).rev() {
        let mut acc = y[i];
        for k in i + 1..dim {
            acc -= l[k * dim + i] * x[k];
        }
        x[i] = acc / l[i * dim + i];
    }
    x
}

fn inverse_from_cholesky(l: &[f64], dim: usize) -> Vec<f64> {
    let mut inv = vec![0.0f64; dim * dim];
    let mut e = vec![0.0f64; dim];
    for j in 0..dim {
        e[j] = 1.0;
        let col = cholesky_solve(l, dim, &e);
        e[j] = 0.0;
        for i in 0..dim {
            inv[i * dim + j] = col[i];
        }
    }
    // Symmetrize against round-off.
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (inv[i * dim + j] + inv[j * dim + i]);
            inv[i * dim + j] = v;
            inv[j * dim + i] = v;
        }
    }
    inv
}

fn log_det_from_cholesky(l: &[f64], dim: usize) -> f64 {
    (0..dim).map(|i| l[i * dim + i].ln()).sum::<f64>() * 2.0
}

/// Solve `a x = b` for symmetric positive-definite `a`; `None` when the
/// factorization fails.
pub fn spd_solve(a: &[f64], dim: usize, b: &[f64]) -> Option<Vec<f64>> {
    let l = cholesky(a, dim)?;
    Some(cholesky_solve(&l, dim, b))
}

/// f64 working copy of a component during fitting.
struct WorkComponent {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl WorkComponent {
    /// Apply the ridge, factorize, and cache the log-determinant.
    fn finalize(&mut self, dim: usize) -> Result<()> {
        let trace: f64 = (0..dim).map(|i| self.cov[i * dim + i]).sum();
        let ridge = RIDGE_SCALE * trace / dim as f64;
        for i in 0..dim {
            self.cov[i * dim + i] += ridge;
        }
        // Escalate the ridge if the factorization still fails.
        let mut boost = ridge.max(1e-12);
        loop {
            match cholesky(&self.cov, dim) {
                Some(l) => {
                    self.log_det = log_det_from_cholesky(&l, dim);
                    self.chol = l;
                    return Ok(());
                }
                None => {
                    for i in 0..dim {
                        self.cov[i * dim + i] += boost;
                    }
                    boost *= 10.0;
                    if boost > 1e6 {
                        return Err(Error::NonFinite(
                            "covariance could not be regularized".into(),
                        ));
                    }
                }
            }
        }
    }

    fn log_density(&self, x: &[f64], dim: usize) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let sol = cholesky_solve(&self.chol, dim, &diff);
        let q: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
        -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + q)
    }
}

/// Closed-form single-Gaussian fit: sample mean and ML covariance plus
/// ridge. Classes with fewer than `dim + 1` samples cannot support a full
/// covariance; they fall back to the ridge-only spherical estimate
/// `(trace(S)/dim) I`.
fn fit_single(points: &[Vec<f64>], dim: usize) -> Result<WorkComponent> {
    let n = points.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0f64; dim * dim];
    for p in points {
        let diff: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] += diff[i] * diff[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            cov[i * dim + j] /= n;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    if points.len() < dim + 1 {
        let spherical = (0..dim).map(|i| cov[i * dim + i]).sum::<f64>() / dim as f64;
        cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = spherical.max(1e-12);
        }
    }
    let mut comp = WorkComponent {
        weight: 1.0,
        mean,
        cov,
        chol: Vec::new(),
        log_det: 0.0,
    };
    comp.finalize(dim)?;
    Ok(comp)
}

/// k-means++-style selection of initial means from the data points.
fn seed_means(points: &[Vec<f64>], k: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let mut means = Vec::with_capacity(k);
    means.push(points[rng.gen_range(0..points.len())].clone());
    while means.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                means
                    .iter()
                    .map(|m| {
                        p.iter()
                            .zip(m)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points coincide with a chosen mean; duplicate one.
            means.push(points[rng.gen_range(0..points.len())].clone());
            continue;
        }
        let mut draw = rng.gen_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if draw < d {
                chosen = i;
                break;
            }
            draw -= d;
        }
        means.push(points[chosen].clone());
    }
    means
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// EM on one class's points; returns components and the log-likelihood trace.
fn fit_class(
    points: &[Vec<f64>],
    dim: usize,
    k: usize,
    rng: &mut Stream,
) -> Result<(Vec<WorkComponent>, Vec<f64>)> {
    // Initial components: seeded means, pooled class covariance, uniform weights.
    let pooled = fit_single(points, dim)?;
    let mut comps: Vec<WorkComponent> = seed_means(points, k, rng)
        .into_iter()
        .map(|mean| {
            let mut c = WorkComponent {
                weight: 1.0 / k as f64,
                mean,
                cov: pooled.cov.clone(),
                chol: Vec::new(),
                log_det: 0.0,
            };
            c.finalize(dim).map(|_| c)
        })
        .collect::<Result<_>>()?;

    let n = points.len();
    let mut resp = vec![0.0f64; n * k];
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITERS {
        // E-step in the log domain.
        let mut ll = 0.0f64;
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = comps
                .iter()
                .map(|c| c.weight.ln() + c.log_density(p, dim))
                .collect();
            let norm = log_sum_exp(&logs);
            ll += norm;
            for (j, lg) in logs.iter().enumerate() {
                resp[i * k + j] = (lg - norm).exp();
            }
        }
        trace.push(ll);

        // M-step.
        for (j, comp) in comps.iter_mut().enumerate() {
            let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nj <= 1e-12 {
                // Dead component: keep its parameters, zero its weight.
                comp.weight = 1e-12;
                continue;
            }
            comp.weight = nj / n as f64;
            let mut mean = vec![0.0f64; dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + j];
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += r * v;
                }
            }
            for m in &mut mean {
                *m /= nj;
            }
            let mut cov = vec![0.0f64; dim * dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + j];
                let diff: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
                for a in 0..dim {
                    for b in 0..=a {
                        cov[a * dim + b] += r * diff[a] * diff[b];
                    }
                }
            }
            for a in 0..dim {
                for b in 0..=a {
                    cov[a * dim + b] /= nj;
                    cov[b * dim + a] = cov[a * dim + b];
                }
            }
            comp.mean = mean;
            comp.cov = cov;
            comp.finalize(dim)?;
        }

        let rel = (trace.last().unwrap() - prev_ll).abs()
            / prev_ll.abs().max(f64::MIN_POSITIVE);
        if prev_ll.is_finite() && rel < EM_REL_TOL {
            break;
        }
        prev_ll = *trace.last().unwrap();
    }
    Ok((comps, trace))
}

/// Fit one mixture per class id on that class's feature vectors.
///
/// Deterministic given `seed`; class `c` draws from an independent stream
/// derived from `(seed, c)`.
pub fn fit_class_gaussians<R: Real>(
    features: &[Vec<R>],
    labels: &[usize],
    n_classes: usize,
    components_per_class: usize,
    seed: u64,
) -> Result<GmmFit<R>> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if components_per_class < 1 {
        return Err(Error::invalid("components_per_class must be >= 1"));
    }
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("empty feature vectors"));
    }
    let mut classes = Vec::with_capacity(n_classes);
    let mut traces = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let points: Vec<Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f.iter().map(|v| v.f64()).collect())
            .collect();
        if points.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let (comps, trace) = if components_per_class == 1 {
            let comp = fit_single(&points, dim)?;
            let ll: f64 = points.iter().map(|p| comp.log_density(p, dim)).sum();
            (vec![comp], vec![ll])
        } else {
            let mut rng = stream(seed, "gmm-class", c as u64);
            fit_class(&points, dim, components_per_class, &mut rng)?
        };
        // Renormalize weights (dead components may have been floored).
        let wsum: f64 = comps.iter().map(|c| c.weight).sum();
        classes.push(
            comps
                .into_iter()
                .map(|wc| {
                    // Inverse and log-det are cached from the f64 covariance.
                    Component {
                        weight: R::of(wc.weight / wsum),
                        mean: wc.mean.iter().map(|&v| R::of(v)).collect(),
                        cov: wc.cov.iter().map(|&v| R::of(v)).collect(),
                        cov_inv: inverse_from_cholesky(&wc.chol, dim),
                        log_det: wc.log_det,
                    }
                })
                .collect(),
        );
        traces.push(trace);
    }
    Ok(GmmFit {
        mixture: ClassGaussianMixture { dim, classes },
        loglik_traces: traces,
    })
}

impl<R: Real> ClassGaussianMixture<R> {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Per class, the minimum over components of the Mahalanobis distance
    /// `sqrt((x - mu)^T cov^-1 (x - mu))`.
    pub fn mahalanobis_distances(&self, feature: &[R]) -> Result<Vec<f64>> {
        let (dists, _) = self.mahalanobis_with_argmin(feature)?;
        Ok(dists)
    }

    /// Distances plus the index of the achieving component per class,
    /// which the gradient path needs to stay on the same branch.
    pub fn mahalanobis_with_argmin(&self, feature: &[R]) -> Result<(Vec<f64>, Vec<usize>)> {
        if feature.len() != self.dim {
            return Err(Error::shape(format!(
                "feature has {} dims, mixture expects {}",
                feature.len(),
                self.dim
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        let x: Vec<f64> = feature.iter().map(|v| v.f64()).collect();
        let mut dists = Vec::with_capacity(self.classes.len());
        let mut argmins = Vec::with_capacity(self.classes.len());
        for comps in &self.classes {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, comp) in comps.iter().enumerate() {
                let diff: Vec<f64> = x
                    .iter()
                    .zip(&comp.mean)
                    .map(|(a, b)| a - b.f64())
                    .collect();
                let mut q = 0.0f64;
                for a in 0..self.dim {
                    let row = &comp.cov_inv[a * self.dim..(a + 1) * self.dim];
                    let mut acc = 0.0;
                    for b in 0..self.dim {
                        acc += row[b] * diff[b];
                    }
                    q += diff[a] * acc;
                }
                let d = q.max(0.0).sqrt();
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            dists.push(best);
            argmins.push(best_j);
        }
        Ok((dists, argmins))
    }

    /// Gradient of the class distances with respect to the feature vector:
    /// rows are `cov^-1 (x - mu) / d` of the achieving component. A zero
    /// distance contributes a zero row.
    pub fn distance_gradients(&self, feature: &[R]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (dists, argmins) = self.mahalanobis_with_argmin(feature)?;
        let x: Vec<f64> = feature.iter().map(|v| v.f64()).collect();
        let mut grads = Vec::with_capacity(self.classes.len());
        for (c, comps) in self.classes.iter().enumerate() {
            let comp = &comps[argmins[c]];
            let d = dists[c];
            if d <= 1e-12 {
                grads.push(vec![0.0; self.dim]);
                continue;
            }
            let diff: Vec<f64> = x
                .iter()
                .zip(&comp.mean)
                .map(|(a, b)| a - b.f64())
                .collect();
            let mut g = vec![0.0f64; self.dim];
            for a in 0..self.dim {
                let row = &comp.cov_inv[a * self.dim..(a + 1) * self.dim];
                g[a] = row.iter().zip(&diff).map(|(m, v)| m * v).sum::<f64>() / d;
            }
            grads.push(g);
        }
        Ok((dists, grads))
    }
}
