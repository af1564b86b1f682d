//! L2-regularized logistic regression heads.
//!
//! Two heads sit on top of the perception model: a multinomial transfer
//! head over feature vectors (class-correctness probability assuming the
//! input is in-distribution) and a binary head over per-class Mahalanobis
//! distances (probability the input is in-distribution).
//!
//! Both are fit by full-batch gradient descent with Armijo backtracking, so
//! the recorded objective trace is nonincreasing by construction. Fitting
//! runs in `f64`; the result is stored in the pipeline scalar.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ridge strength on the weights (biases are not penalized).
pub const L2_LAMBDA: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-5;
const MAX_ITERS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Multinomial,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead<R: Real> {
    pub mode: HeadMode,
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[n_out, n_in]`; binary heads have a single row.
    pub weights: Vec<R>,
    pub bias: Vec<R>,
}

/// Fit result: the head plus the recorded objective trace.
#[derive(Debug, Clone)]
pub struct HeadFit<R: Real> {
    pub head: LogisticHead<R>,
    pub objective_trace: Vec<f64>,
}

impl<R: Real> LogisticHead<R> {
    pub fn zeros(mode: HeadMode, n_in: usize, n_out: usize) -> Self {
        LogisticHead {
            mode,
            n_in,
            n_out,
            weights: vec![R::zero(); n_out * n_in],
            bias: vec![R::zero(); n_out],
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
                let mut acc = self.bias[o].f64();
                for (w, v) in row.iter().zip(x) {
                    acc += w.f64() * v;
                }
                acc
            })
            .collect()
    }

    /// Class probabilities of a multinomial head.
    pub fn multinomial_probs(&self, feature: &[R]) -> Result<Vec<f64>> {
        if self.mode != HeadMode::Multinomial {
            return Err(Error::invalid("not a multinomial head"));
        }
        if feature.len() != self.n_in {
            return Err(Error::shape(format!(
                "head expects {} inputs, got {}",
                self.n_in,
                feature.len()
            )));
        }
        let x: Vec<f64> = feature.iter().map(|v| v.f64()).collect();
        Ok(softmax64(&self.logits(&x)))
    }

    /// In-distribution probability of a binary head over a distance vector.
    pub fn binary_prob(&self, input: &[f64]) -> Result<f64> {
        if self.mode != HeadMode::Binary {
            return Err(Error::invalid("not a binary head"));
        }
        if input.len() != self.n_in {
            return Err(Error::shape(format!(
                "head expects {} inputs, got {}",
                self.n_in,
                input.len()
            )));
        }
        Ok(sigmoid(self.logits(input)[0]))
    }

    /// Gradient of `multinomial_probs[class]` with respect to the input:
    /// `p_c (W[c,:] - sum_k p_k W[k,:])`.
    pub fn multinomial_prob_gradient(&self, feature: &[R], class: usize) -> Result<Vec<f64>> {
        let probs = self.multinomial_probs(feature)?;
        if class >= self.n_out {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        let mut mixed = vec![0.0f64; self.n_in];
        for (k, &pk) in probs.iter().enumerate() {
            let row = &self.weights[k * self.n_in..(k + 1) * self.n_in];
            for (m, w) in mixed.iter_mut().zip(row) {
                *m += pk * w.f64();
            }
        }
        let row = &self.weights[class * self.n_in..(class + 1) * self.n_in];
        Ok(row
            .iter()
            .zip(&mixed)
            .map(|(w, m)| probs[class] * (w.f64() - m))
            .collect())
    }

    /// Gradient of `binary_prob` with respect to the input: `p (1 - p) w`.
    pub fn binary_prob_gradient(&self, input: &[f64]) -> Result<Vec<f64>> {
        let p = self.binary_prob(input)?;
        Ok(self.weights.iter().map(|w| p * (1.0 - p) * w.f64()).collect())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Full-batch gradient descent with Armijo backtracking from a zero start.
/// Returns the parameter vector and the per-iteration objective trace.
fn gd_minimize(
    n_params: usize,
    obj_grad: impl Fn(&[f64]) -> (f64, Vec<f64>),
) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0f64; n_params];
    let (mut f, mut g) = obj_grad(&w);
    let mut trace = vec![f];
    let mut lr = 1.0f64;
    for _ in 0..MAX_ITERS {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < GRAD_TOL {
            break;
        }
        // Backtrack until the Armijo condition holds.
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = w.iter().zip(&g).map(|(wv, gv)| wv - lr * gv).collect();
            let (fc, gc) = obj_grad(&cand);
            if fc <= f - 1e-4 * lr * gnorm2 {
                w = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
        lr = (lr * 2.0).min(1e6);
    }
    (w, trace)
}

/// Multinomial logistic regression on feature vectors.
///
/// `features` and `labels` must come from the calibration split; fitting on
/// classifier training data would not calibrate the probabilities.
pub fn fit_transfer_head<R: Real>(
    features: &[Vec<R>],
    labels: &[usize],
    n_classes: usize,
) -> Result<HeadFit<R>> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid("features/labels mismatch or empty"));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::invalid(
            "calibration data contains a single class; cannot fit a transfer head",
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {l} >= n_classes {n_classes}")));
    }
    let dim = features[0].len();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().map(|v| v.f64()).collect())
        .collect();
    let n = x.len() as f64;
    let k = n_classes;

    // Parameters packed as [weights (k*dim), biases (k)].
    let obj_grad = |p: &[f64]| -> (f64, Vec<f64>) {
        let (wts, bias) = p.split_at(k * dim);
        let mut obj = 0.0f64;
        let mut grad = vec![0.0f64; p.len()];
        for (xi, &yi) in x.iter().zip(labels) {
            let logits: Vec<f64> = (0..k)
                .map(|c| {
                    bias[c]
                        + wts[c * dim..(c + 1) * dim]
                            .iter()
                            .zip(xi)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                })
                .collect();
            let probs = softmax64(&logits);
            obj -= probs[yi].max(1e-300).ln();
            for c in 0..k {
                let coef = probs[c] - (c == yi) as usize as f64;
                for (gslot, v) in grad[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                    *gslot += coef * v;
                }
                grad[k * dim + c] += coef;
            }
        }
        obj /= n;
        for g in &mut grad {
            *g /= n;
        }
        let mut reg = 0.0;
        for (i, w) in wts.iter().enumerate() {
            reg += w * w;
            grad[i] += L2_LAMBDA * w;
        }
        (obj + 0.5 * L2_LAMBDA * reg, grad)
    };

    let (p, trace) = gd_minimize(k * dim + k, obj_grad);
    Ok(HeadFit {
        head: LogisticHead {
            mode: HeadMode::Multinomial,
            n_in: dim,
            n_out: k,
            weights: p[..k * dim].iter().map(|&v| R::of(v)).collect(),
            bias: p[k * dim..].iter().map(|&v| R::of(v)).collect(),
        },
        objective_trace: trace,
    })
}

/// Binary logistic regression on per-class distance vectors;
/// `in_distribution[i]` marks positives.
///
/// Distance inputs can span orders of magnitude, which stalls plain
/// gradient descent; this head is fit by damped Newton steps instead
/// (Armijo line search along the Newton direction keeps the objective
/// trace nonincreasing).
pub fn fit_ood_head<R: Real>(
    distances: &[Vec<f64>],
    in_distribution: &[bool],
) -> Result<HeadFit<R>> {
    if distances.is_empty() || distances.len() != in_distribution.len() {
        return Err(Error::invalid("distances/labels mismatch or empty"));
    }
    if in_distribution.iter().all(|&b| b) || in_distribution.iter().all(|&b| !b) {
        return Err(Error::invalid(
            "one-sided labels; need both in- and out-of-distribution examples",
         ));
    }
    let dim = distances[0].len();
    let n = distances.len() as f64;
    let np = dim + 1;

    // Objective, gradient, and Hessian of the penalized log-loss.
    let eval = |p: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let (wts, bias) = p.split_at(dim);
        let mut obj = 0.0f64;
        let mut grad = vec![0.0f64; np];
        let mut hess = vec![0.0f64; np * np];
        for (di, &pos) in distances.iter().zip(in_distribution) {
            let z = bias[0] + wts.iter().zip(di).map(|(w, v)| w * v).sum::<f64>();
            let prob = sigmoid(z);
            let y = pos as usize as f64;
            // Numerically stable binary cross-entropy.
            obj += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let coef = prob - y;
            let curv = (prob * (1.0 - prob)).max(1e-12);
            for (a, &va) in di.iter().chain(std::iter::once(&1.0)).enumerate() {
                grad[a] += coef * va;
                for (b, &vb) in di.iter().chain(std::iter::once(&1.0)).enumerate() {
                    hess[a * np + b] += curv * va * vb;
                }
            }
        }
        obj /= n;
        for g in &mut grad {
            *g /= n;
        }
        for h in &mut hess {
            *h /= n;
        }
        let mut reg = 0.0;
        for (i, w) in wts.iter().enumerate() {
            reg += w * w;
            grad[i] += L2_LAMBDA * w;
            hess[i * np + i] += L2_LAMBDA;
        }
        (obj + 0.5 * L2_LAMBDA * reg, grad, hess)
    };

    let mut p = vec![0.0f64; np];
    let (mut f, mut g, mut h) = eval(&p);
    let mut trace = vec![f];
    for _ in 0..200 {
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < GRAD_TOL {
            break;
        }
        // Newton direction; fall back to the gradient if the solve fails.
        let mut hreg = h.clone();
        let dir = loop {
            match crate::gmm::spd_solve(&hreg, np, &g) {
                Some(d) => break d,
                None => {
                    for i in 0..np {
                        hreg[i * np + i] += 1e-8 + hreg[i * np + i].abs() * 1e-6;
                    }
                }
            }
        };
        let mut lr = 1.0f64;
        let gd: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = p.iter().zip(&dir).map(|(pv, dv)| pv - lr * dv).collect();
            let (fc, gc, hc) = eval(&cand);
            if fc <= f - 1e-4 * lr * gd {
                p = cand;
                f = fc;
                g = gc;
                h = hc;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
    }

    Ok(HeadFit {
        head: LogisticHead {
            mode: HeadMode::Binary,
            n_in: dim,
            n_out: 1,
            weights: p[..dim].iter().map(|&v| R::of(v)).collect(),
            bias: vec![R::of(p[dim])],
        },
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    #[test]
    fn zero_multinomial_head_is_uniform() {
        let head = LogisticHead::<f32>::zeros(HeadMode::Multinomial, 4, 5);
        let probs = head.multinomial_probs(&[0.3, -1.0, 2.0, 0.0]).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_binary_head_is_half() {
        let head = LogisticHead::<f32>::zeros(HeadMode::Binary, 3, 1);
        assert_eq!(head.binary_prob(&[10.0, -5.0, 0.1]).unwrap(), 0.5);
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let mut rng = stream(1, "logit", 0);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let center = if c == 0 { -2.0 } else { 2.0 };
            features.push(vec![
                center + 0.3 * normal(&mut rng),
                -center + 0.3 * normal(&mut rng),
            ]);
            labels.push(c);
        }
        let fit = fit_transfer_head::<f64>(&features, &labels, 2).unwrap();
        for (f, &l) in features.iter().zip(&labels) {
            let probs = fit.head.multinomial_probs(f).unwrap();
            let pred = if probs[1] > probs[0] { 1 } else { 0 };
            assert_eq!(pred, l);
            assert!(probs[l] > 0.5, "probability {} not confident", probs[l]);
        }
    }

    #[test]
    fn objective_trace_nonincreasing() {
        let mut rng = stream(2, "logit", 0);
        let features: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![normal(&mut rng), normal(&mut rng), normal(&mut rng)])
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let fit = fit_transfer_head::<f64>(&features, &labels, 3).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose {} -> {}", w[0], w[1]);
        }
        assert!(fit.objective_trace.len() > 1);
    }

    #[test]
    fn single_class_rejected() {
        let features = vec![vec![0.0f32], vec![1.0]];
        assert!(fit_transfer_head::<f32>(&features, &[1, 1], 2).is_err());
        let dists = vec![vec![0.5], vec![0.7]];
        assert!(fit_ood_head::<f32>(&dists, &[true, true]).is_err());
    }

    /// Rank-based AUC of scores against boolean labels.
    fn auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut pairs: Vec<(f64, bool)> =
            scores.iter().cloned().zip(labels.iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        let mut rank_sum = 0.0;
        for (i, (_, l)) in pairs.iter().enumerate() {
            if *l {
                rank_sum += (i + 1) as f64;
            }
        }
        (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
    }

    #[test]
    fn ood_head_separates_scaled_distances() {
        // Negatives at 10x the positive distances; held-out AUC > 0.95.
        let mut rng = stream(3, "ood", 0);
        let gen = |scale: f64, rng: &mut crate::rng::Stream| -> Vec<f64> {
            (0..3).map(|_| scale * (1.0 + 0.3 * normal(rng).abs())).collect()
        };
        let mut train_d = Vec::new();
        let mut train_l = Vec::new();
        let mut test_d = Vec::new();
        let mut test_l = Vec::new();
        for i in 0..120 {
            let pos = i % 2 == 0;
            let d = gen(if pos { 1.0 } else { 10.0 }, &mut rng);
            if i < 80 {
                train_d.push(d);
                train_l.push(pos);
            } else {
                test_d.push(d);
                test_l.push(pos);
            }
        }
        let fit = fit_ood_head::<f64>(&train_d, &train_l).unwrap();
        let scores: Vec<f64> = test_d
            .iter()
            .map(|d| fit.head.binary_prob(d).unwrap())
            .collect();
        let a = auc(&scores, &test_l);
        assert!(a > 0.95, "AUC {a}");
    }

    #[test]
    fn negative_weights_make_prob_decrease_in_distances() {
        let head = LogisticHead::<f64> {
            mode: HeadMode::Binary,
            n_in: 3,
            n_out: 1,
            weights: vec![-0.5, -1.0, -0.25],
            bias: vec![2.0],
        };
        let d0 = vec![1.0, 2.0, 3.0];
        let d1: Vec<f64> = d0.iter().map(|v| v + 0.5).collect();
        assert!(head.binary_prob(&d1).unwrap() < head.binary_prob(&d0).unwrap());
    }

    #[test]
    fn prob_gradients_match_finite_differences() {
        let mut rng = stream(4, "logit-fd", 0);
        let features: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| normal(&mut rng)).collect())
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let fit = fit_transfer_head::<f64>(&features, &labels, 3).unwrap();
        let mut x: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let g = fit.head.multinomial_prob_gradient(&x, 1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let orig = x[i];
            x[i] = orig + h;
            let fp = fit.head.multinomial_probs(&x).unwrap()[1];
            x[i] = orig - h;
            let fm = fit.head.multinomial_probs(&x).unwrap()[1];
            x[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "dim {i}: {} vs {fd}", g[i]);
        }

        let dists = vec![vec![1.0, 2.0], vec![5.0, 7.0], vec![1.5, 2.5], vec![6.0, 8.0]];
        let fit = fit_ood_head::<f64>(&dists, &[true, false, true, false]).unwrap();
        let mut d = vec![2.0, 3.0];
        let g = fit.head.binary_prob_gradient(&d).unwrap();
        for i in 0..2 {
            let orig = d[i];
            d[i] = orig + h;
            let fp = fit.head.binary_prob(&d).unwrap();
            d[i] = orig - h;
            let fm = fit.head.binary_prob(&d).unwrap();
            d[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6, "dim {i}: {} vs {fd}", g[i]);
        }
    }
}
