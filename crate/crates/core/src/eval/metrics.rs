use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_points(points: &[Vec<f64>], labels_len: usize) -> Result<usize> {
    if points.len() != labels_len {
        return Err(Error::shape("labels", points.len(), labels_len));
    }
    let dim = points.first().map_or(0, Vec::len);
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::shape("point dimension", dim, p.len()));
    }
    Ok(dim)
}

/// Mean silhouette coefficient under Euclidean distance for two or more
/// labelled clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_points(points, labels.len())?;
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two labelled clusters".into()));
    }
    if let Some((l, s)) = sizes.iter().enumerate().find(|&(_, &s)| s == 1) {
        return Err(Error::InvalidInput(format!("cluster {l} has {s} member; need at least 2")));
    }
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclid(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Multinomial logistic regression with an L2 penalty on the weights (not
/// the intercepts), fitted by damped Newton steps. Features are centred on
/// the training mean and otherwise left in their own units.
#[derive(Clone, Debug)]
pub struct SoftmaxProbe {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(classes - 1) × (dim + 1)`; the last class is the reference.
    weights: DMatrix<f64>,
}

impl SoftmaxProbe {
    pub fn fit(points: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64) -> Result<Self> {
        Self::fit_scaled(points, labels, classes, l2, false)
    }

    /// As [`SoftmaxProbe::fit`]; with `standardize` on features are also
    /// divided by their training standard deviation.
    pub fn fit_scaled(points: &[Vec<f64>], labels: &[usize], classes: usize, l2: f64, standardize: bool) -> Result<Self> {
        let dim = check_points(points, labels.len())?;
        if classes < 2 {
            return Err(Error::InvalidInput("a probe needs at least two classes".into()));
        }
        for c in 0..classes {
            if !labels.contains(&c) {
                return Err(Error::InvalidInput(format!("class {c} has no training samples")));
            }
        }
        let n = points.len();
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for p in points {
            for ((s, v), m) in scale.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if !standardize {
                1.0
            } else if *s > 1e-24 {
                1.0 / s.sqrt()
            } else {
                0.0
            };
        }
        let d1 = dim + 1;
        let x: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let mut r: Vec<f64> = p.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect();
                r.push(1.0);
                r
            })
            .collect();
        let free = classes - 1;
        let np = free * d1;
        let mut w = DVector::<f64>::zeros(np);
        let objective = |w: &DVector<f64>| -> f64 {
            let mut f = 0.0;
            for (xi, &yi) in x.iter().zip(labels) {
                let logits = Self::logits_of(w, xi, free, d1);
                let lse = log_sum_exp(&logits);
                f -= logits[yi] - lse;
            }
            let mut reg = 0.0;
            for c in 0..free {
                for j in 0..dim {
                    reg += w[c * d1 + j] * w[c * d1 + j];
                }
            }
            f + 0.5 * l2 * reg
        };
        let mut f = objective(&w);
        for _ in 0..100 {
            let mut g = DVector::<f64>::zeros(np);
            let mut h = DMatrix::<f64>::zeros(np, np);
            for (xi, &yi) in x.iter().zip(labels) {
                let logits = Self::logits_of(&w, xi, free, d1);
                let lse = log_sum_exp(&logits);
                let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
                for a in 0..free {
                    let ra = p[a] - if yi == a { 1.0 } else { 0.0 };
                    for j in 0..d1 {
                        g[a * d1 + j] += ra * xi[j];
                    }
                    for b in 0..free {
                        let hab = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                        if hab == 0.0 {
                            continue;
                        }
                        for j in 0..d1 {
                            let s = hab * xi[j];
                            for k in 0..d1 {
                                h[(a * d1 + j, b * d1 + k)] += s * xi[k];
                            }
                        }
                    }
                }
            }
            for c in 0..free {
                for j in 0..dim {
                    g[c * d1 + j] += l2 * w[c * d1 + j];
                    h[(c * d1 + j, c * d1 + j)] += l2;
                }
                // keeps the intercept block invertible on separable data
                h[(c * d1 + dim, c * d1 + dim)] += 1e-9;
            }
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => h.lu().solve(&g).ok_or_else(|| Error::InvalidInput("singular probe Hessian".into()))?,
            };
            let mut t = 1.0;
            let mut improved = None;
            for _ in 0..30 {
                let cand = &w - &step * t;
                let fc = objective(&cand);
                if fc <= f {
                    improved = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, fc)) = improved else { break };
            let gain = f - fc;
            w = cand;
            f = fc;
            if gain <= 1e-12 * f.abs().max(1.0) || g.norm() < 1e-10 {
                break;
            }
        }
        let weights = DMatrix::from_row_slice(free, d1, w.as_slice());
        Ok(Self { classes, mean, scale, weights })
    }

    fn logits_of(w: &DVector<f64>, x: &[f64], free: usize, d1: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(free + 1);
        for c in 0..free {
            out.push((0..d1).map(|j| w[c * d1 + j] * x[j]).sum());
        }
        out.push(0.0);
        out
    }

    fn standardize(&self, p: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = p.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect();
        r.push(1.0);
        r
    }

    /// Class log-odds relative to the reference (last) class.
    pub fn logits(&self, p: &[f64]) -> Vec<f64> {
        let x = self.standardize(p);
        let (free, d1) = self.weights.shape();
        let mut out: Vec<f64> = (0..free).map(|c| (0..d1).map(|j| self.weights[(c, j)] * x[j]).sum()).collect();
        out.push(0.0);
        out
    }

    pub fn predict(&self, p: &[f64]) -> usize {
        let l = self.logits(p);
        (0..self.classes).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }

    pub fn accuracy(&self, points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = points.iter().zip(labels).filter(|(p, &y)| self.predict(p) == y).count();
        hits as f64 / points.len().max(1) as f64
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Regularization strength of the linear probe.
pub const PROBE_L2: f64 = 1.0;

/// Stratified fold assignment: each class is shuffled with `seed` and dealt
/// round-robin into `folds` folds.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidInput("need at least two folds".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < folds {
            return Err(Error::InvalidInput(format!(
                "class {c} has {} samples; every one of {folds} folds needs one",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (r, i) in idx.into_iter().enumerate() {
            fold_of[i] = r % folds;
        }
    }
    Ok(fold_of)
}

/// Cross-validated accuracy of a linear probe: `(mean, std)` over folds,
/// with the population standard deviation.
pub fn linear_probe_cv(points: &[Vec<f64>], labels: &[usize], folds: usize, seed: u64) -> Result<(f64, f64)> {
    let accs = linear_probe_folds(points, labels, folds, seed)?;
    let mean = accs.iter().sum::<f64>() / folds as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok((mean, var.sqrt()))
}

/// Held-out accuracy of each fold.
pub fn linear_probe_folds(points: &[Vec<f64>], labels: &[usize], folds: usize, seed: u64) -> Result<Vec<f64>> {
    check_points(points, labels.len())?;
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 || (0..k).any(|c| !labels.contains(&c)) {
        return Err(Error::InvalidInput("probe labels must cover every class from 0".into()));
    }
    let fold_of = stratified_folds(labels, folds, seed)?;
    let mut accs = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..points.len() {
            if fold_of[i] == f {
                xte.push(points[i].clone());
                yte.push(labels[i]);
            } else {
                xtr.push(points[i].clone());
                ytr.push(labels[i]);
            }
        }
        let probe = SoftmaxProbe::fit(&xtr, &ytr, k, PROBE_L2)?;
        accs.push(probe.accuracy(&xte, &yte));
    }
    Ok(accs)
}

/// Ridge added to covariances estimated from fewer samples than dimensions.
pub const FID_RIDGE: f64 = 1e-6;

fn mean_cov(x: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut mu = DVector::zeros(dim);
    for r in x {
        for j in 0..dim {
            mu[j] += r[j] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for r in x {
        for a in 0..dim {
            let da = r[a] - mu[a];
            for b in a..dim {
                cov[(a, b)] += da * (r[b] - mu[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..dim {
        for b in a..dim {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    if n < dim + 1 {
        for a in 0..dim {
            cov[(a, a)] += FID_RIDGE;
        }
    }
    (mu, cov)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `tr((Σ₁Σ₂)^{1/2})` is computed as `tr((AΣ₂A)^{1/2})` with `A = Σ₁^{1/2}`,
/// which has the same eigenvalues and keeps every decomposition symmetric.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::InvalidInput("FID needs at least two samples per side".into()));
    }
    let dim = check_points(real, real.len())?;
    let dim_g = check_points(generated, generated.len())?;
    if dim != dim_g {
        return Err(Error::shape("fid feature dimension", dim, dim_g));
    }
    let (m1, s1) = mean_cov(real, dim);
    let (m2, s2) = mean_cov(generated, dim);
    let a = sym_sqrt(&s1);
    let mut inner = &a * &s2 * &a;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&m1 - &m2).norm_squared();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}
