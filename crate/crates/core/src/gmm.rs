//! Diagonal-covariance Gaussian mixtures fitted by EM, and the classical
//! Fisher vector encoding of a patch bag with respect to mixture weights,
//! means, and variances, with the signed-sqrt + L2 normalization chain.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::PatchSet;
use crate::mathx;
use crate::tensor::Tensor;

/// Lower bound applied to every variance after each M-step.
pub const VAR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GmmError {
    #[error("need at least {k} rows to fit {k} components, got {rows}")]
    TooFewRows { rows: usize, k: usize },
    #[error("component count must be >= 1")]
    ZeroComponents,
    #[error("dimension mismatch: model {model} vs input {input}")]
    DimensionMismatch { model: usize, input: usize },
}

/// A fitted mixture: weights on the simplex, K×D means, K×D variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub variances: Tensor,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Fisher vector length: K weights + K×D means + K×D variances.
    pub fn fisher_dim(&self) -> usize {
        self.k() * (2 * self.dim() + 1)
    }

    /// Per-component log densities `log(w_k) + log N(x; mu_k, sigma_k^2)`.
    fn component_log_joint(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let half_ln_2pi = 0.5 * mathx::ln(2.0 * core::f64::consts::PI);
        for k in 0..self.k() {
            let mut acc = mathx::ln(self.weights[k]);
            for j in 0..d {
                let var = self.variances.get(k, j);
                let diff = x[j] - self.means.get(k, j);
                acc -= half_ln_2pi + 0.5 * mathx::ln(var) + 0.5 * diff * diff / var;
            }
            out[k] = acc;
        }
    }

    /// Log-likelihood of one row under the mixture.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut lj = vec![0.0; self.k()];
        self.component_log_joint(x, &mut lj);
        log_sum_exp(&lj)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|&x| mathx::exp(x - m)).sum();
    m + mathx::ln(s)
}

/// Soft assignment of one row to the mixture components, computed in the
/// log domain so far-away points do not underflow to 0/0.
pub fn responsibilities(model: &GmmModel, x: &[f64]) -> Result<Vec<f64>, GmmError> {
    if x.len() != model.dim() {
        return Err(GmmError::DimensionMismatch {
            model: model.dim(),
            input: x.len(),
        });
    }
    let mut lj = vec![0.0; model.k()];
    model.component_log_joint(x, &mut lj);
    let lse = log_sum_exp(&lj);
    Ok(lj.iter().map(|&l| mathx::exp(l - lse)).collect())
}

/// EM fit result: the model plus the per-iteration mean log-likelihood
/// trace (first entry is the value after initialization).
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
    pub reseeded_components: usize,
}

/// Fits a diagonal-covariance GMM with k-means++ seeding (10 k-means
/// refinement iterations) followed by EM until the per-row log-likelihood
/// improves by less than `tol` or `max_iters` is reached. Empty components
/// are reseeded from the row farthest from all current means.
pub fn em_fit(
    data: &Tensor,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<EmFit, GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    let n = data.rows();
    let d = data.cols();
    if n < k {
        return Err(GmmError::TooFewRows { rows: n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = kmeans_pp(data, k, &mut rng);
    let assignments = kmeans_refine(data, &mut means, 10);

    // Initial mixture statistics from the k-means partition.
    let mut weights = vec![0.0f64; k];
    let mut variances = Tensor::filled(k, d, VAR_FLOOR);
    {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut sums = Tensor::zeros(k, d);
        for (i, &a) in assignments.iter().enumerate() {
            for j in 0..d {
                sums.set(a, j, sums.get(a, j) + (data.get(i, j) - means.get(a, j)).powi(2));
            }
        }
        for c in 0..k {
            weights[c] = (counts[c] as f64).max(1.0) / n as f64;
            for j in 0..d {
                let var = if counts[c] > 0 {
                    sums.get(c, j) / counts[c] as f64
                } else {
                    1.0
                };
                variances.set(c, j, var.max(VAR_FLOOR));
            }
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }

    let mut model = GmmModel {
        weights,
        means,
        variances,
    };
    let mut trace = Vec::new();
    let mut reseeded = 0usize;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut gamma = Tensor::zeros(n, k);

    for _iter in 0..max_iters {
        // E-step.
        let mut ll = 0.0;
        let mut lj = vec![0.0; k];
        for i in 0..n {
            model.component_log_joint(data.row_slice(i), &mut lj);
            let lse = log_sum_exp(&lj);
            ll += lse;
            for c in 0..k {
                gamma.set(i, c, mathx::exp(lj[c] - lse));
            }
        }
        ll /= n as f64;
        trace.push(ll);
        if ll - prev_ll < tol && prev_ll != f64::NEG_INFINITY {
            break;
        }
        prev_ll = ll;

        // M-step with variance floor.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| gamma.get(i, c)).sum();
            if nk < 1e-10 {
                reseed_component(&mut model, data, c);
                reseeded += 1;
                log::warn!("EM component {c} went empty; reseeded from farthest row");
                continue;
            }
            for j in 0..d {
                let mu: f64 = (0..n).map(|i| gamma.get(i, c) * data.get(i, j)).sum::<f64>() / nk;
                model.means.set(c, j, mu);
            }
            for j in 0..d {
                let var: f64 = (0..n)
                    .map(|i| {
                        let diff = data.get(i, j) - model.means.get(c, j);
                        gamma.get(i, c) * diff * diff
                    })
                    .sum::<f64>()
                    / nk;
                model.variances.set(c, j, var.max(VAR_FLOOR));
            }
            model.weights[c] = nk / n as f64;
        }
        let total: f64 = model.weights.iter().sum();
        for w in model.weights.iter_mut() {
            *w /= total;
        }
    }

    Ok(EmFit {
        model,
        log_likelihood_trace: trace,
        reseeded_components: reseeded,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn kmeans_pp(data: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = data.rows();
    let d = data.cols();
    let mut centers = Tensor::zeros(k, d);
    let first = rng.random_range(0..n);
    for j in 0..d {
        centers.set(0, j, data.get(first, j));
    }
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row_slice(i), centers.row_slice(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            // All points coincide with chosen centers; fall back to uniform.
            rng.random_range(0..n)
        } else {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        for j in 0..d {
            centers.set(c, j, data.get(pick, j));
        }
        for i in 0..n {
            let dn = sq_dist(data.row_slice(i), centers.row_slice(c));
            if dn < min_d2[i] {
                min_d2[i] = dn;
            }
        }
    }
    centers
}

fn kmeans_refine(data: &Tensor, centers: &mut Tensor, iters: usize) -> Vec<usize> {
    let n = data.rows();
    let d = data.cols();
    let k = centers.rows();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let row = data.row_slice(i);
            let mut best = 0;
            let mut best_d = sq_dist(row, centers.row_slice(0));
            for c in 1..k {
                let dc = sq_dist(row, centers.row_slice(c));
                if dc < best_d {
                    best_d = dc;
                    best = c;
                }
            }
            *a = best;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Tensor::zeros(k, d);
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums.set(a, j, sums.get(a, j) + data.get(i, j));
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Move the empty center onto the row farthest from its
                // nearest center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (0..k)
                            .map(|cc| sq_dist(data.row_slice(a), centers.row_slice(cc)))
                            .fold(f64::INFINITY, f64::min);
                        let db = (0..k)
                            .map(|cc| sq_dist(data.row_slice(b), centers.row_slice(cc)))
                            .fold(f64::INFINITY, f64::min);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                for j in 0..d {
                    centers.set(c, j, data.get(far, j));
                }
            } else {
                for j in 0..d {
                    centers.set(c, j, sums.get(c, j) / counts[c] as f64);
                }
            }
        }
    }
    assign
}

fn reseed_component(model: &mut GmmModel, data: &Tensor, c: usize) {
    let n = data.rows();
    let k = model.k();
    let far = (0..n)
        .max_by(|&a, &b| {
            let da = (0..k)
                .map(|cc| sq_dist(data.row_slice(a), model.means.row_slice(cc)))
                .fold(f64::INFINITY, f64::min);
            let db = (0..k)
                .map(|cc| sq_dist(data.row_slice(b), model.means.row_slice(cc)))
                .fold(f64::INFINITY, f64::min);
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let d = data.cols();
    // Global per-dimension variance as a fresh spread.
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n)
            .map(|i| (data.get(i, j) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        model.means.set(c, j, data.get(far, j));
        model.variances.set(c, j, var.max(VAR_FLOOR));
    }
    model.weights[c] = 1.0 / n as f64;
    let total: f64 = model.weights.iter().sum();
    for w in model.weights.iter_mut() {
        *w /= total;
    }
}

/// Fisher vector of a patch bag: per-component gradient statistics of the
/// average log-likelihood, Fisher-normalized. Layout is
/// `[weight block K | mean block K×D | variance block K×D]`, row-major over
/// (component, dimension) within the matrix blocks.
pub fn fisher_encode(model: &GmmModel, patches: &PatchSet) -> Result<Vec<f64>, GmmError> {
    if patches.dim() != model.dim() {
        return Err(GmmError::DimensionMismatch {
            model: model.dim(),
            input: patches.dim(),
        });
    }
    let k = model.k();
    let d = model.dim();
    let n = patches.n_patches() as f64;
    let mut fv = vec![0.0f64; model.fisher_dim()];
    let (w_block, rest) = fv.split_at_mut(k);
    let (mu_block, var_block) = rest.split_at_mut(k * d);

    let mut x = vec![0.0f64; d];
    for patch in patches.patches() {
        for (xv, &p) in x.iter_mut().zip(patch.iter()) {
            *xv = p as f64;
        }
        let gamma = responsibilities(model, &x)?;
        for c in 0..k {
            let g = gamma[c];
            let w = model.weights[c];
            w_block[c] += (g - w) / mathx::sqrt(w);
            for j in 0..d {
                let sigma = mathx::sqrt(model.variances.get(c, j));
                let z = (x[j] - model.means.get(c, j)) / sigma;
                mu_block[c * d + j] += g * z / mathx::sqrt(w);
                var_block[c * d + j] += g * (z * z - 1.0) / mathx::sqrt(2.0 * w);
            }
        }
    }
    for v in fv.iter_mut() {
        *v /= n;
    }
    Ok(fv)
}

/// Signed square root, elementwise: `sign(v) * sqrt(|v|)`.
pub fn power_normalize(v: &mut [f64]) {
    for x in v.iter_mut() {
        let s = if *x < 0.0 { -1.0 } else { 1.0 };
        *x = s * mathx::sqrt(mathx::abs(*x));
    }
}

/// Scales to unit L2 norm. A zero vector is returned unchanged and flagged
/// by returning `true`.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let norm = mathx::sqrt(v.iter().map(|x| x * x).sum());
    if norm == 0.0 {
        log::warn!("l2_normalize: zero vector left unchanged");
        return true;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    false
}
