//! Fit a diagonal Gaussian mixture prior to a set of images with EM.
//!
//! Initialization is k-means++ seeding followed by one hard assignment to
//! set weights, means, and variances. EM then runs in log space with a
//! variance floor. The log-likelihood trace is recorded per iteration; EM
//! guarantees it never decreases while the floor is inactive.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel::run_indexed;
use crate::prior::MixturePrior;
use crate::rng::RngStream;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub components: usize,
    pub max_iters: usize,
    /// Stop when the log-likelihood gain falls below tol * (1 + |ll|).
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { components: 2, max_iters: 200, tol: 1e-8, seed: 0, variance_floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub prior: MixturePrior,
    /// Total data log-likelihood before each EM update, plus a final entry
    /// for the returned parameters.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Params {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

fn log_component(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&xd, &md), &vd) in x.iter().zip(mean).zip(var) {
        let d = xd - md;
        acc += (vd.ln() + LN_2PI) + d * d / vd;
    }
    -0.5 * acc
}

fn point_log_likelihood(x: &[f64], p: &Params) -> f64 {
    let logs: Vec<f64> = (0..p.weights.len())
        .map(|j| p.weights[j].ln() + log_component(x, &p.means[j], &p.vars[j]))
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, later centers with probability
/// proportional to squared distance from the nearest chosen center.
fn kmeans_pp_centers(points: &[&[f64]], j: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(j);
    centers.push(points[rng.next_index(points.len())].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < j {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with a center; any choice is equivalent.
            rng.next_index(points.len())
        };
        centers.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, centers.last().unwrap()));
        }
    }
    centers
}

fn init_params(points: &[&[f64]], j: usize, floor: f64, rng: &mut RngStream) -> Params {
    let dim = points[0].len();
    let centers = kmeans_pp_centers(points, j, rng);
    let mut counts = vec![0usize; j];
    let mut sums = vec![vec![0.0; dim]; j];
    let mut sqsums = vec![vec![0.0; dim]; j];
    for p in points {
        let nearest = (0..j)
            .min_by(|&a, &b| {
                squared_distance(p, &centers[a])
                    .partial_cmp(&squared_distance(p, &centers[b]))
                    .expect("distances are finite")
            })
            .expect("at least one center");
        counts[nearest] += 1;
        for d in 0..dim {
            sums[nearest][d] += p[d];
            sqsums[nearest][d] += p[d] * p[d];
        }
    }
    // Global variance backstop for empty or single-point clusters.
    let n = points.len() as f64;
    let mut global_var = vec![0.0; dim];
    {
        let mut mean = vec![0.0; dim];
        for p in points {
            for d in 0..dim {
                mean[d] += p[d];
            }
        }
        for d in 0..dim {
            mean[d] /= n;
        }
        for p in points {
            for d in 0..dim {
                let diff = p[d] - mean[d];
                global_var[d] += diff * diff;
            }
        }
        for v in &mut global_var {
            *v = (*v / n).max(floor);
        }
    }
    let mut weights = vec![0.0; j];
    let mut means = centers;
    let mut vars = vec![vec![0.0; dim]; j];
    for c in 0..j {
        weights[c] = (counts[c].max(1)) as f64;
        if counts[c] > 0 {
            for d in 0..dim {
                let m = sums[c][d] / counts[c] as f64;
                means[c][d] = m;
                vars[c][d] = (sqsums[c][d] / counts[c] as f64 - m * m).max(floor);
            }
        } else {
            vars[c].copy_from_slice(&global_var);
        }
        // Empty clusters keep their seeded center and the global spread.
        if counts[c] <= 1 {
            vars[c].copy_from_slice(&global_var);
        }
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    Params { dim, weights, means, vars }
}

struct EStep {
    ll: f64,
    resp_sum: Vec<f64>,
    weighted_sum: Vec<Vec<f64>>,
    weighted_sq: Vec<Vec<f64>>,
}

impl EStep {
    fn zero(j: usize, dim: usize) -> Self {
        EStep {
            ll: 0.0,
            resp_sum: vec![0.0; j],
            weighted_sum: vec![vec![0.0; dim]; j],
            weighted_sq: vec![vec![0.0; dim]; j],
        }
    }

    fn absorb(&mut self, other: &EStep) {
        self.ll += other.ll;
        for (a, b) in self.resp_sum.iter_mut().zip(&other.resp_sum) {
            *a += b;
        }
        for (a, b) in self.weighted_sum.iter_mut().zip(&other.weighted_sum) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.weighted_sq.iter_mut().zip(&other.weighted_sq) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

const E_CHUNK: usize = 256;

/// Accumulate responsibilities chunk by chunk. Chunks are folded in index
/// order so the floating-point result is independent of the thread count.
fn e_step(points: &[&[f64]], p: &Params) -> EStep {
    let j = p.weights.len();
    let chunks = points.len().div_ceil(E_CHUNK);
    let parts = run_indexed(chunks, |c| {
        let lo = c * E_CHUNK;
        let hi = (lo + E_CHUNK).min(points.len());
        let mut acc = EStep::zero(j, p.dim);
        let mut logs = vec![0.0f64; j];
        for x in &points[lo..hi] {
            for (jj, l) in logs.iter_mut().enumerate() {
                *l = p.weights[jj].ln() + log_component(x, &p.means[jj], &p.vars[jj]);
            }
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            acc.ll += lse;
            for jj in 0..j {
                let r = (logs[jj] - lse).exp();
                if r == 0.0 {
                    continue;
                }
                acc.resp_sum[jj] += r;
                for d in 0..p.dim {
                    acc.weighted_sum[jj][d] += r * x[d];
                    acc.weighted_sq[jj][d] += r * x[d] * x[d];
                }
            }
        }
        acc
    });
    let mut total = EStep::zero(j, p.dim);
    for part in &parts {
        total.absorb(part);
    }
    total
}

/// Fit a `components`-component diagonal Gaussian mixture to the images.
/// All images must share one shape; each is one sample in R^dim.
pub fn fit_prior(images: &[Image], opts: &FitOptions) -> Result<FitResult> {
    if opts.components == 0 {
        return Err(Error::InvalidParam("components must be at least 1".into()));
    }
    if opts.max_iters == 0 {
        return Err(Error::InvalidParam("max_iters must be at least 1".into()));
    }
    if !(opts.variance_floor > 0.0) || !opts.variance_floor.is_finite() {
        return Err(Error::InvalidParam(format!(
            "variance_floor must be finite and > 0, got {}",
            opts.variance_floor
        )));
    }
    if !(opts.tol >= 0.0) || !opts.tol.is_finite() {
        return Err(Error::InvalidParam(format!("tol must be finite and >= 0, got {}", opts.tol)));
    }
    if images.len() < opts.components {
        return Err(Error::InvalidParam(format!(
            "need at least as many images ({}) as components ({})",
            images.len(),
            opts.components
        )));
    }
    let first = &images[0];
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape("all images must share one shape to fit a prior".into()));
        }
    }

    let points: Vec<&[f64]> = images.iter().map(|i| i.data()).collect();
    let mut rng = RngStream::new(opts.seed, "fit/kmeanspp");
    let mut params = init_params(&points, opts.components, opts.variance_floor, &mut rng);

    let n = points.len() as f64;
    let mut trace = Vec::with_capacity(opts.max_iters + 1);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        let e = e_step(&points, &params);
        trace.push(e.ll);
        iterations += 1;
        // M step.
        for jj in 0..opts.components {
            let mass = e.resp_sum[jj];
            if mass <= 1e-12 {
                // Dead component: park it on the worst-fit point.
                let worst = (0..points.len())
                    .min_by(|&a, &b| {
                        point_log_likelihood(points[a], &params)
                            .partial_cmp(&point_log_likelihood(points[b], &params))
                            .expect("log-likelihoods are finite")
                    })
                    .expect("nonempty data");
                params.weights[jj] = 1.0 / n;
                params.means[jj] = points[worst].to_vec();
                for v in &mut params.vars[jj] {
                    *v = 1.0f64.max(opts.variance_floor);
                }
                continue;
            }
            params.weights[jj] = mass / n;
            for d in 0..params.dim {
                let mean = e.weighted_sum[jj][d] / mass;
                params.means[jj][d] = mean;
                params.vars[jj][d] =
                    (e.weighted_sq[jj][d] / mass - mean * mean).max(opts.variance_floor);
            }
        }
        let wsum: f64 = params.weights.iter().sum();
        for w in &mut params.weights {
            *w /= wsum;
        }
        if trace.len() >= 2 {
            let gain = trace[trace.len() - 1] - trace[trace.len() - 2];
            if gain.abs() <= opts.tol * (1.0 + trace[trace.len() - 1].abs()) {
                converged = true;
                break;
            }
        }
    }
    // Log-likelihood of the parameters actually returned.
    let final_ll = e_step(&points, &params).ll;
    trace.push(final_ll);

    let prior = MixturePrior::new(params.weights, params.means, params.vars)?;
    Ok(FitResult { prior, log_likelihood: trace, iterations, converged })
}
