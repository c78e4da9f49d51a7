//! Diagonal Gaussian mixture prior with an exact diffused score.
//!
//! If x0 is drawn from `sum_j w_j N(mu_j, diag(v_j))` and the forward process
//! produces `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z`, then the
//! time-t marginal is again a diagonal mixture,
//!
//! `p_t = sum_j w_j N(sqrt(alpha_bar_t) mu_j, alpha_bar_t v_j + (1 - alpha_bar_t))`,
//!
//! so both `log p_t` and its gradient (the score) have closed forms. All the
//! mixture responsibilities are evaluated in log space with log-sum-exp.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

const LN_2PI: f64 = 1.8378770664093453;

impl MixturePrior {
    /// Builds and validates a mixture: weights positive and summing to 1
    /// within 1e-9, variances strictly positive, all dimensions consistent.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParam("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::Shape(format!(
                "component counts differ: {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParam("mixture dimension must be positive".into()));
        }
        for (j, (m, v)) in means.iter().zip(&variances).enumerate() {
            if m.len() != dim || v.len() != dim {
                return Err(Error::Shape(format!("component {j} has inconsistent dimension")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParam(format!("component {j} mean is not finite")));
            }
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "component {j} variance must be strictly positive and finite"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "weights must be positive and sum to 1, got sum {sum}"
            )));
        }
        Ok(MixturePrior { dim, weights, means, variances })
    }

    /// Single-component convenience: N(mean, diag(variance)).
    pub fn single(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        MixturePrior::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Isotropic convenience: every dimension gets the same mean level and
    /// variance; used by synthetic datasets.
    pub fn isotropic(dim: usize, levels: &[f64], variance: f64) -> Result<Self> {
        let j = levels.len().max(1);
        let weights = vec![1.0 / j as f64; j];
        let means = levels.iter().map(|&l| vec![l; dim]).collect();
        let variances = vec![vec![variance; dim]; j];
        MixturePrior::new(weights, means, variances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Shape(format!(
                "vector has {len} samples, prior expects {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Draws one sample: pick a component by weight, then mean + sqrt(var) * z.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        self.means[pick]
            .iter()
            .zip(&self.variances[pick])
            .map(|(&m, &v)| m + v.sqrt() * rng.next_standard_normal())
            .collect()
    }

    /// Per-component log densities of the time-t marginal, plus their
    /// log-sum-exp total. `t` may be 0 (the prior itself).
    fn component_logs(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> (Vec<f64>, f64) {
        let ab = sched.alpha_bar(t);
        let sq = ab.sqrt();
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(&w, (mu, var))| {
                let mut ll = w.ln();
                for ((&xd, &md), &vd) in x.iter().zip(mu).zip(var) {
                    let c = ab * vd + (1.0 - ab);
                    let d = xd - sq * md;
                    ll -= 0.5 * (d * d / c + (LN_2PI + c.ln()));
                }
                ll
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logs.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        (logs, lse)
    }

    /// log p_t(x) of the diffused mixture.
    pub fn log_density(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.component_logs(x, t, sched).1)
    }

    /// Score of the diffused mixture: grad_x log p_t(x).
    pub fn score(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let (logs, lse) = self.component_logs(x, t, sched);
        let ab = sched.alpha_bar(t);
        let sq = ab.sqrt();
        let mut out = vec![0.0; self.dim];
        for (j, &lj) in logs.iter().enumerate() {
            let r = (lj - lse).exp();
            if r == 0.0 {
                continue;
            }
            let mu = &self.means[j];
            let var = &self.variances[j];
            for (d, o) in out.iter_mut().enumerate() {
                let c = ab * var[d] + (1.0 - ab);
                *o -= r * (x[d] - sq * mu[d]) / c;
            }
        }
        Ok(out)
    }

    /// Noise-prediction form of the score:
    /// `eps_hat = -sqrt(1 - alpha_bar_t) * score`.
    pub fn eps_hat(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let f = (1.0 - sched.alpha_bar(t)).sqrt();
        let mut s = self.score(x, t, sched)?;
        for v in s.iter_mut() {
            *v *= -f;
        }
        Ok(s)
    }
}

/// Text format, strict: a `wmprior 1` header, `dim` and `components` lines,
/// then `weight` / `mean` / `var` triples per component. `mean` and `var`
/// accept either `const <value>` or `dim` whitespace-separated values. `#`
/// starts a comment. The writer always emits full vectors.
pub fn encode_prior(prior: &MixturePrior) -> String {
    let mut out = String::new();
    out.push_str("wmprior 1\n");
    out.push_str(&format!("dim {}\n", prior.dim));
    out.push_str(&format!("components {}\n", prior.num_components()));
    for j in 0..prior.num_components() {
        out.push_str(&format!("weight {}\n", prior.weights[j]));
        out.push_str("mean");
        for v in &prior.means[j] {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
        out.push_str("var");
        for v in &prior.variances[j] {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    out
}

pub fn decode_prior(text: &str) -> Result<MixturePrior> {
    let mut dim: Option<usize> = None;
    let mut components: Option<usize> = None;
    let mut weights = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut vars: Vec<Vec<f64>> = Vec::new();
    let mut saw_header = false;

    let parse_vector = |rest: &[&str], dim: usize, line_no: usize| -> Result<Vec<f64>> {
        if rest.first() == Some(&"const") {
            if rest.len() != 2 {
                return Err(Error::Config(format!("line {line_no}: const takes one value")));
            }
            let v: f64 = rest[1]
                .parse()
                .map_err(|_| Error::Config(format!("line {line_no}: bad number {:?}", rest[1])))?;
            return Ok(vec![v; dim]);
        }
        if rest.len() != dim {
            return Err(Error::Config(format!(
                "line {line_no}: expected {dim} values, got {}",
                rest.len()
            )));
        }
        rest.iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {line_no}: bad number {s:?}")))
            })
            .collect()
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let keyword = parts.next().expect("nonempty line has a first token");
        let rest: Vec<&str> = parts.collect();
        if !saw_header {
            if keyword != "wmprior" || rest != ["1"] {
                return Err(Error::Config(format!(
                    "line {line_no}: expected header 'wmprior 1'"
                )));
            }
            saw_header = true;
            continue;
        }
        match keyword {
            "dim" => {
                let v = rest
                    .first()
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|_| rest.len() == 1)
                    .ok_or_else(|| Error::Config(format!("line {line_no}: bad dim")))?;
                dim = Some(v);
            }
            "components" => {
                let v = rest
                    .first()
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|_| rest.len() == 1)
                    .ok_or_else(|| Error::Config(format!("line {line_no}: bad components")))?;
                components = Some(v);
            }
            "weight" => {
                let v = rest
                    .first()
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|_| rest.len() == 1)
                    .ok_or_else(|| Error::Config(format!("line {line_no}: bad weight")))?;
                weights.push(v);
            }
            "mean" => {
                let d = dim
                    .ok_or_else(|| Error::Config(format!("line {line_no}: mean before dim")))?;
                means.push(parse_vector(&rest, d, line_no)?);
            }
            "var" => {
                let d = dim
                    .ok_or_else(|| Error::Config(format!("line {line_no}: var before dim")))?;
                vars.push(parse_vector(&rest, d, line_no)?);
            }
            other => {
                return Err(Error::Config(format!("line {line_no}: unknown key {other:?}")));
            }
        }
    }

    if !saw_header {
        return Err(Error::Config("empty prior file".into()));
    }
    let components =
        components.ok_or_else(|| Error::Config("missing components line".into()))?;
    if weights.len() != components || means.len() != components || vars.len() != components {
        return Err(Error::Config(format!(
            "declared {components} components, found {} weights, {} means, {} vars",
            weights.len(),
            means.len(),
            vars.len()
        )));
    }
    MixturePrior::new(weights, means, vars)
}

pub fn save_prior(path: impl AsRef<Path>, prior: &MixturePrior) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_prior(prior)).map_err(|e| Error::io(path, e))
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<MixturePrior> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_prior(&text)
}

/// Convenience: prior evaluated on flattened images.
pub fn score_image(
    prior: &MixturePrior,
    x: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    prior.score(x.data(), t, sched)
}
