//! Forward sampling, reverse samplers, and the regeneration pipeline.
//!
//! Regeneration is the attack primitive: push an image `strength` of the way
//! up the forward process, then denoise back to t = 0 with the exact mixture
//! score. The reverse pass walks an evenly spaced substep grid (DDIM-style
//! skipping); guidance, when configured, nudges the iterate along the
//! watermark-erasure gradient after each step that lands inside the window.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::message::Message;
use crate::prior::MixturePrior;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::watermark::{wm_loss_and_grad, SpreadSpectrumKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Ddpm => "ddpm",
            Sampler::Ddim => "ddim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(Error::InvalidParam(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Watermark-guidance settings for `regenerate`: after each reverse step that
/// lands at a time inside `[t_lo, t_hi]`, take `x -= eta * grad L_wm(x)`.
#[derive(Debug, Clone)]
pub struct Guidance<'a> {
    pub key: &'a SpreadSpectrumKey,
    pub message: &'a Message,
    pub eta: f64,
    pub t_lo: usize,
    pub t_hi: usize,
}

impl<'a> Guidance<'a> {
    pub fn full_window(
        key: &'a SpreadSpectrumKey,
        message: &'a Message,
        eta: f64,
        sched: &NoiseSchedule,
    ) -> Self {
        Guidance { key, message, eta, t_lo: 0, t_hi: sched.t_max() }
    }

    /// Window covering the last `fraction` of the reverse trajectory from
    /// `t_star`, i.e. times in [0, round(fraction * t_star)].
    pub fn last_fraction(
        key: &'a SpreadSpectrumKey,
        message: &'a Message,
        eta: f64,
        fraction: f64,
        t_star: usize,
    ) -> Self {
        let t_hi = (fraction * t_star as f64).round() as usize;
        Guidance { key, message, eta, t_lo: 0, t_hi }
    }

    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParam(format!("guidance eta must be >= 0, got {}", self.eta)));
        }
        if self.t_lo > self.t_hi || self.t_hi > sched.t_max() {
            return Err(Error::InvalidParam(format!(
                "guidance window [{}, {}] invalid for t_max {}",
                self.t_lo,
                self.t_hi,
                sched.t_max()
            )));
        }
        Ok(())
    }
}

/// Default guidance step size relative to the key amplitude: eta = beta / 2.
pub fn default_eta(key: &SpreadSpectrumKey) -> f64 {
    0.5 * key.beta()
}

/// Forward sample `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z`.
/// `t = 0` returns the input unchanged and draws nothing from `rng`.
pub fn forward_sample(
    x0: &Image,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Image> {
    if t > sched.t_max() {
        return Err(Error::InvalidParam(format!(
            "t = {t} out of range 0..={}",
            sched.t_max()
        )));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar(t);
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    for v in out.data_mut() {
        *v = sig * *v + noise * rng.next_standard_normal();
    }
    Ok(out)
}

fn check_prior_dim(x: &Image, prior: &MixturePrior) -> Result<()> {
    if x.num_samples() != prior.dim() {
        return Err(Error::Shape(format!(
            "image has {} samples, prior expects {}",
            x.num_samples(),
            prior.dim()
        )));
    }
    Ok(())
}

/// Generalized ancestral step from `t` to `t_prev < t` using the effective
/// one-step ratio `alpha_eff = alpha_bar(t) / alpha_bar(t_prev)`:
///
/// `x_{t_prev} = (x_t + (1 - alpha_eff) * score(x_t, t)) / sqrt(alpha_eff) + noise`,
///
/// with noise ~ N(0, (1 - alpha_eff) I) when `t_prev > 0` and none when
/// `t_prev = 0`. For `t_prev = t - 1` this is exactly the textbook DDPM update.
fn ddpm_step_to(
    x: &Image,
    t: usize,
    t_prev: usize,
    prior: &MixturePrior,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Image> {
    if t == 0 || t > sched.t_max() || t_prev >= t {
        return Err(Error::InvalidParam(format!(
            "ddpm step needs 0 <= t_prev < t <= {}, got t = {t}, t_prev = {t_prev}",
            sched.t_max()
        )));
    }
    check_prior_dim(x, prior)?;
    let alpha_eff = sched.alpha_bar(t) / sched.alpha_bar(t_prev);
    let score = prior.score(x.data(), t, sched)?;
    let inv_sqrt = 1.0 / alpha_eff.sqrt();
    let beta_eff = 1.0 - alpha_eff;
    let noise_std = if t_prev > 0 { beta_eff.sqrt() } else { 0.0 };
    let mut out = x.clone();
    for (v, &s) in out.data_mut().iter_mut().zip(&score) {
        let mut next = (*v + beta_eff * s) * inv_sqrt;
        if noise_std > 0.0 {
            next += noise_std * rng.next_standard_normal();
        }
        *v = next;
    }
    out.check_finite("ddpm_step")?;
    Ok(out)
}

/// One DDPM ancestral step t -> t-1. Noise is added for t > 1; the final
/// step to t = 0 is the noiseless posterior mean.
pub fn ddpm_step(
    x: &Image,
    t: usize,
    prior: &MixturePrior,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Image> {
    if t == 0 {
        return Err(Error::InvalidParam("ddpm step needs t >= 1".into()));
    }
    ddpm_step_to(x, t, t - 1, prior, sched, rng)
}

/// Deterministic DDIM step from `t` to `t_prev <= t` (equal is the degenerate
/// identity):
///
/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`
/// `x_{t_prev} = sqrt(alpha_bar_{t_prev}) x0_hat + sqrt(1 - alpha_bar_{t_prev}) eps_hat`
pub fn ddim_step(
    x: &Image,
    t: usize,
    t_prev: usize,
    prior: &MixturePrior,
    sched: &NoiseSchedule,
) -> Result<Image> {
    if t == 0 || t > sched.t_max() || t_prev > t {
        return Err(Error::InvalidParam(format!(
            "ddim step needs 0 <= t_prev <= t <= {}, got t = {t}, t_prev = {t_prev}",
            sched.t_max()
        )));
    }
    check_prior_dim(x, prior)?;
    if t_prev == t {
        return Ok(x.clone());
    }
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let eps = prior.eps_hat(x.data(), t, sched)?;
    let (sq_t, nq_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sq_p, nq_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    let mut out = x.clone();
    for (v, &e) in out.data_mut().iter_mut().zip(&eps) {
        let x0_hat = (*v - nq_t * e) / sq_t;
        *v = sq_p * x0_hat + nq_p * e;
    }
    out.check_finite("ddim_step")?;
    Ok(out)
}

/// Evenly spaced reverse grid from `t_star` down to 0 (inclusive), at most
/// `substeps` steps. When `substeps >= t_star` this is every integer step.
pub(crate) fn substep_grid(t_star: usize, substeps: usize) -> Vec<usize> {
    let mut grid = Vec::with_capacity(substeps + 1);
    for i in 0..=substeps {
        let tau = ((t_star as f64) * ((substeps - i) as f64) / (substeps as f64)).round() as usize;
        if grid.last() != Some(&tau) {
            grid.push(tau);
        }
    }
    grid
}

pub const DEFAULT_SUBSTEPS: usize = 50;

/// The regeneration attack: forward-sample to `t_star = round(strength * T)`,
/// then denoise back to 0 on an evenly spaced `substeps` grid with the chosen
/// sampler, applying guidance after each step that lands inside the window.
///
/// `strength = 0` is a bit-exact identity (no steps, no rng draws). Guidance
/// with `eta = 0` is bit-identical to no guidance.
pub fn regenerate(
    x: &Image,
    strength: f64,
    sampler: Sampler,
    substeps: usize,
    prior: &MixturePrior,
    sched: &NoiseSchedule,
    guidance: Option<&Guidance<'_>>,
    rng: &mut RngStream,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidParam(format!("strength must be in [0, 1], got {strength}")));
    }
    if substeps == 0 {
        return Err(Error::InvalidParam("substeps must be at least 1".into()));
    }
    check_prior_dim(x, prior)?;
    if let Some(g) = guidance {
        g.validate(sched)?;
    }

    let t_star = (strength * sched.t_max() as f64).round() as usize;
    if t_star == 0 {
        return Ok(x.clone());
    }

    let mut cur = forward_sample(x, t_star, sched, rng)?;
    let grid = substep_grid(t_star, substeps);
    for win in grid.windows(2) {
        let (tau, tau_next) = (win[0], win[1]);
        cur = match sampler {
            Sampler::Ddim => ddim_step(&cur, tau, tau_next, prior, sched)?,
            Sampler::Ddpm => ddpm_step_to(&cur, tau, tau_next, prior, sched, rng)?,
        };
        if let Some(g) = guidance {
            if g.eta > 0.0 && g.t_lo <= tau_next && tau_next <= g.t_hi {
                let (_, grad) = wm_loss_and_grad(&cur, g.key, g.message)?;
                for (v, &d) in cur.data_mut().iter_mut().zip(grad.data()) {
                    *v -= g.eta * d;
                }
            }
        }
    }
    cur.check_finite("regenerate")?;
    Ok(cur)
}
