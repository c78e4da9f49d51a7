//! Watermark-removal attacks and a config-driven dispatch surface.
//!
//! The classical attacks (noise, blur, JPEG) know nothing about the mark.
//! The informed attacks need extra state: FGSM needs the key and message to
//! form the erasure gradient, regeneration needs the diffusion prior and
//! schedule, and guided regeneration needs all four. Callers hand those in
//! through `AttackDeps`; a missing dependency is a structured error rather
//! than a panic so experiment runs can report it per row.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::jpeg::jpeg_sim;
use crate::message::Message;
use crate::prior::MixturePrior;
use crate::rng::RngStream;
use crate::sampler::{regenerate, Guidance, Sampler, DEFAULT_SUBSTEPS};
use crate::schedule::NoiseSchedule;
use crate::watermark::{wm_loss_and_grad, SpreadSpectrumKey};
use serde::{Deserialize, Serialize};

fn default_sampler() -> Sampler {
    Sampler::Ddim
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

/// One attack, fully specified by value. Deserializes from a table with a
/// `kind` field, e.g. `{ kind = "blur", sigma = 1.0 }`. Stochastic attacks
/// carry an optional seed; when unset the experiment's master seed drives
/// their stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    GaussianNoise {
        sigma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Blur {
        sigma: f64,
        /// Full kernel width, odd. None derives 2 * ceil(3 sigma) + 1.
        #[serde(default)]
        kernel: Option<usize>,
    },
    JpegSim {
        quality: u32,
    },
    Fgsm {
        epsilon: f64,
    },
    Regen {
        strength: f64,
        #[serde(default = "default_sampler")]
        sampler: Sampler,
        #[serde(default = "default_substeps")]
        substeps: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    RegenGuided {
        strength: f64,
        eta: f64,
        #[serde(default = "default_sampler")]
        sampler: Sampler,
        #[serde(default = "default_substeps")]
        substeps: usize,
        /// None guides on the whole trajectory; Some(f) restricts guidance to
        /// the last fraction f of it, times [0, round(f * t_star)].
        #[serde(default)]
        last_fraction: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl AttackConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackConfig::GaussianNoise { .. } => "gaussian_noise",
            AttackConfig::Blur { .. } => "blur",
            AttackConfig::JpegSim { .. } => "jpeg_sim",
            AttackConfig::Fgsm { .. } => "fgsm",
            AttackConfig::Regen { .. } => "regen",
            AttackConfig::RegenGuided { .. } => "regen_guided",
        }
    }

    /// The attack's own seed override, if it has one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            AttackConfig::GaussianNoise { seed, .. }
            | AttackConfig::Regen { seed, .. }
            | AttackConfig::RegenGuided { seed, .. } => *seed,
            _ => None,
        }
    }

    /// Canonical `key=value` echo of every effective parameter (defaults are
    /// spelled out), `;`-separated, safe to drop into a CSV field.
    pub fn params_echo(&self) -> String {
        let seed_part = |seed: &Option<u64>| match seed {
            None => String::new(),
            Some(s) => format!(";seed={s}"),
        };
        match self {
            AttackConfig::GaussianNoise { sigma, seed } => {
                format!("kind=gaussian_noise;sigma={sigma}{}", seed_part(seed))
            }
            AttackConfig::Blur { sigma, kernel } => {
                format!("kind=blur;sigma={sigma};kernel={}", effective_kernel(*sigma, *kernel))
            }
            AttackConfig::JpegSim { quality } => format!("kind=jpeg_sim;quality={quality}"),
            AttackConfig::Fgsm { epsilon } => format!("kind=fgsm;epsilon={epsilon}"),
            AttackConfig::Regen { strength, sampler, substeps, seed } => format!(
                "kind=regen;strength={strength};sampler={};substeps={substeps}{}",
                sampler.as_str(),
                seed_part(seed)
            ),
            AttackConfig::RegenGuided { strength, eta, sampler, substeps, last_fraction, seed } => {
                let window = match last_fraction {
                    None => "full".to_string(),
                    Some(f) => format!("last:{f}"),
                };
                format!(
                    "kind=regen_guided;strength={strength};eta={eta};sampler={};substeps={substeps};window={window}{}",
                    sampler.as_str(),
                    seed_part(seed)
                )
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        match self {
            AttackConfig::GaussianNoise { sigma, .. } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return bad(format!("gaussian_noise sigma must be finite and >= 0, got {sigma}"));
                }
            }
            AttackConfig::Blur { sigma, kernel } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return bad(format!("blur sigma must be finite and >= 0, got {sigma}"));
                }
                if let Some(k) = kernel {
                    if *k == 0 || k % 2 == 0 {
                        return bad(format!("blur kernel must be odd and >= 1, got {k}"));
                    }
                }
            }
            AttackConfig::JpegSim { quality } => {
                if !(1..=100).contains(quality) {
                    return bad(format!("jpeg quality must be in 1..=100, got {quality}"));
                }
            }
            AttackConfig::Fgsm { epsilon } => {
                if !epsilon.is_finite() || *epsilon < 0.0 {
                    return bad(format!("fgsm epsilon must be finite and >= 0, got {epsilon}"));
                }
            }
            AttackConfig::Regen { strength, substeps, .. } => {
                if !(0.0..=1.0).contains(strength) {
                    return bad(format!("regen strength must be in [0, 1], got {strength}"));
                }
                if *substeps == 0 {
                    return bad("regen substeps must be at least 1".into());
                }
            }
            AttackConfig::RegenGuided { strength, eta, substeps, last_fraction, .. } => {
                if !(0.0..=1.0).contains(strength) {
                    return bad(format!("regen strength must be in [0, 1], got {strength}"));
                }
                if *substeps == 0 {
                    return bad("regen substeps must be at least 1".into());
                }
                if !eta.is_finite() || *eta < 0.0 {
                    return bad(format!("guidance eta must be finite and >= 0, got {eta}"));
                }
                if let Some(f) = last_fraction {
                    if !(0.0..=1.0).contains(f) {
                        return bad(format!("last_fraction must be in [0, 1], got {f}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared state the informed attacks borrow from the experiment.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttackDeps<'a> {
    pub prior: Option<&'a MixturePrior>,
    pub sched: Option<&'a NoiseSchedule>,
    pub key: Option<&'a SpreadSpectrumKey>,
    pub message: Option<&'a Message>,
}

impl<'a> AttackDeps<'a> {
    fn prior(&self, kind: &str) -> Result<&'a MixturePrior> {
        self.prior.ok_or_else(|| Error::MissingDep(format!("{kind} needs a diffusion prior")))
    }

    fn sched(&self, kind: &str) -> Result<&'a NoiseSchedule> {
        self.sched.ok_or_else(|| Error::MissingDep(format!("{kind} needs a noise schedule")))
    }

    fn key(&self, kind: &str) -> Result<&'a SpreadSpectrumKey> {
        self.key.ok_or_else(|| Error::MissingDep(format!("{kind} needs the watermark key")))
    }

    fn message(&self, kind: &str) -> Result<&'a Message> {
        self.message.ok_or_else(|| Error::MissingDep(format!("{kind} needs the true message")))
    }
}

/// Additive white Gaussian noise, `x + sigma * z`.
pub fn gaussian_noise(x: &Image, sigma: f64, rng: &mut RngStream) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParam(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += sigma * rng.next_standard_normal();
    }
    Ok(out)
}

/// Effective odd kernel width: the override, or 2 ceil(3 sigma) + 1.
pub(crate) fn effective_kernel(sigma: f64, kernel: Option<usize>) -> usize {
    kernel.unwrap_or_else(|| 2 * ((3.0 * sigma).ceil().max(1.0) as usize) + 1)
}

fn gaussian_weights(sigma: f64, radius: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable Gaussian blur with replicated edges, truncated to an odd kernel
/// of `kernel` taps (None derives the width from sigma). Each 1D pass uses
/// the deviation form `out = x_c + sum_i w_i (x_i - x_c)`, so a constant
/// image passes through bit-exactly.
pub fn blur(x: &Image, sigma: f64, kernel: Option<usize>) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParam(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let width = effective_kernel(sigma, kernel);
    if width == 0 || width % 2 == 0 {
        return Err(Error::InvalidParam(format!("blur kernel must be odd and >= 1, got {width}")));
    }
    if sigma == 0.0 || width == 1 {
        return Ok(x.clone());
    }
    let w = gaussian_weights(sigma, width / 2);
    let (width, height, ch) = (x.width(), x.height(), x.channels());
    let idx = |px: usize, py: usize, c: usize| (py * width + px) * ch + c;

    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut dst = src.clone();
        for c in 0..ch {
            for py in 0..height {
                for px in 0..width {
                    let center = src.data()[idx(px, py, c)];
                    let mut acc = center;
                    for (i, &wi) in w.iter().enumerate().skip(1) {
                        let (lo, hi) = if horizontal {
                            (idx(px.saturating_sub(i), py, c), idx((px + i).min(width - 1), py, c))
                        } else {
                            (idx(px, py.saturating_sub(i), c), idx(px, (py + i).min(height - 1), c))
                        };
                        acc += wi * ((src.data()[lo] - center) + (src.data()[hi] - center));
                    }
                    dst.data_mut()[idx(px, py, c)] = acc;
                }
            }
        }
        dst
    };

    let mid = pass(x, true);
    Ok(pass(&mid, false))
}

/// One-step signed-gradient attack on the erasure loss:
/// `x' = x - epsilon * sign(grad L)`, with `sign(0) = 0`. Each moved sample
/// is nudged back toward the original by ulps until the measured deviation
/// is at most epsilon, so the L-infinity budget holds exactly in f64.
pub fn fgsm(
    x: &Image,
    key: &SpreadSpectrumKey,
    message: &Message,
    epsilon: f64,
) -> Result<Image> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidParam(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, grad) = wm_loss_and_grad(x, key, message)?;
    let mut out = x.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        if g == 0.0 {
            continue;
        }
        let orig = *v;
        let mut moved = if g > 0.0 { orig - epsilon } else { orig + epsilon };
        while (moved - orig).abs() > epsilon {
            moved = if moved > orig { moved.next_down() } else { moved.next_up() };
        }
        *v = moved;
    }
    Ok(out)
}

/// Run one configured attack. `rng` is consumed only by the stochastic
/// attacks; deterministic ones leave it untouched.
pub fn apply_attack(
    x: &Image,
    cfg: &AttackConfig,
    deps: &AttackDeps<'_>,
    rng: &mut RngStream,
) -> Result<Image> {
    cfg.validate()?;
    match cfg {
        AttackConfig::GaussianNoise { sigma, .. } => gaussian_noise(x, *sigma, rng),
        AttackConfig::Blur { sigma, kernel } => blur(x, *sigma, *kernel),
        AttackConfig::JpegSim { quality } => jpeg_sim(x, *quality),
        AttackConfig::Fgsm { epsilon } => {
            fgsm(x, deps.key("fgsm")?, deps.message("fgsm")?, *epsilon)
        }
        AttackConfig::Regen { strength, sampler, substeps, .. } => regenerate(
            x,
            *strength,
            *sampler,
            *substeps,
            deps.prior("regen")?,
            deps.sched("regen")?,
            None,
            rng,
        ),
        AttackConfig::RegenGuided { strength, eta, sampler, substeps, last_fraction, .. } => {
            let prior = deps.prior("regen_guided")?;
            let sched = deps.sched("regen_guided")?;
            let key = deps.key("regen_guided")?;
            let message = deps.message("regen_guided")?;
            let guidance = match last_fraction {
                None => Guidance::full_window(key, message, *eta, sched),
                Some(f) => {
                    let t_star = (strength * sched.t_max() as f64).round() as usize;
                    Guidance::last_fraction(key, message, *eta, *f, t_star)
                }
            };
            regenerate(x, *strength, *sampler, *substeps, prior, sched, Some(&guidance), rng)
        }
    }
}
