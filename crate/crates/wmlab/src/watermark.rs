//! Spread-spectrum watermarking.
//!
//! A key holds `k` orthonormal patterns, each orthogonal to the constant (DC)
//! direction so that global brightness shifts never bias the decoder. Embedding
//! adds `beta * sum_i b_i p_i`; informed embedding additionally cancels the
//! host's own projection onto each pattern so the embedded correlations equal
//! `beta * b_i` exactly. Decoding takes correlations against the patterns and
//! thresholds at zero.
//!
//! The erasure loss drives an attacker's gradient steps: it is the sum of
//! per-bit sigmoids of the (scaled) correct-bit correlations, so minimizing it
//! pushes correct-bit correlations negative, and its gradient lies entirely in
//! the span of the patterns.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::message::Message;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    /// Add the pattern payload on top of the host.
    Plain,
    /// Additionally subtract the host's pattern projections, zeroing host
    /// interference at the decoder.
    Informed,
}

impl EmbedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedMode::Plain => "plain",
            EmbedMode::Informed => "informed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(EmbedMode::Plain),
            "informed" => Ok(EmbedMode::Informed),
            other => Err(Error::InvalidParam(format!("unknown embed mode {other:?}"))),
        }
    }
}

/// Watermarking key: `k` orthonormal patterns of dimension `dim`, an embedding
/// amplitude `beta`, and the seed the patterns derive from.
#[derive(Debug, Clone)]
pub struct SpreadSpectrumKey {
    k: usize,
    dim: usize,
    beta: f64,
    seed: u64,
    mode: EmbedMode,
    patterns: Vec<Vec<f64>>,
}

/// Decoder output: hard bits, raw correlations, and sigmoid confidences.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub bits: Message,
    pub correlations: Vec<f64>,
    pub confidences: Vec<f64>,
}

/// Host projections onto each pattern, measured on a cover image.
#[derive(Debug, Clone)]
pub struct HostInterference {
    pub kappa: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Numerically stable logistic sigmoid.
#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Generates a key: `k` i.i.d. Gaussian vectors orthonormalized against the
/// DC direction and each other (modified Gram-Schmidt, two passes).
///
/// `dim` is the total sample count of the images the key will be used on.
/// Requires `k + 1 <= dim` so the patterns and the DC direction fit.
pub fn keygen(k: usize, dim: usize, beta: f64, seed: u64, mode: EmbedMode) -> Result<SpreadSpectrumKey> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    if k + 1 > dim {
        return Err(Error::InvalidParam(format!(
            "k = {k} patterns plus the DC direction do not fit in dimension {dim}"
        )));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParam(format!("beta must be positive and finite, got {beta}")));
    }

    let mut rng = RngStream::new(seed, "wm/patterns");
    let dc = 1.0 / (dim as f64).sqrt();
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(k);

    for i in 0..k {
        let mut accepted = None;
        // Linear dependence has probability zero for Gaussian draws; the
        // redraw loop only guards against numerically degenerate luck.
        for _attempt in 0..8 {
            let mut v = vec![0.0; dim];
            rng.fill_standard_normal(&mut v);
            for _pass in 0..2 {
                let proj_dc: f64 = v.iter().sum::<f64>() * dc;
                for x in v.iter_mut() {
                    *x -= proj_dc * dc;
                }
                for p in &patterns {
                    let proj = dot(&v, p);
                    for (x, &pv) in v.iter_mut().zip(p) {
                        *x -= proj * pv;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-3 * (dim as f64).sqrt() {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                accepted = Some(v);
                break;
            }
        }
        let v = accepted.ok_or_else(|| {
            Error::InvalidParam(format!("pattern {i} degenerate after orthogonalization"))
        })?;
        patterns.push(v);
    }

    Ok(SpreadSpectrumKey { k, dim, beta, seed, mode, patterns })
}

impl SpreadSpectrumKey {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> EmbedMode {
        self.mode
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    /// Sigmoid temperature for confidences and the erasure loss: beta / 2.
    pub fn tau(&self) -> f64 {
        self.beta / 2.0
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.num_samples() != self.dim {
            return Err(Error::Shape(format!(
                "image has {} samples, key expects {}",
                x.num_samples(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_message(&self, m: &Message) -> Result<()> {
        if m.len() != self.k {
            return Err(Error::Shape(format!(
                "message has {} bits, key expects {}",
                m.len(),
                self.k
            )));
        }
        Ok(())
    }
}

/// Host projections `kappa_i = <image, p_i>` on a cover image.
pub fn host_interference(image: &Image, key: &SpreadSpectrumKey) -> Result<HostInterference> {
    key.check_image(image)?;
    Ok(HostInterference {
        kappa: key.patterns.iter().map(|p| dot(image.data(), p)).collect(),
    })
}

/// Embeds `message` into `image` at amplitude `key.beta()`.
pub fn embed(image: &Image, key: &SpreadSpectrumKey, message: &Message) -> Result<Image> {
    key.check_image(image)?;
    key.check_message(message)?;
    let mut out = image.clone();
    for (p, &b) in key.patterns.iter().zip(message.bits()) {
        let coef = match key.mode {
            EmbedMode::Plain => key.beta * f64::from(b),
            EmbedMode::Informed => key.beta * f64::from(b) - dot(image.data(), p),
        };
        for (x, &pv) in out.data_mut().iter_mut().zip(p) {
            *x += coef * pv;
        }
    }
    out.check_finite("embed")?;
    Ok(out)
}

/// Correlation decoder: bit i is the sign of `<x, p_i>` with the zero tie
/// broken to +1; confidence is `sigmoid(correlation / tau)`.
///
/// (At an exactly zero correlation the confidence is exactly 0.5 while the
/// bit is +1; everywhere else confidence > 0.5 iff the bit is +1.)
pub fn decode(image: &Image, key: &SpreadSpectrumKey) -> Result<DecodeResult> {
    key.check_image(image)?;
    let correlations: Vec<f64> = key.patterns.iter().map(|p| dot(image.data(), p)).collect();
    let tau = key.tau();
    let bits: Vec<i8> = correlations.iter().map(|&c| if c >= 0.0 { 1 } else { -1 }).collect();
    let confidences = correlations.iter().map(|&c| sigmoid(c / tau)).collect();
    Ok(DecodeResult { bits: Message::from_bits(bits)?, correlations, confidences })
}

/// Erasure loss `sum_i sigmoid(b_i <x, p_i> / tau)` and its gradient in x.
///
/// The gradient is a linear combination of the key patterns, so any step
/// along it stays in the watermark subspace; minimizing the loss drives
/// correct-bit correlations negative.
pub fn wm_loss_and_grad(
    image: &Image,
    key: &SpreadSpectrumKey,
    message: &Message,
) -> Result<(f64, Image)> {
    key.check_image(image)?;
    key.check_message(message)?;
    let tau = key.tau();
    let mut loss = 0.0;
    let mut grad = vec![0.0; key.dim];
    for (p, &b) in key.patterns.iter().zip(message.bits()) {
        let corr = dot(image.data(), p);
        let z = f64::from(b) * corr / tau;
        let s = sigmoid(z);
        loss += s;
        let coef = f64::from(b) / tau * s * (1.0 - s);
        for (g, &pv) in grad.iter_mut().zip(p) {
            *g += coef * pv;
        }
    }
    let grad = Image::from_vec(image.width(), image.height(), image.channels(), grad)?;
    Ok((loss, grad))
}

const WMK1_MAGIC: &[u8; 4] = b"WMK1";

/// Serializes a key. Layout, all little-endian: magic `WMK1`, u32 k, u32 dim,
/// f64 beta, u64 seed, u8 mode (0 = plain, 1 = informed). Patterns are not
/// stored; they re-derive from the seed on load.
pub fn encode_key(key: &SpreadSpectrumKey) -> Vec<u8> {
    let mut out = Vec::with_capacity(29);
    out.extend_from_slice(WMK1_MAGIC);
    out.extend_from_slice(&(key.k as u32).to_le_bytes());
    out.extend_from_slice(&(key.dim as u32).to_le_bytes());
    out.extend_from_slice(&key.beta.to_le_bytes());
    out.extend_from_slice(&key.seed.to_le_bytes());
    out.push(match key.mode {
        EmbedMode::Plain => 0,
        EmbedMode::Informed => 1,
    });
    out
}

/// Parses a WMK1 key file and re-derives the patterns from the stored seed.
pub fn decode_key(bytes: &[u8]) -> Result<SpreadSpectrumKey> {
    if bytes.len() != 29 {
        return Err(Error::format(bytes.len().min(29), "WMK1 key must be exactly 29 bytes"));
    }
    if &bytes[0..4] != WMK1_MAGIC {
        return Err(Error::format(0, "bad magic, expected WMK1"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let beta = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let mode = match bytes[28] {
        0 => EmbedMode::Plain,
        1 => EmbedMode::Informed,
        other => return Err(Error::format(28, format!("bad mode byte {other}"))),
    };
    keygen(k, dim, beta, seed, mode)
}

pub fn save_key(path: impl AsRef<Path>, key: &SpreadSpectrumKey) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_key(key)).map_err(|e| Error::io(path, e))
}

pub fn load_key(path: impl AsRef<Path>) -> Result<SpreadSpectrumKey> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_key(&bytes)
}
