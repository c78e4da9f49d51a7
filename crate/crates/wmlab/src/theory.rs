//! Closed-form predictions and Monte Carlo checks for the decode channel.
//!
//! With orthonormal patterns, informed embedding, and white Gaussian noise of
//! strength sigma, each correlation statistic is exactly `beta * b + sigma *
//! z` with independent standard normal z. The estimators here work on that
//! reduced scalar channel, so theory and simulation can be compared at high
//! trial counts without touching images. `mi_curve` is the exception: it
//! runs the real embed -> regenerate -> decode pipeline to trace how the
//! decoder channel's mutual information decays with attack strength.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::message::Message;
use crate::parallel::run_indexed;
use crate::prior::MixturePrior;
use crate::rng::RngStream;
use crate::sampler::{regenerate, Sampler};
use crate::schedule::NoiseSchedule;
use crate::watermark::{decode, embed, SpreadSpectrumKey};

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryPrediction {
    /// Probability a single bit decodes correctly, Phi(beta / sigma).
    pub p_bit: f64,
    /// Upper bound on full-message recovery, Phi(beta / sigma)^k.
    pub p_msg_bound: f64,
    /// Noise standard deviation along each pattern direction.
    pub sigma_effective: f64,
}

/// Closed-form channel prediction. Requires strictly positive noise; the
/// noiseless channel is trivial and better probed through `mc_decode_rate`.
pub fn predict(beta: f64, sigma: f64, k: usize) -> Result<TheoryPrediction> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParam(format!("sigma must be finite and > 0, got {sigma}")));
    }
    check_channel(beta, k)?;
    let p_bit = phi(beta / sigma);
    Ok(TheoryPrediction { p_bit, p_msg_bound: p_bit.powi(k as i32), sigma_effective: sigma })
}

fn check_channel(beta: f64, k: usize) -> Result<()> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::InvalidParam(format!("beta must be finite and > 0, got {beta}")));
    }
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    Ok(())
}

/// Per-bit confusion counts for a decode channel. Counts are plain integers,
/// so merging partial tallies is exact and order independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelStats {
    /// Per bit position: [++, +-, -+, --] as (true bit, decoded bit).
    counts: Vec<[u64; 4]>,
    trials: u64,
    exact_matches: u64,
}

impl ChannelStats {
    pub fn new(k: usize) -> Self {
        ChannelStats { counts: vec![[0; 4]; k], trials: 0, exact_matches: 0 }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn exact_matches(&self) -> u64 {
        self.exact_matches
    }

    /// [++, +-, -+, --] tallies for bit `i`.
    pub fn bit_counts(&self, i: usize) -> [u64; 4] {
        self.counts[i]
    }

    pub fn record(&mut self, truth: &Message, decoded: &Message) -> Result<()> {
        self.record_bits(truth.bits(), decoded.bits())
    }

    pub fn record_bits(&mut self, truth: &[i8], decoded: &[i8]) -> Result<()> {
        if truth.len() != self.k() || decoded.len() != self.k() {
            return Err(Error::Shape(format!(
                "stats track {} bits, got truth {} and decoded {}",
                self.k(),
                truth.len(),
                decoded.len()
            )));
        }
        let mut all = true;
        for (i, (&t, &d)) in truth.iter().zip(decoded).enumerate() {
            let cell = match (t > 0, d > 0) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            self.counts[i][cell] += 1;
            all &= t == d;
        }
        self.trials += 1;
        if all {
            self.exact_matches += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ChannelStats) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::Shape(format!(
                "cannot merge stats for {} bits into {}",
                other.k(),
                self.k()
            )));
        }
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        self.trials += other.trials;
        self.exact_matches += other.exact_matches;
        Ok(())
    }

    /// Fraction of correct bit decisions pooled over positions and trials.
    pub fn per_bit_accuracy(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        let correct: u64 = self.counts.iter().map(|c| c[0] + c[3]).sum();
        correct as f64 / (self.trials * self.k() as u64) as f64
    }

    pub fn exact_match_rate(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        self.exact_matches as f64 / self.trials as f64
    }
}

fn bernoulli_stderr(p: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McDecodeResult {
    pub per_bit_acc: f64,
    pub per_bit_stderr: f64,
    pub msg_rate: f64,
    pub msg_stderr: f64,
    pub stats: ChannelStats,
}

const MC_CHUNK: u64 = 4096;

/// Monte Carlo estimate of decode accuracy on the reduced channel: draw a
/// random message, form `corr_i = beta b_i + sigma z_i`, decode with the
/// tie-goes-positive rule, tally. Chunks run in parallel on independent
/// counter-based streams and merge in index order, so the result depends
/// only on the arguments. `sigma = 0` is the exact noiseless channel.
pub fn mc_decode_rate(
    beta: f64,
    sigma: f64,
    k: usize,
    trials: u64,
    seed: u64,
) -> Result<McDecodeResult> {
    check_channel(beta, k)?;
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParam(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if trials == 0 {
        return Err(Error::InvalidParam("trials must be at least 1".into()));
    }
    let chunks = trials.div_ceil(MC_CHUNK) as usize;
    let parts = run_indexed(chunks, |c| {
        let c = c as u64;
        let lo = c * MC_CHUNK;
        let hi = (lo + MC_CHUNK).min(trials);
        let mut rng = RngStream::new(seed, &format!("theory/mc/chunk/{c}"));
        let mut stats = ChannelStats::new(k);
        let mut truth = vec![0i8; k];
        let mut decoded = vec![0i8; k];
        for _ in lo..hi {
            for i in 0..k {
                let b: i8 = if rng.next_f64() < 0.5 { -1 } else { 1 };
                let corr = beta * b as f64 + sigma * rng.next_standard_normal();
                truth[i] = b;
                decoded[i] = if corr >= 0.0 { 1 } else { -1 };
            }
            stats.record_bits(&truth, &decoded).expect("lengths fixed by construction");
        }
        stats
    });
    let mut stats = ChannelStats::new(k);
    for part in &parts {
        stats.merge(part)?;
    }
    let per_bit = stats.per_bit_accuracy();
    let msg = stats.exact_match_rate();
    Ok(McDecodeResult {
        per_bit_acc: per_bit,
        per_bit_stderr: bernoulli_stderr(per_bit, stats.trials() * k as u64),
        msg_rate: msg,
        msg_stderr: bernoulli_stderr(msg, stats.trials()),
        stats,
    })
}

/// Mean per-bit plug-in mutual information of the (true, decoded) channel in
/// bits, with Jeffreys +1/2 smoothing so empty cells stay finite. Ranges
/// from about 0 (independent) to 1 (perfect copy). By the data-processing
/// inequality this lower-bounds the message-to-image mutual information.
pub fn mi_proxy(stats: &ChannelStats) -> f64 {
    if stats.trials() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..stats.k() {
        let c = stats.bit_counts(i);
        let n = (c[0] + c[1] + c[2] + c[3]) as f64;
        let p: Vec<f64> = c.iter().map(|&x| (x as f64 + 0.5) / (n + 2.0)).collect();
        let pt = [p[0] + p[1], p[2] + p[3]];
        let pd = [p[0] + p[2], p[1] + p[3]];
        let mut mi = 0.0;
        for (j, &pij) in p.iter().enumerate() {
            let marg = pt[j / 2] * pd[j % 2];
            mi += pij * (pij / marg).log2();
        }
        total += mi.clamp(0.0, 1.0);
    }
    total / stats.k() as f64
}

/// One row of the theory verification grid: closed form next to Monte Carlo.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRow {
    pub beta: f64,
    pub sigma: f64,
    pub k: usize,
    pub p_bit_theory: f64,
    pub p_bit_mc: f64,
    pub stderr: f64,
    pub p_msg_theory: f64,
    pub p_msg_mc: f64,
    pub mi_proxy: f64,
}

/// Evaluate `predict` against `mc_decode_rate` over the cartesian grid of
/// the given betas, sigmas, and ks. Every cell reuses the same seed, so the
/// underlying noise draws are common random numbers across the grid.
pub fn theory_grid(
    betas: &[f64],
    sigmas: &[f64],
    ks: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<TheoryRow>> {
    if betas.is_empty() || sigmas.is_empty() || ks.is_empty() {
        return Err(Error::InvalidParam("theory grid needs at least one beta, sigma, and k".into()));
    }
    let mut rows = Vec::with_capacity(betas.len() * sigmas.len() * ks.len());
    for &beta in betas {
        for &sigma in sigmas {
            for &k in ks {
                let t = predict(beta, sigma, k)?;
                let mc = mc_decode_rate(beta, sigma, k, trials, seed)?;
                rows.push(TheoryRow {
                    beta,
                    sigma,
                    k,
                    p_bit_theory: t.p_bit,
                    p_bit_mc: mc.per_bit_acc,
                    stderr: mc.per_bit_stderr,
                    p_msg_theory: t.p_msg_bound,
                    p_msg_mc: mc.msg_rate,
                    mi_proxy: mi_proxy(&mc.stats),
                });
            }
        }
    }
    Ok(rows)
}

pub const THEORY_HEADER: &str =
    "beta,sigma,k,p_bit_theory,p_bit_mc,stderr,p_msg_theory,p_msg_mc,mi_proxy";

pub fn theory_to_csv(rows: &[TheoryRow]) -> String {
    let mut out = String::from(THEORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.beta,
            r.sigma,
            r.k,
            r.p_bit_theory,
            r.p_bit_mc,
            r.stderr,
            r.p_msg_theory,
            r.p_msg_mc,
            r.mi_proxy
        ));
    }
    out
}

/// Everything `mi_curve` needs to run embed -> regenerate -> decode trials.
#[derive(Debug, Clone, Copy)]
pub struct MiPipeline<'a> {
    pub key: &'a SpreadSpectrumKey,
    pub prior: &'a MixturePrior,
    pub sched: &'a NoiseSchedule,
    pub sampler: Sampler,
    pub substeps: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiCurvePoint {
    pub strength: f64,
    pub mi_proxy: f64,
    pub per_bit_acc: f64,
    pub msg_rate: f64,
}

/// For each strength: draw hosts from the prior, embed fresh random
/// messages, regenerate unguided, decode, and aggregate the decoder channel.
/// Trials are paired across strengths (same hosts, messages, and noise
/// streams), which keeps the decay curve clean at moderate trial counts.
pub fn mi_curve(strengths: &[f64], pipe: &MiPipeline<'_>) -> Result<Vec<MiCurvePoint>> {
    if strengths.is_empty() {
        return Err(Error::InvalidParam("mi_curve needs at least one strength".into()));
    }
    if pipe.trials == 0 {
        return Err(Error::InvalidParam("mi_curve needs at least one trial".into()));
    }
    let k = pipe.key.k();
    let dim = pipe.key.dim();
    if pipe.prior.dim() != dim {
        return Err(Error::Shape(format!(
            "prior dim {} does not match key dim {}",
            pipe.prior.dim(),
            dim
        )));
    }
    let mut out = Vec::with_capacity(strengths.len());
    for &strength in strengths {
        let parts = run_indexed(pipe.trials, |i| -> Result<ChannelStats> {
            let mut setup = RngStream::new(pipe.seed, &format!("theory/mi/trial/{i}"));
            let host = Image::from_vec(dim, 1, 1, pipe.prior.sample(&mut setup))?;
            let message = Message::random(k, &mut setup)?;
            let marked = embed(&host, pipe.key, &message)?;
            let mut attack_rng = setup.derive("regen");
            let attacked = regenerate(
                &marked,
                strength,
                pipe.sampler,
                pipe.substeps,
                pipe.prior,
                pipe.sched,
                None,
                &mut attack_rng,
            )?;
            let decoded = decode(&attacked, pipe.key)?;
            let mut stats = ChannelStats::new(k);
            stats.record(&message, &decoded.bits)?;
            Ok(stats)
        });
        let mut stats = ChannelStats::new(k);
        for part in parts {
            stats.merge(&part?)?;
        }
        out.push(MiCurvePoint {
            strength,
            mi_proxy: mi_proxy(&stats),
            per_bit_acc: stats.per_bit_accuracy(),
            msg_rate: stats.exact_match_rate(),
        });
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("spearman needs equal lengths, got {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidParam("spearman needs at least two points".into()));
    }
    let rx = average_ranks(xs)?;
    let ry = average_ranks(ys)?;
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let (mut dx, mut dy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::InvalidParam("spearman undefined when one input is constant".into()));
    }
    Ok(num / (dx * dy).sqrt())
}

fn average_ranks(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidParam("ranks undefined for NaN values".into()));
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("NaN was rejected"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Pool-adjacent-violators fit of the best non-increasing sequence (least
/// squares). Used to measure how far a decay curve is from monotone.
pub fn pav_non_increasing(ys: &[f64]) -> Vec<f64> {
    // PAVA on the negated sequence gives the non-decreasing fit.
    let mut blocks: Vec<(f64, f64)> = Vec::with_capacity(ys.len()); // (sum, count)
    for &y in ys {
        blocks.push((-y, 1.0));
        while blocks.len() >= 2 {
            let (s2, c2) = blocks[blocks.len() - 1];
            let (s1, c1) = blocks[blocks.len() - 2];
            if s1 / c1 <= s2 / c2 {
                break;
            }
            blocks.pop();
            blocks.pop();
            blocks.push((s1 + s2, c1 + c2));
        }
    }
    let mut out = Vec::with_capacity(ys.len());
    for (s, c) in blocks {
        let mean = -(s / c);
        for _ in 0..c as usize {
            out.push(mean);
        }
    }
    out
}
