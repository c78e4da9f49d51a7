//! Experiment orchestration: per-image trials, strength sweeps, CSV output.
//!
//! Every trial is driven by a counter-based stream named after the image and
//! attack, so results are byte-identical regardless of worker count. Failed
//! trials become rows with an error marker instead of being dropped; report
//! aggregation counts them as non-detections and excludes them from means.

use crate::attacks::{apply_attack, AttackConfig, AttackDeps};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{export_dataset, generate_dataset, generating_prior};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::message::{bit_accuracy, exact_match, Message};
use crate::metrics::{psnr, ssim};
use crate::parallel::{is_parallel, run_indexed, with_thread_count};
use crate::prior::{load_prior, MixturePrior};
use crate::rng::RngStream;
use crate::sampler::Guidance;
use crate::schedule::NoiseSchedule;
use crate::theory::{mi_proxy, ChannelStats};
use crate::watermark::{decode, embed, keygen, SpreadSpectrumKey};
use std::collections::HashMap;
use std::path::Path;

/// One decode attempt on one image under one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub image_id: String,
    pub attack_id: String,
    /// None when the trial errored before decoding.
    pub bit_accuracy: Option<f64>,
    pub exact_match: Option<bool>,
    /// Fidelity of the attacked image versus the unwatermarked original.
    /// None when the metric is disabled or the trial errored.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub bits_true: String,
    /// Empty when the trial errored.
    pub bits_decoded: String,
    pub error: Option<String>,
    pub params_echo: String,
}

/// One report line: an attack aggregated over the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Embedding mode the run used ("informed" or "plain").
    pub mode: String,
    pub attack_id: String,
    /// Trials attempted, errors included.
    pub n: usize,
    /// Fraction of trials that recovered every bit; errors count as misses.
    pub detection_rate: f64,
    pub mean_bit_accuracy: f64,
    /// Mean over finite PSNR values; infinities are tallied separately.
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mi_proxy: f64,
    pub psnr_inf_count: usize,
    pub errors: usize,
    pub params_echo: String,
}

/// One sweep line: a regeneration variant at one strength.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub strength: f64,
    pub n: usize,
    pub detection_rate: f64,
    pub mean_bit_accuracy: f64,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mi_proxy: f64,
    pub params_echo: String,
}

/// Result of the pre-run noise calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub sigma: f64,
    /// Mean PSNR of the first regen attack, the level the noise is matched to.
    pub target_psnr_db: f64,
    pub achieved_psnr_db: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub trials: Vec<TrialRecord>,
    pub report: Vec<ReportRow>,
    pub calibration: Option<CalibrationOutcome>,
}

pub const NO_ATTACK_ID: &str = "no_attack";
pub const TRIALS_HEADER: &str =
    "image_id,attack_id,bit_accuracy,exact_match,psnr_db,ssim,bits_true,bits_decoded,error,params_echo";
pub const REPORT_HEADER: &str = "mode,attack_id,n,detection_rate,mean_bit_accuracy,mean_psnr_db,\
mean_ssim,mi_proxy,psnr_inf_count,errors,params_echo";
pub const SWEEP_HEADER: &str = "variant,strength,n,detection_rate,mean_bit_accuracy,mean_psnr_db,\
mean_ssim,mi_proxy,params_echo";

/// Stable per-attack row keys: the kind, with `#2`, `#3`, ... appended for
/// repeated kinds in config order.
pub fn attack_ids(attacks: &[AttackConfig]) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    attacks
        .iter()
        .map(|a| {
            let n = seen.entry(a.kind()).and_modify(|n| *n += 1).or_insert(1);
            if *n == 1 {
                a.kind().to_string()
            } else {
                format!("{}#{n}", a.kind())
            }
        })
        .collect()
}

fn sanitize_error(msg: &str) -> String {
    msg.replace(',', ";").replace(['\n', '\r'], " ")
}

/// Everything the per-image workers share, resolved once up front.
struct RunContext {
    items: Vec<(String, Image)>,
    key: SpreadSpectrumKey,
    sched: NoiseSchedule,
    prior: Option<MixturePrior>,
}

fn resolve_context(cfg: &ExperimentConfig) -> Result<RunContext> {
    let items = generate_dataset(&cfg.dataset, cfg.seed)?;
    let first = &items[0].1;
    if let Some((id, img)) = items.iter().find(|(_, img)| !img.same_shape(first)) {
        return Err(Error::Config(format!(
            "dataset shapes differ: {} is {}x{}x{}, {} is {}x{}x{}",
            items[0].0,
            first.width(),
            first.height(),
            first.channels(),
            id,
            img.width(),
            img.height(),
            img.channels()
        )));
    }
    let dim = first.num_samples();
    let key = keygen(
        cfg.watermark.k,
        dim,
        cfg.watermark.beta,
        cfg.watermark.seed.unwrap_or(cfg.seed),
        cfg.watermark.mode,
    )?;
    let sched = NoiseSchedule::new(cfg.diffusion.schedule, cfg.diffusion.t_max)?;
    let prior = match &cfg.diffusion.prior {
        Some(path) => Some(load_prior(path)?),
        None => generating_prior(&cfg.dataset)?,
    };
    if let Some(p) = &prior {
        if p.dim() != dim {
            return Err(Error::Config(format!(
                "prior dimension {} does not match image dimension {dim}",
                p.dim()
            )));
        }
    }
    Ok(RunContext { items, key, sched, prior })
}

/// The per-image message is a pure function of the master seed and image id,
/// so calibration, runs, and sweeps all see the same message on the same image.
fn message_for(master_seed: u64, image_id: &str, k: usize) -> Result<Message> {
    let mut rng = RngStream::new(master_seed, &format!("msg/{image_id}"));
    Message::random(k, &mut rng)
}

/// Run every configured attack over the dataset and aggregate the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate_for_run()?;
    with_thread_count(cfg.threads, || run_experiment_inner(cfg))?
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let ctx = resolve_context(cfg)?;
    let (attacks, calibration) = if cfg.calibrate_noise_sigma {
        let outcome = calibrate_noise_sigma(cfg, &ctx)?;
        let attacks = cfg
            .attacks
            .iter()
            .map(|a| match a {
                AttackConfig::GaussianNoise { seed, .. } => {
                    AttackConfig::GaussianNoise { sigma: outcome.sigma, seed: *seed }
                }
                other => other.clone(),
            })
            .collect();
        (attacks, Some(outcome))
    } else {
        (cfg.attacks.clone(), None)
    };
    let ids = attack_ids(&attacks);

    let per_image = run_indexed(ctx.items.len(), |i| -> Result<Vec<TrialRecord>> {
        let (image_id, original) = &ctx.items[i];
        let message = message_for(cfg.seed, image_id, ctx.key.k())?;
        let watermarked = embed(original, &ctx.key, &message)?;
        let mut rows = Vec::with_capacity(attacks.len() + 1);
        rows.push(control_row(cfg, &ctx, image_id, original, &watermarked, &message)?);
        for (attack, attack_id) in attacks.iter().zip(&ids) {
            rows.push(attack_row(
                cfg,
                &ctx,
                attack,
                attack_id,
                image_id,
                original,
                &watermarked,
                &message,
            ));
        }
        Ok(rows)
    });
    let mut trials = Vec::with_capacity(ctx.items.len() * (attacks.len() + 1));
    for rows in per_image {
        trials.extend(rows?);
    }
    let report = aggregate_report(&trials, cfg.watermark.mode.as_str())?;
    Ok(ExperimentResult { trials, report, calibration })
}

fn measure(
    cfg: &ExperimentConfig,
    original: &Image,
    attacked: &Image,
) -> Result<(Option<f64>, Option<f64>)> {
    let p = if cfg.metrics.psnr { Some(psnr(original, attacked)?) } else { None };
    let s = if cfg.metrics.ssim { Some(ssim(original, attacked)?) } else { None };
    Ok((p, s))
}

/// The no-attack control: decode the watermarked image directly.
fn control_row(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    image_id: &str,
    original: &Image,
    watermarked: &Image,
    message: &Message,
) -> Result<TrialRecord> {
    let decoded = decode(watermarked, &ctx.key)?;
    let (psnr_db, ssim_val) = measure(cfg, original, watermarked)?;
    Ok(TrialRecord {
        image_id: image_id.to_string(),
        attack_id: NO_ATTACK_ID.to_string(),
        bit_accuracy: Some(bit_accuracy(message, &decoded.bits)?),
        exact_match: Some(exact_match(message, &decoded.bits)?),
        psnr_db,
        ssim: ssim_val,
        bits_true: message.to_bit_string(),
        bits_decoded: decoded.bits.to_bit_string(),
        error: None,
        params_echo: format!("kind={NO_ATTACK_ID}"),
    })
}

#[allow(clippy::too_many_arguments)]
fn attack_row(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    attack: &AttackConfig,
    attack_id: &str,
    image_id: &str,
    original: &Image,
    watermarked: &Image,
    message: &Message,
) -> TrialRecord {
    let mut row = TrialRecord {
        image_id: image_id.to_string(),
        attack_id: attack_id.to_string(),
        bit_accuracy: None,
        exact_match: None,
        psnr_db: None,
        ssim: None,
        bits_true: message.to_bit_string(),
        bits_decoded: String::new(),
        error: None,
        params_echo: attack.params_echo(),
    };
    let deps = AttackDeps {
        prior: ctx.prior.as_ref(),
        sched: Some(&ctx.sched),
        key: Some(&ctx.key),
        message: Some(message),
    };
    let mut rng =
        RngStream::new(attack.seed().unwrap_or(cfg.seed), &format!("attack/{attack_id}/{image_id}"));
    let outcome = (|| -> Result<(Option<f64>, Option<f64>, f64, bool, String)> {
        let attacked = apply_attack(watermarked, attack, &deps, &mut rng)?;
        let decoded = decode(&attacked, &ctx.key)?;
        let (p, s) = measure(cfg, original, &attacked)?;
        Ok((
            p,
            s,
            bit_accuracy(message, &decoded.bits)?,
            exact_match(message, &decoded.bits)?,
            decoded.bits.to_bit_string(),
        ))
    })();
    match outcome {
        Ok((p, s, acc, exact, bits)) => {
            row.psnr_db = p;
            row.ssim = s;
            row.bit_accuracy = Some(acc);
            row.exact_match = Some(exact);
            row.bits_decoded = bits;
        }
        Err(e) => row.error = Some(sanitize_error(&e.to_string())),
    }
    row
}

/// Accumulates one report or sweep row across trials.
struct RowAccum {
    stats: ChannelStats,
    n: usize,
    errors: usize,
    psnr_sum: f64,
    psnr_n: usize,
    psnr_inf: usize,
    ssim_sum: f64,
    ssim_n: usize,
}

impl RowAccum {
    fn new(k: usize) -> Self {
        RowAccum {
            stats: ChannelStats::new(k),
            n: 0,
            errors: 0,
            psnr_sum: 0.0,
            psnr_n: 0,
            psnr_inf: 0,
            ssim_sum: 0.0,
            ssim_n: 0,
        }
    }

    fn push_metrics(&mut self, psnr_db: Option<f64>, ssim_val: Option<f64>) {
        match psnr_db {
            Some(p) if p.is_infinite() => self.psnr_inf += 1,
            Some(p) => {
                self.psnr_sum += p;
                self.psnr_n += 1;
            }
            None => {}
        }
        if let Some(s) = ssim_val {
            self.ssim_sum += s;
            self.ssim_n += 1;
        }
    }

    fn push_decoded(&mut self, truth: &Message, decoded: &Message) -> Result<()> {
        self.stats.record(truth, decoded)
    }

    fn merge(&mut self, other: &RowAccum) -> Result<()> {
        self.stats.merge(&other.stats)?;
        self.n += other.n;
        self.errors += other.errors;
        self.psnr_sum += other.psnr_sum;
        self.psnr_n += other.psnr_n;
        self.psnr_inf += other.psnr_inf;
        self.ssim_sum += other.ssim_sum;
        self.ssim_n += other.ssim_n;
        Ok(())
    }

    fn detection_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.stats.exact_matches() as f64 / self.n as f64
        }
    }

    fn mean_psnr(&self) -> Option<f64> {
        (self.psnr_n > 0).then(|| self.psnr_sum / self.psnr_n as f64)
    }

    fn mean_ssim(&self) -> Option<f64> {
        (self.ssim_n > 0).then(|| self.ssim_sum / self.ssim_n as f64)
    }
}

/// Rebuild the report table from trial rows (fresh from a run or parsed back
/// from trials.csv). Rows group by attack_id in first-appearance order.
pub fn aggregate_report(trials: &[TrialRecord], mode: &str) -> Result<Vec<ReportRow>> {
    if trials.is_empty() {
        return Err(Error::InvalidParam("no trials to aggregate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&TrialRecord>> = HashMap::new();
    for t in trials {
        groups
            .entry(t.attack_id.as_str())
            .or_insert_with(|| {
                order.push(t.attack_id.as_str());
                Vec::new()
            })
            .push(t);
    }
    let mut rows = Vec::with_capacity(order.len());
    for attack_id in order {
        let group = &groups[attack_id];
        let k = group
            .iter()
            .map(|t| t.bits_true.len())
            .max()
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::InvalidParam(format!("{attack_id}: no usable trials")))?;
        let mut acc = RowAccum::new(k);
        for t in group {
            acc.n += 1;
            if t.error.is_some() {
                acc.errors += 1;
                continue;
            }
            let truth = Message::from_bit_string(&t.bits_true)?;
            let decoded = Message::from_bit_string(&t.bits_decoded)?;
            acc.push_decoded(&truth, &decoded)?;
            acc.push_metrics(t.psnr_db, t.ssim);
        }
        rows.push(ReportRow {
            mode: mode.to_string(),
            attack_id: attack_id.to_string(),
            n: acc.n,
            detection_rate: acc.detection_rate(),
            mean_bit_accuracy: acc.stats.per_bit_accuracy(),
            mean_psnr_db: acc.mean_psnr(),
            mean_ssim: acc.mean_ssim(),
            mi_proxy: mi_proxy(&acc.stats),
            psnr_inf_count: acc.psnr_inf,
            errors: acc.errors,
            params_echo: group[0].params_echo.clone(),
        });
    }
    Ok(rows)
}

/// Mean watermarked-vs-original PSNR under the given attack, used as the
/// calibration objective. Infinite values (exact reconstruction) are skipped.
fn mean_attack_psnr(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    attack: &AttackConfig,
    label: &str,
) -> Result<f64> {
    let psnrs = run_indexed(ctx.items.len(), |i| -> Result<f64> {
        let (image_id, original) = &ctx.items[i];
        let message = message_for(cfg.seed, image_id, ctx.key.k())?;
        let watermarked = embed(original, &ctx.key, &message)?;
        let deps = AttackDeps {
            prior: ctx.prior.as_ref(),
            sched: Some(&ctx.sched),
            key: Some(&ctx.key),
            message: Some(&message),
        };
        let mut rng = RngStream::new(cfg.seed, &format!("calibrate/{label}/{image_id}"));
        let attacked = apply_attack(&watermarked, attack, &deps, &mut rng)?;
        psnr(original, &attacked)
    });
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in psnrs {
        let p = p?;
        if p.is_finite() {
            sum += p;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config(format!("calibration: every {label} PSNR was infinite")));
    }
    Ok(sum / n as f64)
}

const CALIBRATION_TOL_DB: f64 = 0.25;
const CALIBRATION_MAX_ITERS: usize = 60;
const CALIBRATION_SIGMA_LO: f64 = 1e-4;
const CALIBRATION_SIGMA_HI: f64 = 2.0;

/// Bisect the gaussian_noise sigma until its mean PSNR matches the first
/// regen attack's. PSNR is strictly decreasing in sigma, so plain bisection
/// on [1e-4, 2] converges; an unreachable target clamps to the nearer end.
fn calibrate_noise_sigma(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CalibrationOutcome> {
    let regen = cfg
        .attacks
        .iter()
        .find(|a| matches!(a, AttackConfig::Regen { .. }))
        .ok_or_else(|| Error::Config("calibration needs a regen attack".into()))?;
    let target = mean_attack_psnr(cfg, ctx, regen, "regen")?;

    let noise_psnr = |sigma: f64| -> Result<f64> {
        let probe = AttackConfig::GaussianNoise { sigma, seed: None };
        mean_attack_psnr(cfg, ctx, &probe, "noise")
    };

    let (mut lo, mut hi) = (CALIBRATION_SIGMA_LO, CALIBRATION_SIGMA_HI);
    let psnr_lo = noise_psnr(lo)?;
    let psnr_hi = noise_psnr(hi)?;
    if psnr_lo <= target {
        return Ok(CalibrationOutcome {
            sigma: lo,
            target_psnr_db: target,
            achieved_psnr_db: psnr_lo,
            iterations: 0,
        });
    }
    if psnr_hi >= target {
        return Ok(CalibrationOutcome {
            sigma: hi,
            target_psnr_db: target,
            achieved_psnr_db: psnr_hi,
            iterations: 0,
        });
    }
    let mut sigma = 0.5 * (lo + hi);
    let mut achieved = noise_psnr(sigma)?;
    let mut iterations = 1;
    while (achieved - target).abs() > CALIBRATION_TOL_DB && iterations < CALIBRATION_MAX_ITERS {
        if achieved > target {
            lo = sigma;
        } else {
            hi = sigma;
        }
        sigma = 0.5 * (lo + hi);
        achieved = noise_psnr(sigma)?;
        iterations += 1;
    }
    Ok(CalibrationOutcome { sigma, target_psnr_db: target, achieved_psnr_db: achieved, iterations })
}

/// Guidance window a sweep variant runs with.
#[derive(Debug, Clone, Copy, PartialEq)]
enum SweepWindow {
    Unguided,
    Full,
    LastFraction(f64),
}

/// The guided variants the sweep runs next to the unguided baseline.
fn sweep_variants(guided: bool, last_fraction: f64) -> Vec<(String, SweepWindow)> {
    let mut v = vec![("unguided".to_string(), SweepWindow::Unguided)];
    if guided {
        v.push(("guided_full".to_string(), SweepWindow::Full));
        let pct = (last_fraction * 100.0).round() as u32;
        v.push((format!("guided_last{pct}"), SweepWindow::LastFraction(last_fraction)));
    }
    v
}

/// Regeneration strength sweep. Each (image, strength) pair draws one base
/// stream that every variant clones, so variant comparisons are paired: same
/// forward noise, same sampler noise, different guidance only.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate_for_sweep()?;
    with_thread_count(cfg.threads, || run_sweep_inner(cfg))?
}

fn run_sweep_inner(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let ctx = resolve_context(cfg)?;
    let sw = cfg.sweep.as_ref().expect("validated");
    let prior = ctx
        .prior
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a diffusion prior".into()))?;
    let eta = sw.effective_eta(ctx.key.beta());
    let variants = sweep_variants(sw.guided, sw.last_fraction);
    let cells = variants.len() * sw.strengths.len();

    let per_image = run_indexed(ctx.items.len(), |i| -> Result<Vec<RowAccum>> {
        let (image_id, original) = &ctx.items[i];
        let message = message_for(cfg.seed, image_id, ctx.key.k())?;
        let watermarked = embed(original, &ctx.key, &message)?;
        let mut accums: Vec<RowAccum> =
            (0..cells).map(|_| RowAccum::new(ctx.key.k())).collect();
        for (si, &strength) in sw.strengths.iter().enumerate() {
            let base = RngStream::new(cfg.seed, &format!("sweep/{image_id}/s{si}"));
            for (vi, (_, window)) in variants.iter().enumerate() {
                let guidance = match window {
                    SweepWindow::Unguided => None,
                    SweepWindow::Full => {
                        Some(Guidance::full_window(&ctx.key, &message, eta, &ctx.sched))
                    }
                    SweepWindow::LastFraction(frac) => {
                        let t_star = (strength * ctx.sched.t_max() as f64).round() as usize;
                        Some(Guidance::last_fraction(&ctx.key, &message, eta, *frac, t_star))
                    }
                };
                let mut rng = base.clone();
                let attacked = crate::sampler::regenerate(
                    &watermarked,
                    strength,
                    sw.sampler,
                    sw.substeps,
                    prior,
                    &ctx.sched,
                    guidance.as_ref(),
                    &mut rng,
                )?;
                let decoded = decode(&attacked, &ctx.key)?;
                let acc = &mut accums[vi * sw.strengths.len() + si];
                acc.n += 1;
                acc.push_decoded(&message, &decoded.bits)?;
                let (p, s) = measure(cfg, original, &attacked)?;
                acc.push_metrics(p, s);
            }
        }
        Ok(accums)
    });

    let mut totals: Vec<RowAccum> = (0..cells).map(|_| RowAccum::new(ctx.key.k())).collect();
    for image_accums in per_image {
        for (total, acc) in totals.iter_mut().zip(&image_accums?) {
            total.merge(acc)?;
        }
    }

    let mut rows = Vec::with_capacity(cells);
    for (vi, (name, window)) in variants.iter().enumerate() {
        for (si, &strength) in sw.strengths.iter().enumerate() {
            let acc = &totals[vi * sw.strengths.len() + si];
            let echo = match window {
                SweepWindow::Unguided => AttackConfig::Regen {
                    strength,
                    sampler: sw.sampler,
                    substeps: sw.substeps,
                    seed: None,
                },
                SweepWindow::Full => AttackConfig::RegenGuided {
                    strength,
                    eta,
                    sampler: sw.sampler,
                    substeps: sw.substeps,
                    last_fraction: None,
                    seed: None,
                },
                SweepWindow::LastFraction(frac) => AttackConfig::RegenGuided {
                    strength,
                    eta,
                    sampler: sw.sampler,
                    substeps: sw.substeps,
                    last_fraction: Some(*frac),
                    seed: None,
                },
            }
            .params_echo();
            rows.push(SweepRow {
                variant: name.clone(),
                strength,
                n: acc.n,
                detection_rate: acc.detection_rate(),
                mean_bit_accuracy: acc.stats.per_bit_accuracy(),
                mean_psnr_db: acc.mean_psnr(),
                mean_ssim: acc.mean_ssim(),
                mi_proxy: mi_proxy(&acc.stats),
                params_echo: echo,
            });
        }
    }
    Ok(rows)
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn fmt_opt_bool(v: Option<bool>) -> String {
    match v {
        Some(b) => b.to_string(),
        None => String::new(),
    }
}

/// Serialize trials to CSV. No field ever contains a comma: params_echo and
/// bit strings are comma-free by construction, error text is sanitized.
pub fn trials_to_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for t in trials {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.image_id,
            t.attack_id,
            fmt_opt_f64(t.bit_accuracy),
            fmt_opt_bool(t.exact_match),
            fmt_opt_f64(t.psnr_db),
            fmt_opt_f64(t.ssim),
            t.bits_true,
            t.bits_decoded,
            t.error.as_deref().unwrap_or(""),
            t.params_echo
        ));
    }
    out
}

pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.attack_id,
            r.n,
            r.detection_rate,
            r.mean_bit_accuracy,
            fmt_opt_f64(r.mean_psnr_db),
            fmt_opt_f64(r.mean_ssim),
            r.mi_proxy,
            r.psnr_inf_count,
            r.errors,
            r.params_echo
        ));
    }
    out
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.strength,
            r.n,
            r.detection_rate,
            r.mean_bit_accuracy,
            fmt_opt_f64(r.mean_psnr_db),
            fmt_opt_f64(r.mean_ssim),
            r.mi_proxy,
            r.params_echo
        ));
    }
    out
}

fn parse_opt_f64(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Config(format!("trials csv line {line}: bad number {field:?}")))
}

/// Parse trials.csv back into records, for report re-aggregation.
pub fn parse_trials_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRIALS_HEADER => {}
        _ => return Err(Error::Config("trials csv: missing or wrong header".into())),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let n = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Config(format!(
                "trials csv line {n}: expected 10 fields, got {}",
                fields.len()
            )));
        }
        let exact_match = match fields[3] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => {
                return Err(Error::Config(format!("trials csv line {n}: bad bool {other:?}")))
            }
        };
        out.push(TrialRecord {
            image_id: fields[0].to_string(),
            attack_id: fields[1].to_string(),
            bit_accuracy: parse_opt_f64(fields[2], n)?,
            exact_match,
            psnr_db: parse_opt_f64(fields[4], n)?,
            ssim: parse_opt_f64(fields[5], n)?,
            bits_true: fields[6].to_string(),
            bits_decoded: fields[7].to_string(),
            error: (!fields[8].is_empty()).then(|| fields[8].to_string()),
            params_echo: fields[9].to_string(),
        });
    }
    Ok(out)
}

/// Human-readable run provenance, written next to the CSVs.
pub fn run_meta(cfg: &ExperimentConfig, command: &str, calibration: Option<&CalibrationOutcome>) -> String {
    let mut lines = vec![
        format!("wmlab {} {command}", env!("CARGO_PKG_VERSION")),
        format!("seed = {}", cfg.seed),
        format!(
            "threads = {} (parallel feature {})",
            cfg.threads.map_or("ambient".to_string(), |t| t.to_string()),
            if is_parallel() { "on" } else { "off" }
        ),
        match &cfg.dataset {
            DatasetConfig::Synthetic { count, width, height, channels, levels, variance, .. } => {
                format!(
                    "dataset = synthetic, {count} images {width}x{height}x{channels}, levels {levels:?}, variance {variance}"
                )
            }
            DatasetConfig::Directory { path } => format!("dataset = directory {}", path.display()),
        },
        format!(
            "watermark = k {}, beta {}, mode {}, key seed {}",
            cfg.watermark.k,
            cfg.watermark.beta,
            cfg.watermark.mode.as_str(),
            cfg.watermark.seed.unwrap_or(cfg.seed)
        ),
        format!(
            "diffusion = {} schedule, t_max {}, prior {}",
            cfg.diffusion.schedule.as_str(),
            cfg.diffusion.t_max,
            cfg.diffusion
                .prior
                .as_ref()
                .map_or("from synthetic mixture".to_string(), |p| p.display().to_string())
        ),
        "psnr and ssim are measured against the unwatermarked original".to_string(),
        "report means exclude infinite psnr values; psnr_inf_count tallies them".to_string(),
        "ssim uses an 8x8 uniform window".to_string(),
        "detection = exact recovery of all k bits; trial errors count as misses".to_string(),
        "guided-ablation comparisons use a 5 percentage point tolerance".to_string(),
    ];
    if let Some(c) = calibration {
        lines.push(format!(
            "calibrated gaussian_noise sigma = {} (target psnr {:.3} dB, achieved {:.3} dB, {} bisection steps)",
            c.sigma, c.target_psnr_db, c.achieved_psnr_db, c.iterations
        ));
    }
    if let Some(sw) = &cfg.sweep {
        lines.push(format!(
            "sweep = strengths {:?}, sampler {}, substeps {}, guided {}, eta {}, last_fraction {}",
            sw.strengths,
            sw.sampler.as_str(),
            sw.substeps,
            sw.guided,
            sw.effective_eta(cfg.watermark.beta),
            sw.last_fraction
        ));
    }
    lines.join("\n") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write trials.csv, report.csv, and run_meta.txt into the output directory,
/// plus the exported dataset when the config asks for it.
pub fn write_run_outputs(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_text(&cfg.output.join("trials.csv"), &trials_to_csv(&result.trials))?;
    write_text(&cfg.output.join("report.csv"), &report_to_csv(&result.report))?;
    write_text(&cfg.output.join("run_meta.txt"), &run_meta(cfg, "run", result.calibration.as_ref()))?;
    maybe_export_dataset(cfg)
}

pub fn write_sweep_outputs(cfg: &ExperimentConfig, rows: &[SweepRow]) -> Result<()> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_text(&cfg.output.join("sweep.csv"), &sweep_to_csv(rows))?;
    write_text(&cfg.output.join("run_meta.txt"), &run_meta(cfg, "sweep", None))?;
    maybe_export_dataset(cfg)
}

fn maybe_export_dataset(cfg: &ExperimentConfig) -> Result<()> {
    if let DatasetConfig::Synthetic { export: true, .. } = cfg.dataset {
        let items = generate_dataset(&cfg.dataset, cfg.seed)?;
        export_dataset(&items, &cfg.output.join("dataset"))?;
    }
    Ok(())
}
