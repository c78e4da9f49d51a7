//! Experiment configuration: a strict TOML schema shared by the `run`,
//! `sweep`, and `fit-prior` flows. Unknown keys are errors at every level,
//! and file references are checked at validation time so a bad config fails
//! before any compute starts.

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::sampler::{Sampler, DEFAULT_SUBSTEPS};
use crate::schedule::{ScheduleKind, DEFAULT_T_MAX};
use crate::watermark::EmbedMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_channels() -> usize {
    1
}

fn default_levels() -> Vec<f64> {
    vec![0.5]
}

fn default_variance() -> f64 {
    0.01
}

/// Where trial images come from: sampled from a mixture, or loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        count: usize,
        width: usize,
        height: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        /// Component means of the generating isotropic mixture (one level
        /// per component, equal weights).
        #[serde(default = "default_levels")]
        levels: Vec<f64>,
        #[serde(default = "default_variance")]
        variance: f64,
        /// Also write clamped copies of the dataset for inspection.
        #[serde(default)]
        export: bool,
    },
    Directory {
        path: PathBuf,
    },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Synthetic { count, width, height, channels, levels, variance, .. } => {
                if *count == 0 {
                    return Err(Error::Config("dataset count must be at least 1".into()));
                }
                if *width == 0 || *height == 0 {
                    return Err(Error::Config("dataset dimensions must be nonzero".into()));
                }
                if *channels != 1 && *channels != 3 {
                    return Err(Error::Config(format!(
                        "dataset channels must be 1 or 3, got {channels}"
                    )));
                }
                if levels.is_empty() || levels.iter().any(|l| !l.is_finite()) {
                    return Err(Error::Config("dataset levels must be a nonempty finite list".into()));
                }
                if !variance.is_finite() || *variance <= 0.0 {
                    return Err(Error::Config(format!(
                        "dataset variance must be finite and > 0, got {variance}"
                    )));
                }
                Ok(())
            }
            DatasetConfig::Directory { path } => {
                if !path.is_dir() {
                    return Err(Error::Config(format!(
                        "dataset directory {} does not exist",
                        path.display()
                    )));
                }
                Ok(())
            }
        }
    }
}

fn default_mode() -> EmbedMode {
    EmbedMode::Informed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    pub k: usize,
    pub beta: f64,
    #[serde(default = "default_mode")]
    pub mode: EmbedMode,
    /// Key generation seed; None derives it from the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("watermark k must be at least 1".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "watermark beta must be finite and > 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Linear
}

fn default_t_max() -> usize {
    DEFAULT_T_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Prior file in the wmprior text format. None falls back to the
    /// synthetic dataset's generating mixture.
    #[serde(default)]
    pub prior: Option<PathBuf>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { schedule: default_schedule(), t_max: default_t_max(), prior: None }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("diffusion t_max must be at least 1".into()));
        }
        if let Some(p) = &self.prior {
            if !p.is_file() {
                return Err(Error::Config(format!("prior file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFlags {
    #[serde(default = "default_true")]
    pub psnr: bool,
    #[serde(default = "default_true")]
    pub ssim: bool,
}

impl Default for MetricsFlags {
    fn default() -> Self {
        MetricsFlags { psnr: true, ssim: true }
    }
}

fn default_sampler() -> Sampler {
    Sampler::Ddim
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

fn default_last_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub strengths: Vec<f64>,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Also run the guided variants (full window and last fraction).
    #[serde(default)]
    pub guided: bool,
    /// Guidance step size; None uses 0.5 * beta.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_last_fraction")]
    pub last_fraction: f64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strengths.is_empty() {
            return Err(Error::Config("sweep needs at least one strength".into()));
        }
        for &s in &self.strengths {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("sweep strength {s} must be in [0, 1]")));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Config("sweep substeps must be at least 1".into()));
        }
        if let Some(eta) = self.eta {
            if !eta.is_finite() || eta < 0.0 {
                return Err(Error::Config(format!("sweep eta must be finite and >= 0, got {eta}")));
            }
        }
        if !self.last_fraction.is_finite() || !(0.0..=1.0).contains(&self.last_fraction) {
            return Err(Error::Config(format!(
                "sweep last_fraction must be in [0, 1], got {}",
                self.last_fraction
            )));
        }
        Ok(())
    }

    pub fn effective_eta(&self, beta: f64) -> f64 {
        self.eta.unwrap_or(0.5 * beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Bisect the gaussian_noise sigma so its mean PSNR matches the first
    /// regen attack's within 0.5 dB, per-run, before trials start.
    #[serde(default)]
    pub calibrate_noise_sigma: bool,
    pub dataset: DatasetConfig,
    pub watermark: WatermarkConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default, rename = "attack")]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub metrics: MetricsFlags,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    /// Structural checks shared by every entry point.
    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.dataset.validate()?;
        self.watermark.validate()?;
        self.diffusion.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        let needs_prior = self.sweep.is_some()
            || self.attacks.iter().any(|a| {
                matches!(a, AttackConfig::Regen { .. } | AttackConfig::RegenGuided { .. })
            });
        if needs_prior
            && self.diffusion.prior.is_none()
            && matches!(self.dataset, DatasetConfig::Directory { .. })
        {
            return Err(Error::Config(
                "regeneration on a directory dataset needs diffusion.prior (fit one with fit-prior)"
                    .into(),
            ));
        }
        if self.calibrate_noise_sigma {
            let has_noise =
                self.attacks.iter().any(|a| matches!(a, AttackConfig::GaussianNoise { .. }));
            let has_regen = self.attacks.iter().any(|a| matches!(a, AttackConfig::Regen { .. }));
            if !has_noise || !has_regen {
                return Err(Error::Config(
                    "calibrate_noise_sigma needs both a gaussian_noise and a regen attack".into(),
                ));
            }
        }
        Ok(())
    }

    /// `run` additionally needs something to do.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        if self.attacks.is_empty() {
            return Err(Error::Config("run needs at least one [[attack]]".into()));
        }
        Ok(())
    }

    /// `sweep` additionally needs a [sweep] section.
    pub fn validate_for_sweep(&self) -> Result<()> {
        self.validate()?;
        if self.sweep.is_none() {
            return Err(Error::Config("sweep needs a [sweep] section".into()));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn encode_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config encode error: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 42
output = "out"
threads = 4

[dataset]
mode = "synthetic"
count = 16
width = 32
height = 32
levels = [0.35, 0.65]
variance = 0.02

[watermark]
k = 8
beta = 1.0
mode = "informed"

[diffusion]
schedule = "linear"
t_max = 500

[[attack]]
kind = "gaussian_noise"
sigma = 0.1

[[attack]]
kind = "regen"
strength = 0.3

[metrics]
psnr = true
ssim = false

[sweep]
strengths = [0.0, 0.5, 1.0]
guided = true
eta = 0.15
"#;

    #[test]
    fn full_config_parses_and_validates() {
        let cfg = parse_config(FULL).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.threads, Some(4));
        assert_eq!(cfg.attacks.len(), 2);
        assert!(matches!(cfg.watermark.mode, EmbedMode::Informed));
        assert_eq!(cfg.diffusion.t_max, 500);
        assert!(!cfg.metrics.ssim && cfg.metrics.psnr);
        let sweep = cfg.sweep.as_ref().unwrap();
        assert_eq!(sweep.strengths, vec![0.0, 0.5, 1.0]);
        assert_eq!(sweep.substeps, DEFAULT_SUBSTEPS);
        assert_eq!(sweep.last_fraction, 0.2);
        assert_eq!(sweep.effective_eta(1.0), 0.15);
        cfg.validate_for_run().unwrap();
        cfg.validate_for_sweep().unwrap();
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse_config(
            r#"
seed = 1
output = "o"
[dataset]
mode = "synthetic"
count = 1
width = 8
height = 8
[watermark]
k = 2
beta = 0.5
"#,
        )
        .unwrap();
        assert_eq!(cfg.threads, None);
        assert!(!cfg.calibrate_noise_sigma);
        assert_eq!(cfg.diffusion, DiffusionConfig::default());
        assert_eq!(cfg.metrics, MetricsFlags::default());
        assert!(cfg.sweep.is_none());
        assert!(cfg.attacks.is_empty());
        match &cfg.dataset {
            DatasetConfig::Synthetic { channels, levels, variance, export, .. } => {
                assert_eq!(*channels, 1);
                assert_eq!(levels, &[0.5]);
                assert_eq!(*variance, 0.01);
                assert!(!export);
            }
            other => panic!("wrong dataset {other:?}"),
        }
        cfg.validate().unwrap();
        // But a run needs attacks, and a sweep needs the section.
        assert!(cfg.validate_for_run().is_err());
        assert!(cfg.validate_for_sweep().is_err());
        // Sweep without explicit eta defaults to beta / 2.
        let sweep = SweepConfig {
            strengths: vec![0.5],
            sampler: Sampler::Ddim,
            substeps: 10,
            guided: false,
            eta: None,
            last_fraction: 0.2,
        };
        assert_eq!(sweep.effective_eta(1.0), 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for bad in [
            "seed = 1\noutput = \"o\"\nturbo = true\n[dataset]\nmode = \"synthetic\"\ncount = 1\nwidth = 8\nheight = 8\n[watermark]\nk = 1\nbeta = 1.0\n",
            "seed = 1\noutput = \"o\"\n[dataset]\nmode = \"synthetic\"\ncount = 1\nwidth = 8\nheight = 8\nwobble = 2\n[watermark]\nk = 1\nbeta = 1.0\n",
            "seed = 1\noutput = \"o\"\n[dataset]\nmode = \"synthetic\"\ncount = 1\nwidth = 8\nheight = 8\n[watermark]\nk = 1\nbeta = 1.0\nglitter = \"yes\"\n",
            "seed = 1\noutput = \"o\"\n[dataset]\nmode = \"synthetic\"\ncount = 1\nwidth = 8\nheight = 8\n[watermark]\nk = 1\nbeta = 1.0\n[sweep]\nstrengths = [0.1]\nspeed = 9\n",
        ] {
            assert!(parse_config(bad).is_err(), "should reject: {bad}");
        }
    }

    #[test]
    fn validation_catches_structural_problems() {
        let mut cfg = parse_config(FULL).unwrap();
        match &mut cfg.dataset {
            DatasetConfig::Synthetic { count, .. } => *count = 0,
            _ => unreachable!(),
        }
        assert!(cfg.validate().is_err());

        let mut cfg = parse_config(FULL).unwrap();
        cfg.threads = Some(0);
        assert!(cfg.validate().is_err());

        let mut cfg = parse_config(FULL).unwrap();
        cfg.watermark.beta = -1.0;
        assert!(cfg.validate().is_err());

        // Missing prior file.
        let mut cfg = parse_config(FULL).unwrap();
        cfg.diffusion.prior = Some(PathBuf::from("/definitely/not/here.wmprior"));
        assert!(cfg.validate().is_err());

        // Directory dataset must exist.
        let mut cfg = parse_config(FULL).unwrap();
        cfg.dataset = DatasetConfig::Directory { path: PathBuf::from("/not/a/real/dir") };
        assert!(cfg.validate().is_err());

        // Directory dataset + regen without a prior file.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(FULL).unwrap();
        cfg.dataset = DatasetConfig::Directory { path: dir.path().to_path_buf() };
        assert!(cfg.validate().is_err());

        // Calibration needs both attack kinds present.
        let mut cfg = parse_config(FULL).unwrap();
        cfg.calibrate_noise_sigma = true;
        cfg.validate().unwrap();
        cfg.attacks.retain(|a| !matches!(a, AttackConfig::GaussianNoise { .. }));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_encode() {
        let cfg = parse_config(FULL).unwrap();
        let encoded = encode_config(&cfg).unwrap();
        let back = parse_config(&encoded).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_load_reports_io_and_parse_errors() {
        assert!(load_config(Path::new("/no/such/config.toml")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "seed = \"not a number\"").unwrap();
        match load_config(&p) {
            Err(Error::Config(msg)) => assert!(msg.contains("parse"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
