//! Forward-process noise schedules.
//!
//! A schedule over `t_max` steps fixes per-step variances `beta_t = 1 - alpha_t`
//! and the cumulative products `alpha_bar_t = prod_{s<=t} alpha_s`, with
//! `alpha_bar_0 = 1`. Two families are provided:
//!
//! - linear: beta_t linearly spaced from 1e-4 to 0.02 (the standard DDPM range)
//! - cosine: alpha_bar_t = cos^2((t/T + 0.008)/1.008 * pi/2), normalized so
//!   alpha_bar_0 = 1, with alpha_t recovered as ratios
//!
//! Steps are 1-based: t runs over 1..=t_max, and accessors accept t = 0 for
//! the identity endpoint.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidParam(format!("unknown schedule {other:?}"))),
        }
    }
}

pub const DEFAULT_T_MAX: usize = 1000;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_max: usize,
    /// beta[t-1] is the step-t variance.
    beta: Vec<f64>,
    /// alpha[t-1] = 1 - beta[t-1] (or the cosine cumulative ratio).
    alpha: Vec<f64>,
    /// alpha_bar[t] for t in 0..=t_max; alpha_bar[0] = 1.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidParam("schedule needs at least one step".into()));
        }
        match kind {
            ScheduleKind::Linear => {
                let beta: Vec<f64> = (1..=t_max)
                    .map(|t| {
                        if t_max == 1 {
                            LINEAR_BETA_START
                        } else {
                            LINEAR_BETA_START
                                + (t - 1) as f64 / (t_max - 1) as f64
                                    * (LINEAR_BETA_END - LINEAR_BETA_START)
                        }
                    })
                    .collect();
                let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
                let mut alpha_bar = Vec::with_capacity(t_max + 1);
                alpha_bar.push(1.0);
                let mut prod = 1.0;
                for &a in &alpha {
                    prod *= a;
                    alpha_bar.push(prod);
                }
                Ok(NoiseSchedule { kind, t_max, beta, alpha, alpha_bar })
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let arg = (t / t_max as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
                    arg.cos() * arg.cos()
                };
                let f0 = f(0.0);
                let mut alpha_bar = Vec::with_capacity(t_max + 1);
                alpha_bar.push(1.0);
                for t in 1..=t_max {
                    alpha_bar.push(f(t as f64) / f0);
                }
                let alpha: Vec<f64> =
                    (1..=t_max).map(|t| alpha_bar[t] / alpha_bar[t - 1]).collect();
                let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
                Ok(NoiseSchedule { kind, t_max, beta, alpha, alpha_bar })
            }
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Step variance beta_t, t in 1..=t_max.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta({t}) out of range 1..={}", self.t_max);
        self.beta[t - 1]
    }

    /// alpha_t = 1 - beta_t, t in 1..=t_max.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "alpha({t}) out of range 1..={}", self.t_max);
        self.alpha[t - 1]
    }

    /// Cumulative product alpha_bar_t, t in 0..=t_max; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar({t}) out of range 0..={}", self.t_max);
        self.alpha_bar[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_and_range() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        for t in 1..=1000 {
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_consistent() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(kind, 500).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            let mut prod = 1.0;
            for t in 1..=500 {
                assert!(
                    s.alpha_bar(t) < s.alpha_bar(t - 1),
                    "{kind:?}: alpha_bar not strictly decreasing at t = {t}"
                );
                prod *= s.alpha(t);
                assert!(
                    (s.alpha_bar(t) - prod).abs() <= 1e-12,
                    "{kind:?}: alpha_bar({t}) = {} vs running product {prod}",
                    s.alpha_bar(t)
                );
                assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            }
        }
    }

    #[test]
    fn terminal_signal_is_negligible_at_default_length() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(kind, DEFAULT_T_MAX).unwrap();
            assert!(
                s.alpha_bar(DEFAULT_T_MAX) < 1e-4,
                "{kind:?}: alpha_bar(T) = {}",
                s.alpha_bar(DEFAULT_T_MAX)
            );
        }
    }

    #[test]
    fn linear_terminal_value_matches_log_sum() {
        // Independent route: alpha_bar(T) = exp(sum ln(1 - beta_t)).
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        let log_sum: f64 = (1..=1000).map(|t| (1.0 - s.beta(t)).ln()).sum();
        let expect = log_sum.exp();
        let got = s.alpha_bar(1000);
        assert!((got - expect).abs() <= 1e-12 * expect.max(1e-30) + 1e-18, "{got} vs {expect}");
    }

    #[test]
    fn cosine_formula_spot_check() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let f = |t: f64| {
            let arg = (t / 100.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        for t in [1usize, 37, 100] {
            let expect = f(t as f64) / f(0.0);
            assert!((s.alpha_bar(t) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_lengths() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0).is_err());
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }
}
