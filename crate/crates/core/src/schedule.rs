//! Discrete noise schedules.
//!
//! Convention used throughout: `alpha_bar(t)` is the *signal scale*
//! `sqrt(prod_{s<=t} alpha_s)` and `beta_bar(t)` the matching noise scale, so
//! `alpha_bar(t)^2 + beta_bar(t)^2 == 1` holds exactly (the pair is computed
//! from the same running product). The noised sample is
//! `x_t = alpha_bar(t) * x0 + beta_bar(t) * eps`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

/// Running signal/noise scales from per-step alphas:
/// `(sqrt(prod alpha), sqrt(1 - prod alpha))` per step.
pub fn cumulative_scales(alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut prod = 1.0;
    let mut ab = Vec::with_capacity(alphas.len());
    let mut bb = Vec::with_capacity(alphas.len());
    for &a in alphas {
        prod *= a;
        ab.push(prod.sqrt());
        bb.push((1.0 - prod).sqrt());
    }
    (ab, bb)
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                // squared-cosine alpha-bar profile, betas capped at beta_max
                let f = |i: f64| {
                    let v = ((i / steps as f64 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2;
                    v.cos().powi(2)
                };
                (0..steps)
                    .map(|i| {
                        let b = 1.0 - f((i + 1) as f64) / f(i as f64);
                        b.clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        Self::from_betas(kind, beta)
    }

    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let (alpha_bar, beta_bar) = cumulative_scales(&alphas);
        Ok(NoiseSchedule { kind, beta, alpha_bar, beta_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {} outside 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }

    /// All accessors take 1-based timesteps in `1..=steps()`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t - 1]
    }

    pub fn validate_t(&self, t: usize) -> Result<()> {
        self.check_t(t)
    }

    /// Width of the data posterior at step t: `beta_bar^2 / alpha_bar^2`.
    /// Its reciprocal is the mean-alignment weight; it is *not* the ancestral
    /// sampler's noise scale (that is `sqrt(beta_t)`).
    pub fn posterior_sigma_sq(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        let bb = self.beta_bar(t);
        (bb * bb) / (ab * ab)
    }

    pub fn sampler_sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    /// Audit loader: parses and re-validates everything, including that the
    /// stored cumulative scales match a recomputation from the betas.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: NoiseSchedule = serde_json::from_str(s)?;
        let rebuilt = Self::from_betas(raw.kind, raw.beta.clone())?;
        let close = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| (x - y).abs() <= 1e-12)
        };
        if !close(&raw.alpha_bar, &rebuilt.alpha_bar) || !close(&raw.beta_bar, &rebuilt.beta_bar) {
            return Err(Error::invalid(
                "schedule JSON cumulative scales disagree with betas",
            ));
        }
        Ok(rebuilt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_hand_values() {
        // betas (0.1, 0.2): prod alpha = 0.9 * 0.8 = 0.72
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72f64.sqrt()).abs() < 1e-15);
        assert!((s.beta_bar(2).powi(2) - 0.28).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scale_identity_exact() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for (steps, lo, hi) in [(1, 1e-4, 2e-2), (50, 1e-4, 2e-2), (200, 1e-4, 2e-2), (1000, 1e-4, 2e-2)] {
                let s = NoiseSchedule::build(kind, steps, lo, hi).unwrap();
                for t in 1..=steps {
                    let id = s.alpha_bar(t).powi(2) + s.beta_bar(t).powi(2);
                    assert!((id - 1.0).abs() <= 1e-12, "{kind:?} T={steps} t={t}: {id}");
                    assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                }
                // signal scale strictly decreasing, noise scale increasing
                for t in 2..=steps {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    assert!(s.beta_bar(t) >= s.beta_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn long_linear_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
    }

    #[test]
    fn no_noise_degenerate_scales() {
        let (ab, bb) = cumulative_scales(&[1.0, 1.0, 1.0]);
        assert!(ab.iter().all(|&v| v == 1.0));
        assert!(bb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_betas_rejected() {
        assert!(NoiseSchedule::from_betas(ScheduleKind::Linear, vec![]).is_err());
        assert!(NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1.0]).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 2e-2, 1e-4).is_err());
    }

    #[test]
    fn json_round_trip_and_tamper_detection() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 64, 1e-4, 0.999).unwrap();
        let j = s.to_json();
        let back = NoiseSchedule::from_json(&j).unwrap();
        assert_eq!(back.steps(), 64);
        for t in 1..=64 {
            assert_eq!(back.alpha_bar(t), s.alpha_bar(t));
        }
        let tampered = j.replacen("\"beta\": [", "\"beta\": [0.5,", 1);
        assert!(NoiseSchedule::from_json(&tampered).is_err());
    }
}
