//! Variance-preserving noise schedules and the DDPM coefficient algebra.
//!
//! All schedules are specified through the noise coefficient
//! `c_t = √(1 − ᾱ_t)`; β is recovered as `1 − ᾱ_t/ᾱ_{t−1}`, clamped to
//! `[1e-8, 0.999]`, and ᾱ is then recomputed as the running product of
//! `1 − β` so the tables are exactly self-consistent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Sigmoid1,
    Sigmoid2,
    Sigmoid3,
    Linear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Cosine,
        ScheduleKind::Sigmoid1,
        ScheduleKind::Sigmoid2,
        ScheduleKind::Sigmoid3,
        ScheduleKind::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sigmoid1 => "sigmoid1",
            ScheduleKind::Sigmoid2 => "sigmoid2",
            ScheduleKind::Sigmoid3 => "sigmoid3",
            ScheduleKind::Linear => "linear",
        }
    }

    /// Logistic steepness and midpoint of the sigmoid family.
    fn sigmoid_params(self) -> Option<(f64, f64)> {
        match self {
            ScheduleKind::Sigmoid1 => Some((6.0, 0.5)),
            ScheduleKind::Sigmoid2 => Some((10.0, 0.6)),
            ScheduleKind::Sigmoid3 => Some((14.0, 0.65)),
            _ => None,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown schedule {s:?}; expected one of cosine, sigmoid1, sigmoid2, sigmoid3, linear"
                ))
            })
    }
}

/// Precomputed tables for one schedule. Index 0 of `alpha_bar` is the
/// clean state; `beta`/`alpha` are indexed by `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Per-step coefficients of the forward marginal and the reverse update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpmCoefficients {
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    /// `Σ_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub posterior_variance: f64,
    /// `1/√α_t` in `μ = (x_t − k·ε̂)/√α_t`.
    pub mean_scale: f64,
    /// `β_t / √(1 − ᾱ_t)`, the `k` multiplying `ε̂`.
    pub eps_coeff: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Schedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        let t_f = steps as f64;
        let raw_beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_f;
                let (b0, b1) = (scale * 1e-4, scale * 0.02);
                (0..steps)
                    .map(|i| b0 + (b1 - b0) * i as f64 / (t_f - 1.0))
                    .collect()
            }
            _ => {
                let abar: Vec<f64> = (0..=steps)
                    .map(|t| {
                        let u = t as f64 / t_f;
                        if kind == ScheduleKind::Cosine {
                            let f = |u: f64| {
                                ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                                    .cos()
                                    .powi(2)
                            };
                            f(u) / f(0.0)
                        } else {
                            let (a, m) = kind.sigmoid_params().expect("sigmoid kind");
                            let lo = logistic(-a * m);
                            let hi = logistic(a * (1.0 - m));
                            let c = (logistic(a * (u - m)) - lo) / (hi - lo);
                            1.0 - c * c
                        }
                    })
                    .collect();
                (1..=steps)
                    .map(|t| {
                        if abar[t - 1] <= 0.0 {
                            BETA_MAX
                        } else {
                            1.0 - abar[t] / abar[t - 1]
                        }
                    })
                    .collect()
            }
        };
        let beta: Vec<f64> = raw_beta
            .into_iter()
            .map(|b| if b.is_nan() { BETA_MAX } else { b.clamp(BETA_MIN, BETA_MAX) })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            kind,
            steps,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Noise coefficient `√(1 − ᾱ_t)`.
    pub fn noise_coeff(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn coefficients(&self, t: usize) -> Result<DdpmCoefficients> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta[t - 1];
        let one_minus = 1.0 - ab;
        Ok(DdpmCoefficients {
            sqrt_alpha_bar: ab.sqrt(),
            sqrt_one_minus_alpha_bar: one_minus.sqrt(),
            posterior_variance: (1.0 - ab_prev) / one_minus * beta,
            mean_scale: 1.0 / self.alpha[t - 1].sqrt(),
            eps_coeff: beta / one_minus.sqrt(),
        })
    }

    /// Builds a schedule directly from β values (hand-built tables, tests).
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must be non-empty and in (0, 1)".into()));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0];
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            kind: ScheduleKind::Linear,
            steps: betas.len(),
            beta: betas.to_vec(),
            alpha,
            alpha_bar,
        })
    }

    /// Rows `(t, β_t, ᾱ_t, c_t)` for `0 ≤ t ≤ T` (β reported as 0 at t = 0).
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..=self.steps).map(move |t| {
            let b = if t == 0 { 0.0 } else { self.beta(t) };
            (t, b, self.alpha_bar(t), self.noise_coeff(t))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar,c_t\n");
        for (t, b, ab, c) in self.rows() {
            s.push_str(&format!("{t},{b:.17e},{ab:.17e},{c:.17e}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZES: [usize; 4] = [10, 100, 512, 1000];

    #[test]
    fn invariants_hold_for_every_schedule() {
        for kind in ScheduleKind::ALL {
            for t_max in SIZES {
                let s = Schedule::build(kind, t_max).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert_eq!(s.noise_coeff(0), 0.0);
                assert!(s.alpha_bar(t_max) < 1e-3, "{kind} T={t_max}: {}", s.alpha_bar(t_max));
                let mut prod = 1.0;
                for t in 1..=t_max {
                    let b = s.beta(t);
                    assert!(b > 0.0 && b < 1.0);
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind} not decreasing at {t}");
                    assert!(s.noise_coeff(t) > s.noise_coeff(t - 1));
                    prod *= 1.0 - b;
                    assert!((prod - s.alpha_bar(t)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn cosine_reaches_near_zero() {
        let s = Schedule::build(ScheduleKind::Cosine, 1000).unwrap();
        assert!(s.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn sigmoid_family_is_flatter_near_the_data_end() {
        let t_max = 1000;
        let cos = Schedule::build(ScheduleKind::Cosine, t_max).unwrap();
        let s2 = Schedule::build(ScheduleKind::Sigmoid2, t_max).unwrap();
        let s3 = Schedule::build(ScheduleKind::Sigmoid3, t_max).unwrap();
        for t in 1..=t_max / 10 {
            assert!(s2.noise_coeff(t) < cos.noise_coeff(t), "t={t}");
            assert!(s3.noise_coeff(t) <= s2.noise_coeff(t), "t={t}");
        }
        let area = |s: &Schedule| (0..=t_max / 20).map(|t| s.noise_coeff(t)).sum::<f64>();
        assert!(area(&s2) < area(&cos));
        assert!(area(&s3) < area(&cos));
    }

    #[test]
    fn coefficient_identities() {
        for kind in ScheduleKind::ALL {
            let s = Schedule::build(kind, 200).unwrap();
            let c1 = s.coefficients(1).unwrap();
            assert_eq!(c1.posterior_variance, 0.0);
            for t in 1..=200 {
                let c = s.coefficients(t).unwrap();
                let sum = c.sqrt_alpha_bar.powi(2) + c.sqrt_one_minus_alpha_bar.powi(2);
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_built_three_step_schedule() {
        let s = Schedule::from_betas(&[0.1, 0.2, 0.3]).unwrap();
        let expect = [1.0, 0.9, 0.72, 0.504];
        for (t, e) in expect.iter().enumerate() {
            assert!((s.alpha_bar(t) - e).abs() < 1e-15);
        }
        let c2 = s.coefficients(2).unwrap();
        assert!((c2.posterior_variance - (1.0 - 0.9) / (1.0 - 0.72) * 0.2).abs() < 1e-15);
        assert!((c2.eps_coeff - 0.2 / (0.28f64).sqrt()).abs() < 1e-15);
        assert!((c2.mean_scale - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(Schedule::build(ScheduleKind::Cosine, 1).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        let s = Schedule::build(ScheduleKind::Cosine, 10).unwrap();
        assert!(s.coefficients(0).is_err());
        assert!(s.coefficients(11).is_err());
    }

    #[test]
    fn csv_has_header_and_all_rows() {
        let s = Schedule::build(ScheduleKind::Sigmoid2, 16).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("t,beta,alpha_bar,c_t\n"));
        assert_eq!(csv.lines().count(), 18);
    }
}
