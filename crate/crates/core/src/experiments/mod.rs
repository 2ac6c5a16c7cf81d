//! End-to-end study runners producing JSON summaries and CSV curves.

mod toy1d;
mod toy2d;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use toy1d::{
    default_log_steps, run_poisson1d, run_tukey_lambda, train_toy1d, PoissonReport, PoissonScheduleResult, StepCurve,
    Toy1dConfig, Toy1dEval, Toy1dModel, Toy1dTarget, TukeyLambdaReport, TukeyLambdaRow,
    DEFAULT_TL_SIGMAS,
};
pub use toy2d::{
    diffusion_generator, noise_metrics, oracle_normalization, run_denoiser_study, run_toy2d, stitched_noise,
    synthetic_scene, synthetic_scenes, toy_camera, train_toy2d, DenoiserStudy, DenoiserStudyConfig, NoiseMetrics,
    Toy2dConfig, Toy2dReport, Toy2dVariant, VariantResult,
};

use crate::error::{Error, Result};
use crate::mmse::{verify_proposition_mc, MmseReport, MmseSetup};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Poisson1d,
    TukeyLambda,
    Toy2d,
    Mmse,
    ScheduleDump,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        Self::Poisson1d,
        Self::TukeyLambda,
        Self::Toy2d,
        Self::Mmse,
        Self::ScheduleDump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Poisson1d => "poisson1d",
            Self::TukeyLambda => "tukey_lambda",
            Self::Toy2d => "toy2d",
            Self::Mmse => "mmse",
            Self::ScheduleDump => "schedule_dump",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
            Error::Config(format!("unknown experiment {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmseGridRow {
    pub sigma2: f64,
    pub sigma1: f64,
    pub report: MmseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmseStudy {
    pub gaussian: Vec<MmseGridRow>,
    pub gmm: Vec<MmseGridRow>,
}

impl MmseStudy {
    pub fn max_gaussian_rel_err(&self) -> f64 {
        self.gaussian.iter().map(|r| r.report.rel_err).fold(0.0, f64::max)
    }

    pub fn max_gmm_rel_err(&self) -> f64 {
        self.gmm.iter().map(|r| r.report.rel_err).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("prior,sigma2,sigma1,analytic,empirical,rel_err\n");
        for (name, rows) in [("gaussian", &self.gaussian), ("gmm", &self.gmm)] {
            for r in rows {
                s.push_str(&format!(
                    "{name},{},{},{:.9e},{:.9e},{:.3e}\n",
                    r.sigma2, r.sigma1, r.report.analytic, r.report.empirical, r.report.rel_err
                ));
            }
        }
        s
    }
}

/// Monte-Carlo check of the variance-shrinkage formula over a grid of
/// Gaussian priors and, for the mixture case, over measurement noise levels.
pub fn run_mmse(sigma2s: &[f64], sigma1s: &[f64], n_samples: usize, rng: &Rng) -> Result<MmseStudy> {
    let mut gaussian = Vec::new();
    let mut gmm = Vec::new();
    let mut id = 0;
    for &s2 in sigma2s {
        for &s1 in sigma1s {
            let setup = MmseSetup::gaussian(0.0, s2, s1)?;
            gaussian.push(MmseGridRow {
                sigma2: s2,
                sigma1: s1,
                report: verify_proposition_mc(&setup, n_samples, &rng.substream(id))?,
            });
            id += 1;
        }
    }
    for &s1 in sigma1s {
        let setup = MmseSetup::gmm(vec![0.3, 0.7], vec![-1.0, 1.0], vec![0.5, 0.3], s1)?;
        gmm.push(MmseGridRow {
            sigma2: setup.prior_variance().sqrt(),
            sigma1: s1,
            report: verify_proposition_mc(&setup, n_samples, &rng.substream(id))?,
        });
        id += 1;
    }
    Ok(MmseStudy { gaussian, gmm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_unknown_lists_choices() {
        for e in ExperimentName::ALL {
            assert_eq!(e.name().parse::<ExperimentName>().unwrap(), e);
        }
        let err = "toy3d".parse::<ExperimentName>().unwrap_err().to_string();
        assert!(err.contains("poisson1d") && err.contains("schedule_dump"), "{err}");
    }

    #[test]
    fn mmse_study_small_grid() {
        let s = run_mmse(&[1.0], &[0.0, 1.0], 100_000, &Rng::new(3, 0)).unwrap();
        assert_eq!(s.gaussian.len(), 2);
        assert_eq!(s.gmm.len(), 2);
        assert!(s.max_gaussian_rel_err() < 0.03);
        assert!(s.max_gmm_rel_err() < 0.05);
        assert_eq!(s.to_csv().lines().count(), 5);
    }
}
