use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, Sampler, ddpm_sample_with, train, DiffusionModel, Normalization, TrainBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::{ToyNet1d, ToyNetConfig};
use crate::physics::TukeyLambdaParams;
use crate::schedule::{Schedule, ScheduleKind};
use crate::stats::{kld_samples, mean_var, spearman, std_ratio};
use crate::{Rng, Tensor};

/// Scalar "noise" distributions for the 1D study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Toy1dTarget {
    /// `(P(μ) − μ)/scale` with `μ` uniform over the integers
    /// `min_mean..=max_mean`; the network is conditioned on `μ/scale`.
    Poisson { min_mean: u64, max_mean: u64, scale: f64 },
    TukeyLambda { lambda_shape: f64, sigma_scale: f64 },
}

impl Toy1dTarget {
    pub fn poisson() -> Self {
        Self::Poisson {
            min_mean: 5,
            max_mean: 50,
            scale: 50.0,
        }
    }

    pub fn tukey_lambda(sigma_scale: f64) -> Self {
        Self::TukeyLambda {
            lambda_shape: 0.1,
            sigma_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Poisson {
                min_mean,
                max_mean,
                scale,
            } => {
                if min_mean > max_mean || !(scale > 0.0) {
                    return Err(Error::Config(format!("invalid Poisson target {self:?}")));
                }
            }
            Self::TukeyLambda {
                lambda_shape,
                sigma_scale,
            } => {
                TukeyLambdaParams::new(lambda_shape, 0.0, sigma_scale)?;
            }
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            Self::Poisson { .. } => 1,
            Self::TukeyLambda { .. } => 0,
        }
    }

    /// Draws `n` values with their conditions (`[n, 1]`, Poisson only).
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Vec<f64>, Option<Tensor>)> {
        let cond = self.sample_cond(n, rng)?;
        let values = self.sample_given(cond.as_ref(), n, rng)?;
        Ok((values, cond))
    }

    pub fn sample_cond(&self, n: usize, rng: &mut Rng) -> Result<Option<Tensor>> {
        match *self {
            Self::Poisson {
                min_mean,
                max_mean,
                scale,
            } => {
                let data = (0..n)
                    .map(|_| rng.int_inclusive(min_mean, max_mean) as f64 / scale)
                    .collect();
                Ok(Some(Tensor::new(&[n, 1], data)?))
            }
            Self::TukeyLambda { .. } => Ok(None),
        }
    }

    /// Fresh values for given conditions.
    pub fn sample_given(&self, cond: Option<&Tensor>, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        match (*self, cond) {
            (Self::Poisson { scale, .. }, Some(c)) => {
                if c.shape() != [n, 1] {
                    return Err(Error::shape("toy1d_target", format!("condition {:?} for {n}", c.shape())));
                }
                Ok(c
                    .data()
                    .iter()
                    .map(|&m| {
                        let mu = (m * scale).round();
                        (rng.poisson(mu) as f64 - mu) / scale
                    })
                    .collect())
            }
            (
                Self::TukeyLambda {
                    lambda_shape,
                    sigma_scale,
                },
                None,
            ) => {
                let p = TukeyLambdaParams::new(lambda_shape, 0.0, sigma_scale)?;
                Ok((0..n).map(|_| p.sample_one(rng)).collect())
            }
            _ => Err(Error::InvalidArgument("condition does not match target".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy1dConfig {
    pub diffusion_steps: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub train: TrainConfig,
    pub eval_samples: usize,
    pub ddim_steps: usize,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            hidden: 64,
            depth: 3,
            time_dim: 16,
            train: TrainConfig {
                steps: 5000,
                batch: 256,
                lr: 1e-3,
                lr_end: 1e-4,
            },
            eval_samples: 4000,
            ddim_steps: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Toy1dModel {
    pub target: Toy1dTarget,
    pub model: DiffusionModel<ToyNet1d>,
    pub losses: Vec<f64>,
}

/// Trains a toy ε-predictor on fresh draws of `target` each step.
pub fn train_toy1d(target: Toy1dTarget, kind: ScheduleKind, cfg: &Toy1dConfig, rng: &mut Rng) -> Result<Toy1dModel> {
    target.validate()?;
    let net = ToyNet1d::new(
        ToyNetConfig {
            hidden: cfg.hidden,
            depth: cfg.depth,
            time_dim: cfg.time_dim,
            cond_dim: target.cond_dim(),
            steps: cfg.diffusion_steps,
        },
        rng,
    )?;
    let mut model = DiffusionModel {
        schedule: Schedule::build(kind, cfg.diffusion_steps)?,
        net,
        norm: Normalization::identity(1),
    };
    let losses = train(&mut model, &cfg.train, rng, |b, rng| {
        let (values, cond) = target.sample(b, rng)?;
        Ok(TrainBatch {
            n0: Tensor::new(&[b, 1], values)?,
            cond,
            groups: vec![0; b],
        })
    })?;
    Ok(Toy1dModel { target, model, losses })
}

/// One sampler run against fresh ground truth under the same conditions.
/// For the Poisson target the KLD is taken after rounding generated values
/// onto the integer-count lattice of the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy1dEval {
    pub std_ratio: f64,
    pub kld: f64,
    pub generated_mean: f64,
    pub generated_std: f64,
    pub ground_truth_std: f64,
}

/// Variance of intermediate states per condition level at one reverse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    pub t: usize,
    /// `(μ, mean, variance)` in count units.
    pub levels: Vec<(f64, f64, f64)>,
    /// Mean `|var/μ − 1|` over levels.
    pub rel_error: f64,
}

impl Toy1dModel {
    pub fn evaluate(&self, sampler: Sampler, cfg: &Toy1dConfig, rng: &mut Rng) -> Result<Toy1dEval> {
        Ok(self.evaluate_with_curves(sampler, cfg, &[], rng)?.0)
    }

    /// Generates `eval_samples` values; for the Poisson target and DDPM,
    /// also records per-level variance curves at the reverse steps in `log_steps`.
    pub fn evaluate_with_curves(
        &self,
        sampler: Sampler,
        cfg: &Toy1dConfig,
        log_steps: &[usize],
        rng: &mut Rng,
    ) -> Result<(Toy1dEval, Vec<StepCurve>)> {
        let n = cfg.eval_samples;
        let cond = self.target.sample_cond(n, rng)?;
        let gt = self.target.sample_given(cond.as_ref(), n, rng)?;
        let groups = vec![0; n];
        let mut curves = Vec::new();
        let generated = match sampler {
            Sampler::Ddpm => {
                let scale = match self.target {
                    Toy1dTarget::Poisson { scale, .. } => Some(scale),
                    Toy1dTarget::TukeyLambda { .. } => None,
                };
                let mut observe = |t: usize, x: &Tensor| {
                    if let (Some(scale), Some(c)) = (scale, cond.as_ref()) {
                        if log_steps.contains(&t) {
                            curves.push(level_curve(t, x.data(), c.data(), scale));
                        }
                    }
                };
                ddpm_sample_with(&self.model, &cond, &[n, 1], &groups, rng, &mut observe)?
            }
            Sampler::Ddim => ddim_sample(&self.model, &cond, &[n, 1], &groups, cfg.ddim_steps, 0.0, rng)?,
        };
        let (m, v) = mean_var(generated.data())?;
        let (_, gv) = mean_var(&gt)?;
        let on_lattice: Vec<f64> = match self.target {
            Toy1dTarget::Poisson { scale, .. } => generated.data().iter().map(|x| (x * scale).round() / scale).collect(),
            Toy1dTarget::TukeyLambda { .. } => generated.data().to_vec(),
        };
        let eval = Toy1dEval {
            std_ratio: std_ratio(generated.data(), &gt)?,
            kld: kld_samples(&gt, &on_lattice)?,
            generated_mean: m,
            generated_std: v.sqrt(),
            ground_truth_std: gv.sqrt(),
        };
        Ok((eval, curves))
    }
}

fn level_curve(t: usize, x: &[f64], cond: &[f64], scale: f64) -> StepCurve {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (&v, &c) in x.iter().zip(cond) {
        groups.entry((c * scale).round() as u64).or_default().push(v * scale);
    }
    let levels: Vec<(f64, f64, f64)> = groups
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&mu, v)| {
            let (m, var) = mean_var(v).expect("non-empty");
            (mu as f64, m, var)
        })
        .collect();
    let rel_error = levels.iter().map(|&(mu, _, v)| (v / mu - 1.0).abs()).sum::<f64>() / levels.len().max(1) as f64;
    StepCurve { t, levels, rel_error }
}

/// Reverse steps at which the Poisson study records curves.
pub fn default_log_steps(steps: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.0]
        .iter()
        .map(|f| (f * steps as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonScheduleResult {
    pub schedule: ScheduleKind,
    pub final_loss: f64,
    pub ddpm: Toy1dEval,
    pub ddim: Toy1dEval,
    pub curves: Vec<StepCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonReport {
    pub config: Toy1dConfig,
    pub results: Vec<PoissonScheduleResult>,
}

impl PoissonReport {
    pub fn get(&self, kind: ScheduleKind) -> Option<&PoissonScheduleResult> {
        self.results.iter().find(|r| r.schedule == kind)
    }

    /// Rows `schedule,t,mu,mean,var`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("schedule,t,mu,mean,var\n");
        for r in &self.results {
            for c in &r.curves {
                for &(mu, m, v) in &c.levels {
                    s.push_str(&format!("{},{},{mu},{m:.9e},{v:.9e}\n", r.schedule, c.t));
                }
            }
        }
        s
    }
}

fn mean_tail(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

/// Trains one conditional model per schedule on the Poisson target and
/// evaluates it with DDPM (with step curves) and DDIM.
pub fn run_poisson1d(schedules: &[ScheduleKind], cfg: &Toy1dConfig, rng: &Rng) -> Result<PoissonReport> {
    let target = Toy1dTarget::poisson();
    let mut results = Vec::new();
    for (i, &kind) in schedules.iter().enumerate() {
        let mut r = rng.substream(i as u64);
        let m = train_toy1d(target, kind, cfg, &mut r)?;
        let er = rng.substream(1000 + i as u64);
        let (ddpm, curves) = m.evaluate_with_curves(
            Sampler::Ddpm,
            cfg,
            &default_log_steps(cfg.diffusion_steps),
            &mut er.clone(),
        )?;
        let ddim = m.evaluate(Sampler::Ddim, cfg, &mut er.substream(1))?;
        results.push(PoissonScheduleResult {
            schedule: kind,
            final_loss: mean_tail(&m.losses),
            ddpm,
            ddim,
            curves,
        });
    }
    Ok(PoissonReport {
        config: cfg.clone(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyLambdaRow {
    pub sigma_scale: f64,
    pub schedule: ScheduleKind,
    pub std_ratio: f64,
    pub kld: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyLambdaReport {
    pub config: Toy1dConfig,
    pub sigmas: Vec<f64>,
    pub rows: Vec<TukeyLambdaRow>,
}

impl TukeyLambdaReport {
    pub fn ratio(&self, sigma: f64, kind: ScheduleKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sigma_scale == sigma && r.schedule == kind)
            .map(|r| r.std_ratio)
    }

    /// Number of scales where `kind` is strictly closer to 1 than `baseline`.
    pub fn wins(&self, kind: ScheduleKind, baseline: ScheduleKind) -> usize {
        self.sigmas
            .iter()
            .filter(|&&s| match (self.ratio(s, kind), self.ratio(s, baseline)) {
                (Some(a), Some(b)) => (a - 1.0).abs() < (b - 1.0).abs(),
                _ => false,
            })
            .count()
    }

    /// `|ratio(a) − ratio(b)|` per scale.
    pub fn gaps(&self, a: ScheduleKind, b: ScheduleKind) -> Vec<f64> {
        self.sigmas
            .iter()
            .filter_map(|&s| Some((self.ratio(s, a)? - self.ratio(s, b)?).abs()))
            .collect()
    }

    /// Spearman correlation between scale and the gap between two schedules.
    pub fn gap_trend(&self, a: ScheduleKind, b: ScheduleKind) -> Result<f64> {
        spearman(&self.sigmas, &self.gaps(a, b))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,schedule,std_ratio,kld\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6e}\n", r.sigma_scale, r.schedule, r.std_ratio, r.kld));
        }
        s
    }
}

pub const DEFAULT_TL_SIGMAS: [f64; 7] = [0.065, 0.08, 0.1, 0.13, 0.17, 0.22, 0.3];

/// Std ratio under DDPM for every (scale, schedule) pair.
pub fn run_tukey_lambda(
    sigmas: &[f64],
    schedules: &[ScheduleKind],
    cfg: &Toy1dConfig,
    rng: &Rng,
) -> Result<TukeyLambdaReport> {
    if sigmas.is_empty() || schedules.is_empty() {
        return Err(Error::Config("tukey_lambda needs at least one scale and schedule".into()));
    }
    let mut rows = Vec::new();
    for (i, &sigma) in sigmas.iter().enumerate() {
        for (j, &kind) in schedules.iter().enumerate() {
            let id = (i * schedules.len() + j) as u64;
            let m = train_toy1d(Toy1dTarget::tukey_lambda(sigma), kind, cfg, &mut rng.substream(id))?;
            let e = m.evaluate(Sampler::Ddpm, cfg, &mut rng.substream(1000 + i as u64))?;
            rows.push(TukeyLambdaRow {
                sigma_scale: sigma,
                schedule: kind,
                std_ratio: e.std_ratio,
                kld: e.kld,
            });
        }
    }
    Ok(TukeyLambdaReport {
        config: cfg.clone(),
        sigmas: sigmas.to_vec(),
        rows,
    })
}
