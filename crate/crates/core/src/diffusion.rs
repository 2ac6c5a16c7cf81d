//! Forward noising, the ε-prediction objective, and DDPM/DDIM samplers,
//! generic over the network and its conditioning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Bind, PatchCond, ToyNet1d, TwoBranchNet};
use crate::schedule::Schedule;
use crate::tensor::{check_finite, cosine_annealing_lr, AdamState};
use crate::{Graph, ParamSet, Rng, Tensor, Var};

/// An ε-predictor with batched conditioning.
pub trait EpsModel {
    type Cond;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn predict(&self, g: &mut Graph, bind: Bind, x_t: Var, t: &[usize], cond: &Self::Cond) -> Result<Var>;
}

impl EpsModel for ToyNet1d {
    type Cond = Option<Tensor>;

    fn params(&self) -> &ParamSet {
        ToyNet1d::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        ToyNet1d::params_mut(self)
    }

    fn predict(&self, g: &mut Graph, bind: Bind, x_t: Var, t: &[usize], cond: &Self::Cond) -> Result<Var> {
        self.forward(g, bind, x_t, t, cond.as_ref())
    }
}

impl EpsModel for TwoBranchNet {
    type Cond = PatchCond;

    fn params(&self) -> &ParamSet {
        TwoBranchNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        TwoBranchNet::params_mut(self)
    }

    fn predict(&self, g: &mut Graph, bind: Bind, x_t: Var, t: &[usize], cond: &Self::Cond) -> Result<Var> {
        self.forward(g, bind, x_t, t, cond)
    }
}

/// Affine map between noise units and network units, one `(shift, scale)`
/// per group (camera setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(groups: usize) -> Self {
        Self {
            shift: vec![0.0; groups],
            scale: vec![1.0; groups],
        }
    }

    /// Per-group mean and standard deviation of `samples[g]`.
    pub fn standardize(samples: &[Vec<f64>]) -> Result<Self> {
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for (k, s) in samples.iter().enumerate() {
            let (m, v) = crate::stats::mean_var(s)?;
            if !(v > 0.0) {
                return Err(Error::Config(format!("group {k} has zero variance")));
            }
            shift.push(m);
            scale.push(v.sqrt());
        }
        Ok(Self { shift, scale })
    }

    pub fn groups(&self) -> usize {
        self.shift.len()
    }

    fn check(&self, groups: &[usize], batch: usize) -> Result<()> {
        if groups.len() != batch {
            return Err(Error::shape(
                "normalization",
                format!("{} group labels for batch {batch}", groups.len()),
            ));
        }
        if let Some(g) = groups.iter().find(|&&g| g >= self.groups()) {
            return Err(Error::InvalidArgument(format!(
                "normalization group {g} out of {}",
                self.groups()
            )));
        }
        Ok(())
    }

    /// `(x − shift)/scale`, per leading-axis sample.
    pub fn normalize(&self, x: &Tensor, groups: &[usize]) -> Result<Tensor> {
        self.apply(x, groups, |v, sh, sc| (v - sh) / sc)
    }

    pub fn denormalize(&self, x: &Tensor, groups: &[usize]) -> Result<Tensor> {
        self.apply(x, groups, |v, sh, sc| v * sc + sh)
    }

    fn apply(&self, x: &Tensor, groups: &[usize], f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let b = x.shape()[0];
        self.check(groups, b)?;
        let inner = x.len() / b;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let g = groups[i / inner];
            *v = f(*v, self.shift[g], self.scale[g]);
        }
        Ok(out)
    }
}

/// Schedule, ε-predictor and normalization.
#[derive(Debug, Clone)]
pub struct DiffusionModel<N> {
    pub schedule: Schedule,
    pub net: N,
    pub norm: Normalization,
}

/// `n_t = √ᾱ_t·n0 + √(1−ᾱ_t)·ε`; returns `(n_t, ε)`. `t = 0` returns `n0`.
pub fn q_sample(n0: &Tensor, t: usize, schedule: &Schedule, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [0, {}]",
            schedule.steps()
        )));
    }
    let a = schedule.alpha_bar(t).sqrt();
    let s = schedule.noise_coeff(t);
    let eps = Tensor::from_fn(n0.shape(), |_| rng.normal());
    let nt = n0.zip_map(&eps, |x, e| a * x + s * e)?;
    Ok((nt, eps))
}

/// One training batch in noise units.
#[derive(Debug, Clone)]
pub struct TrainBatch<C> {
    pub n0: Tensor,
    pub cond: C,
    /// Normalization group per sample.
    pub groups: Vec<usize>,
}

fn forward_noise_batch(n0: &Tensor, t: &[usize], schedule: &Schedule, rng: &mut Rng) -> (Tensor, Tensor) {
    let b = n0.shape()[0];
    let inner = n0.len() / b;
    let eps = Tensor::from_fn(n0.shape(), |_| rng.normal());
    let mut nt = n0.clone();
    for (i, v) in nt.data_mut().iter_mut().enumerate() {
        let ti = t[i / inner];
        *v = schedule.alpha_bar(ti).sqrt() * *v + schedule.noise_coeff(ti) * eps.data()[i];
    }
    (nt, eps)
}

/// Loss `‖ε − ε_θ(n_t, t, ·)‖²` (mean over elements) for uniformly drawn
/// `t ∈ [1, T]`, followed by one Adam update.
pub fn training_step<N: EpsModel>(
    model: &mut DiffusionModel<N>,
    batch: &TrainBatch<N::Cond>,
    rng: &mut Rng,
    adam: &mut AdamState,
) -> Result<f64> {
    let b = batch.n0.shape()[0];
    let steps = model.schedule.steps();
    let t: Vec<usize> = (0..b).map(|_| 1 + rng.index(steps)).collect();
    let n0 = model.norm.normalize(&batch.n0, &batch.groups)?;
    let (nt, eps) = forward_noise_batch(&n0, &t, &model.schedule, rng);
    let mut g = Graph::new();
    let x = g.constant(nt);
    let pred = model.net.predict(&mut g, Bind::train(model.net.params()), x, &t, &batch.cond)?;
    let target = g.constant(eps);
    let loss = g.mse_loss(pred, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {value} at optimizer step {}",
            adam.step_count()
        )));
    }
    let grads = g.backward(loss)?;
    grads.accumulate_into(model.net.params_mut());
    adam.step(model.net.params_mut())?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_end: f64,
}

/// Runs `config.steps` training steps with cosine learning-rate annealing;
/// `data` draws each batch. Returns the per-step losses.
pub fn train<N, F>(model: &mut DiffusionModel<N>, config: &TrainConfig, rng: &mut Rng, mut data: F) -> Result<Vec<f64>>
where
    N: EpsModel,
    F: FnMut(usize, &mut Rng) -> Result<TrainBatch<N::Cond>>,
{
    if config.steps == 0 || config.batch == 0 {
        return Err(Error::Config("training needs steps > 0 and batch > 0".into()));
    }
    let mut adam = AdamState::new(
        model.net.params(),
        crate::tensor::AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        adam.set_lr(cosine_annealing_lr(step, config.steps, config.lr, config.lr_end));
        let batch = data(config.batch, rng)?;
        losses.push(training_step(model, &batch, rng, &mut adam)?);
    }
    Ok(losses)
}

fn predict_eps<N: EpsModel>(model: &DiffusionModel<N>, x: &Tensor, t: usize, cond: &N::Cond) -> Result<Tensor> {
    let b = x.shape()[0];
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = model
        .net
        .predict(&mut g, Bind::frozen(model.net.params()), v, &vec![t; b], cond)?;
    let eps = g.take(out);
    if eps.shape() != x.shape() {
        return Err(Error::shape(
            "predict_eps",
            format!("prediction {:?} for input {:?}", eps.shape(), x.shape()),
        ));
    }
    Ok(eps)
}

fn numeric_guard(x: &Tensor, sampler: &str, t: usize) -> Result<()> {
    check_finite(x, &format!("{sampler} sampling at step {t}"))
}

/// Ancestral DDPM sampling from `ñ_T ~ N(0, I)` of `shape`; returns noise
/// in original units. `observe(t, x)` sees every normalized state `x_t`,
/// from `t = T` down to `t = 0`.
pub fn ddpm_sample_with<N: EpsModel>(
    model: &DiffusionModel<N>,
    cond: &N::Cond,
    shape: &[usize],
    groups: &[usize],
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let mut x = Tensor::from_fn(shape, |_| rng.normal());
    observe(model.schedule.steps(), &x);
    for t in (1..=model.schedule.steps()).rev() {
        let c = model.schedule.coefficients(t)?;
        let eps = predict_eps(model, &x, t, cond)?;
        let sd = c.posterior_variance.sqrt();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| {
                let mu = c.mean_scale * (xv - c.eps_coeff * e);
                if t > 1 {
                    mu + sd * rng.normal()
                } else {
                    mu
                }
            })
            .collect();
        x = Tensor::new(shape, data)?;
        numeric_guard(&x, "DDPM", t)?;
        observe(t - 1, &x);
    }
    model.norm.denormalize(&x, groups)
}

pub fn ddpm_sample<N: EpsModel>(
    model: &DiffusionModel<N>,
    cond: &N::Cond,
    shape: &[usize],
    groups: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    ddpm_sample_with(model, cond, shape, groups, rng, |_, _| {})
}

/// `S` timesteps `1 + i·⌊T/S⌋`, in decreasing order.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "DDIM needs 1 ≤ S ≤ T, got S={steps}, T={total}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps).rev().map(|i| 1 + i * stride).collect())
}

/// DDIM over an explicit, strictly decreasing timestep list. `eta = 0` is
/// deterministic given the starting noise; `eta = 1` with every timestep
/// reproduces the DDPM transition.
pub fn ddim_sample_with_timesteps<N: EpsModel>(
    model: &DiffusionModel<N>,
    cond: &N::Cond,
    shape: &[usize],
    groups: &[usize],
    timesteps: &[usize],
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let total = model.schedule.steps();
    if timesteps.is_empty()
        || timesteps.windows(2).any(|w| w[0] <= w[1])
        || timesteps.iter().any(|&t| t == 0 || t > total)
    {
        return Err(Error::InvalidArgument(format!(
            "DDIM timesteps must be strictly decreasing within [1, {total}]"
        )));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be non-negative, got {eta}")));
    }
    let mut x = Tensor::from_fn(shape, |_| rng.normal());
    for (i, &t) in timesteps.iter().enumerate() {
        let prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let ab = model.schedule.alpha_bar(t);
        let ab_prev = model.schedule.alpha_bar(prev);
        let eps = predict_eps(model, &x, t, cond)?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &e)| {
                let x0 = (xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
                let mut next = ab_prev.sqrt() * x0 + dir * e;
                if sigma > 0.0 {
                    next += sigma * rng.normal();
                }
                next
            })
            .collect();
        x = Tensor::new(shape, data)?;
        numeric_guard(&x, "DDIM", t)?;
    }
    model.norm.denormalize(&x, groups)
}

pub fn ddim_sample<N: EpsModel>(
    model: &DiffusionModel<N>,
    cond: &N::Cond,
    shape: &[usize],
    groups: &[usize],
    steps: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let ts = ddim_timesteps(model.schedule.steps(), steps)?;
    ddim_sample_with_timesteps(model, cond, shape, groups, &ts, eta, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::Config(format!("unknown sampler {s:?}; expected ddpm or ddim"))),
        }
    }
}

/// Samples with either sampler; `steps` applies to DDIM only.
pub fn sample<N: EpsModel>(
    model: &DiffusionModel<N>,
    sampler: Sampler,
    steps: usize,
    cond: &N::Cond,
    shape: &[usize],
    groups: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    match sampler {
        Sampler::Ddpm => ddpm_sample(model, cond, shape, groups, rng),
        Sampler::Ddim => ddim_sample(model, cond, shape, groups, steps, 0.0, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ToyNetConfig;
    use crate::schedule::ScheduleKind;
    use crate::stats::{ks_two_sample, mean_var};

    /// Predicts the exact noise that maps a known `n0` to `x_t`.
    struct Oracle {
        n0: Tensor,
        schedule: Schedule,
        params: ParamSet,
    }

    impl EpsModel for Oracle {
        type Cond = ();

        fn params(&self) -> &ParamSet {
            &self.params
        }

        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }

        fn predict(&self, g: &mut Graph, _: Bind, x_t: Var, t: &[usize], _: &()) -> Result<Var> {
            let x = g.value(x_t).clone();
            let inner = x.len() / t.len();
            let eps = Tensor::from_fn(x.shape(), |i| {
                let ti = t[i / inner];
                let ab = self.schedule.alpha_bar(ti);
                (x.data()[i] - ab.sqrt() * self.n0.data()[i]) / (1.0 - ab).sqrt()
            });
            let c = g.constant(eps);
            let z = g.constant(Tensor::zeros(x.shape()));
            let xz = g.mul(x_t, z)?;
            g.add(c, xz)
        }
    }

    fn oracle(n0: Tensor, schedule: Schedule) -> DiffusionModel<Oracle> {
        DiffusionModel {
            schedule: schedule.clone(),
            net: Oracle {
                n0,
                schedule,
                params: ParamSet::new(),
            },
            norm: Normalization::identity(1),
        }
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            shift: vec![0.3, -1.0],
            scale: vec![2.0, 0.01],
        };
        let mut rng = Rng::new(1, 0);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let groups = [0, 1, 1, 0];
        let back = n.denormalize(&n.normalize(&x, &groups).unwrap(), &groups).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(n.normalize(&x, &[0, 2, 0, 0]).is_err());
    }

    #[test]
    fn q_sample_boundary_and_moments() {
        let s = Schedule::build(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = Rng::new(2, 0);
        let n0 = Tensor::full(&[8], 0.7);
        assert_eq!(q_sample(&n0, 0, &s, &mut rng).unwrap().0, n0);
        let n = 1_000_000;
        let (nt, _) = q_sample(&Tensor::zeros(&[n]), 40, &s, &mut rng).unwrap();
        let (_, v) = mean_var(nt.data()).unwrap();
        assert!((v - (1.0 - s.alpha_bar(40))).abs() / (1.0 - s.alpha_bar(40)) < 0.01);
        let (nt, _) = q_sample(&Tensor::full(&[n], 2.0), 40, &s, &mut rng).unwrap();
        let (m, _) = mean_var(nt.data()).unwrap();
        let expect = 2.0 * s.alpha_bar(40).sqrt();
        assert!((m - expect).abs() < 4.0 * (1.0 / n as f64).sqrt());
        assert!(q_sample(&n0, 101, &s, &mut rng).is_err());
    }

    #[test]
    fn oracle_net_has_zero_loss() {
        let s = Schedule::build(ScheduleKind::Cosine, 50).unwrap();
        let mut rng = Rng::new(3, 0);
        let n0 = Tensor::randn(&[16, 1], 1.0, &mut rng);
        let mut m = oracle(n0.clone(), s);
        let mut adam = AdamState::new(m.net.params(), Default::default());
        let batch = TrainBatch {
            n0,
            cond: (),
            groups: vec![0; 16],
        };
        let loss = training_step(&mut m, &batch, &mut rng, &mut adam).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn single_step_oracle_recovers_data_exactly() {
        let s = Schedule::from_betas(&[0.3]).unwrap();
        let mut rng = Rng::new(4, 0);
        let n0 = Tensor::randn(&[32], 1.0, &mut rng);
        let m = oracle(n0.clone(), s);
        let out = ddpm_sample(&m, &(), &[32], &[0; 32], &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(n0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_reverse_step_is_posterior_mean() {
        let s = Schedule::build(ScheduleKind::Sigmoid2, 20).unwrap();
        let mut rng = Rng::new(5, 0);
        let n0 = Tensor::randn(&[64], 1.0, &mut rng);
        let t = 9;
        let (xt, _) = q_sample(&n0, t, &s, &mut rng).unwrap();
        let m = oracle(n0.clone(), s.clone());
        let eps = predict_eps(&m, &xt, t, &()).unwrap();
        let c = s.coefficients(t).unwrap();
        let (ab, abp, beta) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
        for i in 0..64 {
            let mu = c.mean_scale * (xt.data()[i] - c.eps_coeff * eps.data()[i]);
            let post = abp.sqrt() * beta / (1.0 - ab) * n0.data()[i]
                + s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab) * xt.data()[i];
            assert!((mu - post).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_bad_subsequences_and_is_deterministic() {
        let s = Schedule::build(ScheduleKind::Cosine, 10).unwrap();
        let mut rng = Rng::new(6, 0);
        let m = oracle(Tensor::zeros(&[4]), s);
        assert!(ddim_sample_with_timesteps(&m, &(), &[4], &[0; 4], &[5, 5, 1], 0.0, &mut rng).is_err());
        assert!(ddim_sample_with_timesteps(&m, &(), &[4], &[0; 4], &[11, 1], 0.0, &mut rng).is_err());
        assert!(ddim_sample(&m, &(), &[4], &[0; 4], 20, 0.0, &mut rng).is_err());
        assert_eq!(ddim_timesteps(1000, 100).unwrap()[..3], [991, 981, 971]);
        let a = ddim_sample(&m, &(), &[4], &[0; 4], 5, 0.0, &mut Rng::new(9, 0)).unwrap();
        let b = ddim_sample(&m, &(), &[4], &[0; 4], 5, 0.0, &mut Rng::new(9, 0)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    fn toy_model(schedule: ScheduleKind, seed: u64) -> DiffusionModel<ToyNet1d> {
        let steps = 100;
        DiffusionModel {
            schedule: Schedule::build(schedule, steps).unwrap(),
            net: ToyNet1d::new(
                ToyNetConfig {
                    hidden: 32,
                    steps,
                    ..Default::default()
                },
                &mut Rng::new(seed, 0),
            )
            .unwrap(),
            norm: Normalization::identity(1),
        }
    }

    fn gaussian_batch(b: usize, rng: &mut Rng) -> Result<TrainBatch<Option<Tensor>>> {
        Ok(TrainBatch {
            n0: Tensor::from_fn(&[b, 1], |_| 0.5 * rng.normal()),
            cond: None,
            groups: vec![0; b],
        })
    }

    #[test]
    fn toy_training_reduces_loss_and_matches_target_std() {
        let mut m = toy_model(ScheduleKind::Cosine, 7);
        let cfg = TrainConfig {
            steps: 2000,
            batch: 128,
            lr: 2e-3,
            lr_end: 1e-4,
        };
        let losses = train(&mut m, &cfg, &mut Rng::new(7, 1), gaussian_batch).unwrap();
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[losses.len() - 200..].iter().sum::<f64>() / 200.0;
        assert!((0.5..2.0).contains(&head), "initial loss {head}");
        assert!(tail < 0.5 * head, "{head} → {tail}");

        let n = 20_000;
        let x = ddpm_sample(&m, &None, &[n, 1], &vec![0; n], &mut Rng::new(7, 2)).unwrap();
        let (_, v) = mean_var(x.data()).unwrap();
        assert!((0.45..0.55).contains(&v.sqrt()), "std {}", v.sqrt());

        let y = ddim_sample(&m, &None, &[n, 1], &vec![0; n], 100, 1.0, &mut Rng::new(7, 3)).unwrap();
        let ks = ks_two_sample(x.data(), y.data()).unwrap();
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn non_finite_sampling_reports_step() {
        let mut m = toy_model(ScheduleKind::Cosine, 8);
        let ids: Vec<_> = m.net.params().ids().collect();
        m.net.params_mut().get_mut(ids[0]).data_mut()[0] = f64::NAN;
        let err = ddpm_sample(&m, &None, &[4, 1], &[0; 4], &mut Rng::new(0, 0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("100"), "{err}");
    }
}
