//! MMSE denoising and the variance it leaves behind.
//!
//! A signal `u` is observed as `v = u + ε`, `ε ~ N(0, σ₁²)`. For a Gaussian
//! prior `N(λ, σ₂²)` the MMSE estimate `E[u|v]` has variance
//! `σ₂⁴/(σ₂²+σ₁²)`; for a Gaussian mixture prior the same quantity is
//! computed by Gauss-Hermite quadrature over `v`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

const QUADRATURE_NODES: usize = 200;
const MC_SHARDS: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prior {
    Gaussian { mean: f64, var: f64 },
    Gmm { weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmseSetup {
    pub prior: Prior,
    /// Measurement noise variance `σ₁²`.
    pub noise_var: f64,
}

/// Gaussian mixture over `u` given `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl Posterior {
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(w, (mu, v))| w * (v + (mu - m).powi(2)))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmseReport {
    pub analytic: f64,
    pub empirical: f64,
    pub rel_err: f64,
    pub n_samples: usize,
}

impl MmseSetup {
    pub fn gaussian(mean: f64, sigma2: f64, sigma1: f64) -> Result<Self> {
        let s = Self {
            prior: Prior::Gaussian {
                mean,
                var: sigma2 * sigma2,
            },
            noise_var: sigma1 * sigma1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn gmm(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>, sigma1: f64) -> Result<Self> {
        let s = Self {
            prior: Prior::Gmm {
                weights,
                means,
                vars: stds.iter().map(|s| s * s).collect(),
            },
            noise_var: sigma1 * sigma1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!("measurement variance {} invalid", self.noise_var)));
        }
        match &self.prior {
            Prior::Gaussian { var, .. } => {
                if !(*var > 0.0) {
                    return Err(Error::Config("prior variance must be positive".into()));
                }
            }
            Prior::Gmm { weights, means, vars } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
                    return Err(Error::Config("GMM weights, means and variances must align".into()));
                }
                if weights.iter().any(|w| !(*w > 0.0)) || vars.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Config("GMM weights and variances must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("GMM weights sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    fn components(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match &self.prior {
            Prior::Gaussian { mean, var } => (vec![1.0], vec![*mean], vec![*var]),
            Prior::Gmm { weights, means, vars } => (weights.clone(), means.clone(), vars.clone()),
        }
    }

    pub fn prior_mean(&self) -> f64 {
        let (w, m, _) = self.components();
        w.iter().zip(&m).map(|(a, b)| a * b).sum()
    }

    pub fn prior_variance(&self) -> f64 {
        let (w, m, v) = self.components();
        Posterior {
            weights: w,
            means: m,
            vars: v,
        }
        .variance()
    }

    /// `p(u | v)`.
    pub fn posterior(&self, v: f64) -> Posterior {
        let (w, m, t) = self.components();
        let s1 = self.noise_var;
        if s1 == 0.0 {
            return Posterior {
                weights: vec![1.0],
                means: vec![v],
                vars: vec![0.0],
            };
        }
        let log_ev: Vec<f64> = w
            .iter()
            .zip(m.iter().zip(&t))
            .map(|(wk, (mk, tk))| {
                let s = tk + s1;
                wk.ln() - 0.5 * (2.0 * std::f64::consts::PI * s).ln() - (v - mk).powi(2) / (2.0 * s)
            })
            .collect();
        let max = log_ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = log_ev.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|x| *x /= z);
        let means = m
            .iter()
            .zip(&t)
            .map(|(mk, tk)| mk + tk / (tk + s1) * (v - mk))
            .collect();
        let vars = t.iter().map(|tk| tk * s1 / (tk + s1)).collect();
        Posterior {
            weights,
            means,
            vars,
        }
    }

    /// `f_MMSE(v) = E[u | v]`.
    pub fn estimate(&self, v: f64) -> f64 {
        self.posterior(v).mean()
    }

    /// `Var(E[u | V])`.
    pub fn output_variance(&self) -> f64 {
        match &self.prior {
            Prior::Gaussian { var, .. } => var * var / (var + self.noise_var),
            Prior::Gmm { .. } => self.output_variance_quadrature(),
        }
    }

    fn output_variance_quadrature(&self) -> f64 {
        let (w, m, t) = self.components();
        let (nodes, gw) = gauss_hermite(QUADRATURE_NODES);
        let mut first = 0.0;
        let mut second = 0.0;
        for k in 0..w.len() {
            let s = (t[k] + self.noise_var).sqrt();
            for (x, a) in nodes.iter().zip(&gw) {
                let v = m[k] + std::f64::consts::SQRT_2 * s * x;
                let f = self.estimate(v);
                let weight = w[k] * a / std::f64::consts::PI.sqrt();
                first += weight * f;
                second += weight * f * f;
            }
        }
        second - first * first
    }

    pub fn sample_u(&self, rng: &mut Rng) -> f64 {
        let (w, m, t) = self.components();
        let mut k = 0;
        if w.len() > 1 {
            let mut r = rng.uniform();
            while k + 1 < w.len() && r >= w[k] {
                r -= w[k];
                k += 1;
            }
        }
        m[k] + t[k].sqrt() * rng.normal()
    }
}

/// Orthonormal Hermite recurrence at `x`: returns `(h_n, h_{n-1})`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut p1 = PIM4;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = x * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, p2)
}

/// Nodes and weights of `n`-point Gauss-Hermite quadrature for `∫ e^{-x²} f(x) dx`.
///
/// Roots are bracketed by sign changes on a fine grid, then polished by
/// Newton steps.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let nf = n as f64;
    let upper = (2.0 * nf + 1.0).sqrt() + 1.0;
    let step = std::f64::consts::PI / (2.0 * nf + 1.0).sqrt() / 16.0;
    let mut roots = Vec::with_capacity(n);
    if n % 2 == 1 {
        roots.push(0.0);
    }
    let mut a = if n % 2 == 1 { step * 0.5 } else { 0.0 };
    let mut fa = hermite_pair(n, a).0;
    while roots.len() < n.div_ceil(2) && a < upper {
        let b = a + step;
        let fb = hermite_pair(n, b).0;
        if fa == 0.0 || fa.signum() != fb.signum() {
            let (mut lo, mut hi) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if hermite_pair(n, mid).0.signum() == hermite_pair(n, lo).0.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 * hi.max(1.0) {
                    break;
                }
            }
            let mut z = 0.5 * (lo + hi);
            for _ in 0..3 {
                let (p1, p2) = hermite_pair(n, z);
                let pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                if dz.is_finite() && dz.abs() < step {
                    z -= dz;
                }
            }
            roots.push(z);
        }
        a = b;
        fa = fb;
    }
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for &r in roots.iter().rev() {
        if r != 0.0 {
            x.push(-r);
        }
    }
    x.extend(roots.iter().copied());
    for &z in &x {
        let (_, p2) = hermite_pair(n, z);
        let pp = (2.0 * nf).sqrt() * p2;
        w.push(2.0 / (pp * pp));
    }
    (x, w)
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Welford) -> Welford {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Welford {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

/// Monte Carlo check of the shrinkage law: draws `(u, v)` pairs and compares
/// the empirical variance of `E[u|v]` with [`MmseSetup::output_variance`].
///
/// Shards use fixed substreams and are reduced in order, so the result is
/// independent of the thread count.
pub fn verify_proposition_mc(setup: &MmseSetup, n_samples: usize, rng: &Rng) -> Result<MmseReport> {
    setup.validate()?;
    if n_samples < 100_000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100000 samples, got {n_samples}"
        )));
    }
    let s1 = setup.noise_var.sqrt();
    let per = n_samples.div_ceil(MC_SHARDS as usize);
    let shards: Vec<Welford> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|k| {
            let mut r = rng.substream(k);
            let count = per.min(n_samples.saturating_sub(k as usize * per));
            let mut acc = Welford::default();
            for _ in 0..count {
                let u = setup.sample_u(&mut r);
                let v = u + s1 * r.normal();
                acc.push(setup.estimate(v));
            }
            acc
        })
        .collect();
    let total = shards.into_iter().fold(Welford::default(), Welford::merge);
    let analytic = setup.output_variance();
    let empirical = total.variance();
    Ok(MmseReport {
        analytic,
        empirical,
        rel_err: (empirical - analytic).abs() / analytic,
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (x, w) = gauss_hermite(200);
        let sp = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - sp).abs() < 1e-12);
        assert!((m2 - sp / 2.0).abs() < 1e-12);
        assert!((m4 - 3.0 * sp / 4.0).abs() < 1e-12);
        let (x5, _) = gauss_hermite(5);
        assert_eq!(x5.len(), 5);
        assert!((x5[4] - 2.020_182_870_456_086).abs() < 1e-12);
        assert!(x5[2].abs() < 1e-14);
    }

    #[test]
    fn posterior_limits() {
        let s = MmseSetup::gaussian(0.3, 1.0, 0.0).unwrap();
        let p = s.posterior(1.7);
        assert_eq!((p.mean(), p.variance()), (1.7, 0.0));

        let s = MmseSetup::gaussian(0.3, 1.0, 1e6).unwrap();
        let p = s.posterior(1.7);
        assert!((p.mean() - 0.3).abs() / 0.3 < 1e-6);
        assert!((p.variance() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn posterior_worked_case_matches_numeric_bayes() {
        let s = MmseSetup::gaussian(0.0, 1.0, 1.0).unwrap();
        let p = s.posterior(2.0);
        assert!((p.mean() - 1.0).abs() < 1e-15);
        assert!((p.variance() - 0.5).abs() < 1e-15);

        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let h = 1e-3;
        for k in -10_000..=10_000 {
            let u = k as f64 * h;
            let d = (-u * u / 2.0 - (2.0 - u).powi(2) / 2.0).exp();
            z += d;
            m1 += d * u;
            m2 += d * u * u;
        }
        let mean = m1 / z;
        assert!((mean - 1.0).abs() < 1e-9);
        assert!((m2 / z - mean * mean - 0.5).abs() < 1e-9);
    }

    #[test]
    fn estimator_properties() {
        let s = MmseSetup::gaussian(0.7, 2.0, 1.0).unwrap();
        assert!((s.estimate(0.7) - 0.7).abs() < 1e-15);
        let slope = (s.estimate(3.0) - s.estimate(1.0)) / 2.0;
        assert!((slope - 4.0 / 5.0).abs() < 1e-12);

        let g = MmseSetup::gmm(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.1, 0.1], 0.5).unwrap();
        assert!(g.estimate(0.0).abs() < 1e-15);
    }

    #[test]
    fn output_variance_closed_form() {
        assert_eq!(MmseSetup::gaussian(0.0, 1.5, 0.0).unwrap().output_variance(), 2.25);
        assert!((MmseSetup::gaussian(0.0, 1.0, 1.0).unwrap().output_variance() - 0.5).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for k in 0..=30 {
            let v = MmseSetup::gaussian(0.0, 1.0, k as f64 * 0.1).unwrap().output_variance();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn single_component_gmm_reduces_to_gaussian() {
        let g = MmseSetup::gmm(vec![1.0], vec![0.4], vec![1.3], 0.7).unwrap();
        let s = MmseSetup::gaussian(0.4, 1.3, 0.7).unwrap();
        assert!((g.output_variance() - s.output_variance()).abs() < 1e-12);
        for v in [-2.0, 0.0, 0.4, 3.0] {
            assert!((g.estimate(v) - s.estimate(v)).abs() < 1e-15);
        }
    }

    #[test]
    fn gmm_weights_validated() {
        assert!(MmseSetup::gmm(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0], 1.0).is_err());
        assert!(MmseSetup::gmm(vec![1.0], vec![0.0, 1.0], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn monte_carlo_agrees_gaussian_and_gmm() {
        let rng = Rng::new(21, 0);
        let s = MmseSetup::gaussian(0.0, 1.0, 0.5).unwrap();
        let r = verify_proposition_mc(&s, 1_000_000, &rng).unwrap();
        assert!(r.rel_err < 0.01, "{r:?}");
        let g = MmseSetup::gmm(vec![0.3, 0.7], vec![-1.0, 1.5], vec![0.4, 0.8], 0.6).unwrap();
        let r = verify_proposition_mc(&g, 400_000, &rng).unwrap();
        assert!(r.rel_err < 0.02, "{r:?}");
        assert!(r.analytic < g.prior_variance());
        assert!(verify_proposition_mc(&s, 10, &rng).is_err());
    }

    #[test]
    fn law_of_total_variance() {
        let g = MmseSetup::gmm(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.3, 0.6], 0.8).unwrap();
        let mut rng = Rng::new(22, 0);
        let n = 200_000;
        let mut ev = 0.0;
        for _ in 0..n {
            let u = g.sample_u(&mut rng);
            let v = u + 0.8 * rng.normal();
            ev += g.posterior(v).variance();
        }
        let total = ev / n as f64 + g.output_variance();
        assert!((total - g.prior_variance()).abs() / g.prior_variance() < 0.01);
    }
}
