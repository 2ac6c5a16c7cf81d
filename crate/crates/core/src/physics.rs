//! Physics-based sensor noise: the Poisson-Gaussian core, Tukey-Lambda read
//! noise, a composite synthetic camera used as ground truth, and dark-frame
//! utilities.
//!
//! All camera quantities live in the exposure-scaled domain: a short
//! exposure multiplied by its exposure ratio, normalized so the black level
//! is `black_level` and saturation is `white_level`.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tensor::rng::splitmix64;
use crate::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsNoiseParams {
    /// System gain.
    pub g: f64,
    /// Quantum efficiency.
    pub alpha_qe: f64,
    pub sigma_d: f64,
    pub sigma_r: f64,
}

impl PhysicsNoiseParams {
    pub fn new(g: f64, alpha_qe: f64, sigma_d: f64, sigma_r: f64) -> Result<Self> {
        let p = Self {
            g,
            alpha_qe,
            sigma_d,
            sigma_r,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0 && self.g.is_finite()) {
            return Err(Error::Config(format!("gain must be positive, got {}", self.g)));
        }
        if !(self.alpha_qe > 0.0 && self.alpha_qe <= 1.0) {
            return Err(Error::Config(format!(
                "quantum efficiency must be in (0, 1], got {}",
                self.alpha_qe
            )));
        }
        if !(self.sigma_d >= 0.0 && self.sigma_r >= 0.0) {
            return Err(Error::Config("noise deviations must be non-negative".into()));
        }
        Ok(())
    }

    /// Signal-independent variance `g²σ_d² + σ_r²`.
    pub fn sigma2(&self) -> f64 {
        self.g * self.g * self.sigma_d * self.sigma_d + self.sigma_r * self.sigma_r
    }

    /// Overall conversion factor `gα`.
    pub fn gain(&self) -> f64 {
        self.g * self.alpha_qe
    }

    /// `Var(n) = (gα)²u* + σ²` for an expected photon count `u*`.
    pub fn variance_at(&self, photons: f64) -> f64 {
        self.gain().powi(2) * photons + self.sigma2()
    }
}

fn poisson_gaussian_one(u: f64, p: &PhysicsNoiseParams, sigma: f64, rng: &mut Rng) -> f64 {
    let ga = p.gain();
    let shot = ga * (rng.poisson(u) as f64 - u);
    shot + sigma * rng.normal()
}

/// `n = gα·P(u*) − gα·u* + N(0, σ²)` elementwise, where `clean` holds the
/// expected photon counts `u*`.
pub fn sample_poisson_gaussian(
    clean: &Tensor,
    p: &PhysicsNoiseParams,
    rng: &mut Rng,
) -> Result<Tensor> {
    p.validate()?;
    if let Some(bad) = clean.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "expected photon counts must be non-negative, found {bad}"
        )));
    }
    let sigma = p.sigma2().sqrt();
    let data = clean
        .data()
        .iter()
        .map(|&u| poisson_gaussian_one(u, p, sigma, rng))
        .collect();
    Tensor::new(clean.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TukeyLambdaParams {
    pub lambda_shape: f64,
    pub mu: f64,
    pub sigma_scale: f64,
}

impl TukeyLambdaParams {
    pub fn new(lambda_shape: f64, mu: f64, sigma_scale: f64) -> Result<Self> {
        if !(sigma_scale > 0.0) || !lambda_shape.is_finite() {
            return Err(Error::Config(format!(
                "Tukey-Lambda needs a finite shape and positive scale, got λ={lambda_shape}, σ={sigma_scale}"
            )));
        }
        Ok(Self {
            lambda_shape,
            mu,
            sigma_scale,
        })
    }

    /// Standard quantile `Q(p) = (p^λ − (1−p)^λ)/λ`, logistic at `λ = 0`.
    pub fn standard_quantile(lambda: f64, p: f64) -> f64 {
        if lambda == 0.0 {
            (p / (1.0 - p)).ln()
        } else {
            (p.powf(lambda) - (1.0 - p).powf(lambda)) / lambda
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.mu + self.sigma_scale * Self::standard_quantile(self.lambda_shape, p)
    }

    /// Inverse-transform draw from a uniform on `(0, 1)`.
    pub fn sample_one(&self, rng: &mut Rng) -> f64 {
        self.quantile(rng.uniform_open())
    }

    pub fn sample(&self, shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| self.sample_one(rng))
    }

    /// Closed-form variance; infinite for `λ ≤ −1/2`.
    pub fn variance(&self) -> f64 {
        let l = self.lambda_shape;
        let s2 = self.sigma_scale * self.sigma_scale;
        if l <= -0.5 {
            return f64::INFINITY;
        }
        if l == 0.0 {
            return s2 * std::f64::consts::PI.powi(2) / 3.0;
        }
        let beta_term = (2.0 * ln_gamma(l + 1.0) - ln_gamma(2.0 * l + 2.0)).exp();
        s2 * 2.0 / (l * l) * (1.0 / (1.0 + 2.0 * l) - beta_term)
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadNoiseKind {
    Gaussian,
    /// Tukey-Lambda with the given shape, scaled to the same std as `σ`.
    TukeyLambda { lambda_shape: f64 },
}

/// ISO value and exposure ratio of one capture.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraSetting {
    pub iso: u32,
    pub exposure_ratio: f64,
}

impl CameraSetting {
    pub fn new(iso: u32, exposure_ratio: f64) -> Result<Self> {
        if iso == 0 || !(exposure_ratio > 0.0 && exposure_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "camera setting needs positive ISO and ratio, got ISO {iso}, ×{exposure_ratio}"
            )));
        }
        Ok(Self {
            iso,
            exposure_ratio,
        })
    }
}

impl PartialEq for CameraSetting {
    fn eq(&self, other: &Self) -> bool {
        self.iso == other.iso && self.exposure_ratio.to_bits() == other.exposure_ratio.to_bits()
    }
}

impl Eq for CameraSetting {}

impl Hash for CameraSetting {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.iso.hash(state);
        self.exposure_ratio.to_bits().hash(state);
    }
}

impl fmt::Display for CameraSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ISO {} ×{}", self.iso, self.exposure_ratio)
    }
}

/// Deterministic offset map: a smooth ramp rising toward the bottom rows
/// plus hashed per-column offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPatternConfig {
    pub bottom_amplitude: f64,
    /// Ramp e-folding length as a fraction of the sensor height.
    pub decay: f64,
    pub column_sigma: f64,
    pub seed: u64,
}

impl FixedPatternConfig {
    pub fn zero() -> Self {
        Self {
            bottom_amplitude: 0.0,
            decay: 0.1,
            column_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Which noise sources `sample_camera_noise` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseComponents {
    pub shot: bool,
    pub read: bool,
    pub row: bool,
    pub fixed: bool,
}

impl NoiseComponents {
    pub const ALL: NoiseComponents = NoiseComponents {
        shot: true,
        read: true,
        row: true,
        fixed: true,
    };
    pub const READ_ONLY: NoiseComponents = NoiseComponents {
        shot: false,
        read: true,
        row: false,
        fixed: false,
    };
}

/// Composite ground-truth camera.
///
/// Per setting, the gain scales with `iso/iso_ref` and the exposure ratio,
/// while read, row and fixed-pattern noise scale with the exposure ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCameraModel {
    pub physics: PhysicsNoiseParams,
    pub read_noise: ReadNoiseKind,
    pub row_band_sigma: f64,
    pub fixed_pattern: FixedPatternConfig,
    pub black_level: f64,
    pub white_level: f64,
    pub iso_ref: f64,
    /// Full sensor height in rows, used by the fixed-pattern ramp.
    pub sensor_height: usize,
}

/// Effective per-setting parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveNoise {
    pub physics: PhysicsNoiseParams,
    pub row_band_sigma: f64,
    pub pattern_scale: f64,
}

/// Output of [`sample_camera_noise`].
#[derive(Debug, Clone)]
pub struct CameraNoise {
    /// Noise before clipping.
    pub noise: Tensor,
    /// `clip(clean + noise, black_level, white_level)`.
    pub noisy: Tensor,
}

impl CameraNoise {
    /// Noise as observed after clipping: `noisy − clean`.
    pub fn clipped_noise(&self, clean: &Tensor) -> Result<Tensor> {
        self.noisy.zip_map(clean, |a, b| a - b)
    }
}

impl SyntheticCameraModel {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if !(self.white_level > self.black_level) {
            return Err(Error::Config("white_level must exceed black_level".into()));
        }
        if !(self.iso_ref > 0.0) || self.sensor_height == 0 {
            return Err(Error::Config("iso_ref and sensor_height must be positive".into()));
        }
        if self.row_band_sigma < 0.0 || self.fixed_pattern.decay <= 0.0 {
            return Err(Error::Config("row band sigma must be >= 0 and decay > 0".into()));
        }
        Ok(())
    }

    pub fn effective(&self, setting: &CameraSetting) -> EffectiveNoise {
        let ratio = setting.exposure_ratio;
        let mut physics = self.physics;
        physics.g *= setting.iso as f64 / self.iso_ref * ratio;
        physics.sigma_r *= ratio;
        EffectiveNoise {
            physics,
            row_band_sigma: self.row_band_sigma * ratio,
            pattern_scale: ratio,
        }
    }

    /// Fixed-pattern offset at absolute `(channel, row, col)`.
    pub fn fixed_pattern_at(&self, setting: &CameraSetting, channel: usize, row: f64, col: f64) -> f64 {
        let fp = &self.fixed_pattern;
        let h = self.sensor_height as f64;
        let ramp = fp.bottom_amplitude * (-((h - 1.0 - row).max(0.0)) / (fp.decay * h)).exp();
        let column = if fp.column_sigma > 0.0 {
            fp.column_sigma * hashed_normal(fp.seed, channel as u64, col.round() as i64)
        } else {
            0.0
        };
        self.effective(setting).pattern_scale * (ramp + column)
    }

    /// Fixed-pattern map for a `[C, H, W]` patch with absolute coords `[2, H, W]`.
    pub fn fixed_pattern_map(&self, setting: &CameraSetting, channels: usize, coords: &Tensor) -> Result<Tensor> {
        let (h, w) = coords_hw(coords)?;
        let plane = h * w;
        let cd = coords.data();
        Ok(Tensor::from_fn(&[channels, h, w], |i| {
            let c = i / plane;
            let p = i % plane;
            self.fixed_pattern_at(setting, c, cd[p], cd[plane + p])
        }))
    }

    /// Gaussian model with the same signal-independent variance as the
    /// read noise alone; used to build deliberately mismatched pairs.
    pub fn read_noise_std(&self, setting: &CameraSetting) -> f64 {
        self.effective(setting).physics.sigma2().sqrt()
    }
}

fn coords_hw(coords: &Tensor) -> Result<(usize, usize)> {
    match coords.shape() {
        [2, h, w] => Ok((*h, *w)),
        other => Err(Error::shape(
            "coords",
            format!("expected [2, H, W] absolute (row, col) coordinates, got {other:?}"),
        )),
    }
}

fn hashed_normal(seed: u64, channel: u64, col: i64) -> f64 {
    let a = splitmix64(seed ^ splitmix64(channel.wrapping_mul(0x9E37) ^ splitmix64(col as u64)));
    let b = splitmix64(a);
    let u1 = ((a >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws composite camera noise for a `[C, H, W]` clean patch.
///
/// Row offsets are shared across every channel and column of a row; the
/// row index is the absolute row taken from `coords`.
pub fn sample_camera_noise(
    clean: &Tensor,
    setting: &CameraSetting,
    model: &SyntheticCameraModel,
    coords: &Tensor,
    rng: &mut Rng,
) -> Result<CameraNoise> {
    sample_camera_noise_with(clean, setting, model, coords, NoiseComponents::ALL, rng)
}

pub fn sample_camera_noise_with(
    clean: &Tensor,
    setting: &CameraSetting,
    model: &SyntheticCameraModel,
    coords: &Tensor,
    components: NoiseComponents,
    rng: &mut Rng,
) -> Result<CameraNoise> {
    model.validate()?;
    let [c, h, w] = match clean.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::shape(
                "sample_camera_noise",
                format!("clean must be [C, H, W], got {other:?}"),
            ))
        }
    };
    let (ch, cw) = coords_hw(coords)?;
    if (ch, cw) != (h, w) {
        return Err(Error::shape(
            "sample_camera_noise",
            format!("coords are {ch}x{cw} but clean is {h}x{w}"),
        ));
    }
    let eff = model.effective(setting);
    let p = eff.physics;
    let ga = p.gain();
    let sigma = p.sigma2().sqrt();
    let range = model.white_level - model.black_level;

    let rows: Vec<f64> = if components.row && eff.row_band_sigma > 0.0 {
        (0..h).map(|_| eff.row_band_sigma * rng.normal()).collect()
    } else {
        vec![0.0; h]
    };
    let pattern = if components.fixed {
        Some(model.fixed_pattern_map(setting, c, coords)?)
    } else {
        None
    };
    let tl_unit_std = match model.read_noise {
        ReadNoiseKind::TukeyLambda { lambda_shape } => {
            Some((lambda_shape, TukeyLambdaParams::new(lambda_shape, 0.0, 1.0)?.std()))
        }
        ReadNoiseKind::Gaussian => None,
    };

    let plane = h * w;
    let mut noise = Vec::with_capacity(clean.len());
    for (i, &x) in clean.data().iter().enumerate() {
        let signal = (x - model.black_level).max(0.0) / range;
        let mut n = 0.0;
        if components.shot {
            let photons = signal / ga;
            n += ga * (rng.poisson(photons) as f64 - photons);
        }
        if components.read && sigma > 0.0 {
            n += match tl_unit_std {
                None => sigma * rng.normal(),
                Some((l, s)) => sigma / s * TukeyLambdaParams::standard_quantile(l, rng.uniform_open()),
            };
        }
        let p_idx = i % plane;
        n += rows[p_idx / w];
        if let Some(pat) = &pattern {
            n += pat.data()[i];
        }
        noise.push(n * range);
    }
    let noise = Tensor::new(&[c, h, w], noise)?;
    let noisy = clean.zip_map(&noise, |x, n| (x + n).clamp(model.black_level, model.white_level))?;
    Ok(CameraNoise { noise, noisy })
}

/// One dark frame: unclipped noise over a zero (black-level) scene.
pub fn sample_dark_frame(
    channels: usize,
    setting: &CameraSetting,
    model: &SyntheticCameraModel,
    coords: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (h, w) = coords_hw(coords)?;
    let black = Tensor::full(&[channels, h, w], model.black_level);
    Ok(sample_camera_noise(&black, setting, model, coords, rng)?.noise)
}

/// Elementwise mean of dark frames.
pub fn compute_dark_shading(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("dark shading needs at least one frame".into()))?;
    let mut acc = vec![0.0; first.len()];
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "compute_dark_shading",
                format!("frame shape {:?} differs from {:?}", f.shape(), first.shape()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| a / n).collect())
}

pub fn dark_shading_correct(noisy: &Tensor, shading: &Tensor) -> Result<Tensor> {
    if noisy.shape() != shading.shape() {
        return Err(Error::shape(
            "dark_shading_correct",
            format!("noisy {:?} vs shading {:?}", noisy.shape(), shading.shape()),
        ));
    }
    noisy.zip_map(shading, |a, b| a - b)
}

/// Shot-noise augmentation.
///
/// With `Δ = (1−δ)·I`, returns `clean' = δ·I` and
/// `noisy' = noisy − gα·P(Δ/gα)`: the removed signal increment is itself
/// photon-counted. The Poisson term has mean `Δ` and variance `gα·Δ`, so
/// `E[noisy' − clean'] = E[noisy − clean]` and the residual variance grows
/// by exactly `gα·Δ`.
pub fn shot_noise_augment(
    clean: &Tensor,
    noisy: &Tensor,
    delta: f64,
    gain: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1], got {delta}")));
    }
    if !(gain > 0.0) {
        return Err(Error::InvalidArgument(format!("gain must be positive, got {gain}")));
    }
    if clean.shape() != noisy.shape() {
        return Err(Error::shape(
            "shot_noise_augment",
            format!("clean {:?} vs noisy {:?}", clean.shape(), noisy.shape()),
        ));
    }
    if clean.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("clean signal must be non-negative".into()));
    }
    let clean_aug = clean.map(|v| delta * v);
    let mut out = noisy.data().to_vec();
    for (o, &i) in out.iter_mut().zip(clean.data()) {
        let d = (1.0 - delta) * i;
        if d > 0.0 {
            *o -= gain * rng.poisson(d / gain) as f64;
        }
    }
    Ok((clean_aug, Tensor::new(noisy.shape(), out)?))
}

/// Absolute `(row, col)` coordinate map `[2, h, w]` for a patch at `origin`.
pub fn coord_map(origin: (usize, usize), h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let p = i % plane;
        if i < plane {
            (origin.0 + p / w) as f64
        } else {
            (origin.1 + p % w) as f64
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    fn camera() -> SyntheticCameraModel {
        SyntheticCameraModel {
            physics: PhysicsNoiseParams::new(1e-4, 1.0, 0.0, 2e-4).unwrap(),
            read_noise: ReadNoiseKind::Gaussian,
            row_band_sigma: 5e-5,
            fixed_pattern: FixedPatternConfig {
                bottom_amplitude: 4e-4,
                decay: 0.1,
                column_sigma: 5e-5,
                seed: 11,
            },
            black_level: 0.0,
            white_level: 1.0,
            iso_ref: 800.0,
            sensor_height: 64,
        }
    }

    #[test]
    fn zero_signal_zero_noise() {
        let p = PhysicsNoiseParams::new(2.0, 0.8, 0.0, 0.0).unwrap();
        let n = sample_poisson_gaussian(&Tensor::zeros(&[16]), &p, &mut Rng::new(1, 0)).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_gaussian_moments() {
        let p = PhysicsNoiseParams::new(2.0, 0.8, 1.0, 3.0).unwrap();
        assert_eq!(p.sigma2(), 13.0);
        let n = 1_000_000;
        let clean = Tensor::full(&[n], 50.0);
        let s = sample_poisson_gaussian(&clean, &p, &mut Rng::new(2, 0)).unwrap();
        let (m, v) = mean_var(s.data());
        assert!((v - 141.0).abs() / 141.0 < 0.01, "var {v}");
        assert!(m.abs() < 4.0 * (141.0f64 / n as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn negative_counts_rejected() {
        let p = PhysicsNoiseParams::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let clean = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        assert!(sample_poisson_gaussian(&clean, &p, &mut Rng::new(0, 0)).is_err());
    }

    fn tl_variance_quadrature(l: f64) -> f64 {
        // Midpoint rule on p in (0, 1) with geometric refinement toward the tails.
        let n = 2_000_000;
        let h = 1.0 / n as f64;
        (0..n)
            .map(|k| {
                let p = (k as f64 + 0.5) * h;
                TukeyLambdaParams::standard_quantile(l, p).powi(2) * h
            })
            .sum()
    }

    #[test]
    fn tukey_lambda_variance_matches_quadrature_and_sampling() {
        let t = TukeyLambdaParams::new(0.1, 0.0, 1.0).unwrap();
        let quad = tl_variance_quadrature(0.1);
        assert!((t.variance() - quad).abs() / quad < 1e-4, "{} vs {quad}", t.variance());
        let s = t.sample(&[1_000_000], &mut Rng::new(3, 0));
        let (m, v) = mean_var(s.data());
        assert!((v.sqrt() - quad.sqrt()).abs() / quad.sqrt() < 0.01);
        assert!(m.abs() < 0.01);
        assert_eq!(t.quantile(0.5), 0.0);
        let mut sorted = s.into_data();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[sorted.len() / 2].abs() < 0.01);
    }

    #[test]
    fn tukey_lambda_reflection_is_exact() {
        let t = TukeyLambdaParams::new(0.1, 0.0, 2.0).unwrap();
        let mut rng = Rng::new(4, 0);
        for _ in 0..1000 {
            let u = rng.uniform_open();
            assert_eq!(t.quantile(u), -t.quantile(1.0 - u));
        }
        let logistic = TukeyLambdaParams::new(0.0, 0.0, 1.0).unwrap();
        assert!((logistic.variance() - tl_variance_quadrature(0.0)).abs() < 1e-3);
    }

    #[test]
    fn degenerate_camera_is_poisson_gaussian() {
        let mut cam = camera();
        cam.row_band_sigma = 0.0;
        cam.fixed_pattern = FixedPatternConfig::zero();
        let setting = CameraSetting::new(800, 1.0).unwrap();
        let clean = Tensor::full(&[1, 8, 8], 0.3);
        let coords = coord_map((0, 0), 8, 8);
        let a = sample_camera_noise(&clean, &setting, &cam, &coords, &mut Rng::new(5, 0)).unwrap();
        let p = cam.effective(&setting).physics;
        let photons = clean.map(|x| x / p.gain());
        let b = sample_poisson_gaussian(&photons, &p, &mut Rng::new(5, 0)).unwrap();
        for (x, y) in a.noise.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn row_band_statistics() {
        let mut cam = camera();
        cam.physics.sigma_r = 1e-4;
        cam.fixed_pattern = FixedPatternConfig::zero();
        cam.row_band_sigma = 1e-3;
        let setting = CameraSetting::new(800, 1.0).unwrap();
        let clean = Tensor::zeros(&[1, 64, 64]);
        let coords = coord_map((0, 0), 64, 64);
        let mut rng = Rng::new(6, 0);
        let mut row_means = Vec::new();
        for _ in 0..10_000 {
            let n = sample_camera_noise(&clean, &setting, &cam, &coords, &mut rng).unwrap().noise;
            for r in 0..64 {
                row_means.push(n.data()[r * 64..(r + 1) * 64].iter().sum::<f64>() / 64.0);
            }
        }
        let (_, v) = mean_var(&row_means);
        let expect = (1e-6f64 + 1e-8 / 64.0).sqrt();
        assert!((v.sqrt() - expect).abs() / expect < 0.15, "{} vs {expect}", v.sqrt());
    }

    #[test]
    fn fixed_pattern_is_deterministic_and_absolute() {
        let cam = camera();
        let setting = CameraSetting::new(6400, 300.0).unwrap();
        let a = cam.fixed_pattern_map(&setting, 2, &coord_map((8, 4), 8, 8)).unwrap();
        let b = cam.fixed_pattern_map(&setting, 2, &coord_map((8, 4), 8, 8)).unwrap();
        assert_eq!(a.data(), b.data());
        let whole = cam.fixed_pattern_map(&setting, 2, &coord_map((0, 0), 64, 64)).unwrap();
        for c in 0..2 {
            for r in 0..8 {
                for col in 0..8 {
                    assert_eq!(a.at(&[c, r, col]), whole.at(&[c, r + 8, col + 4]));
                }
            }
        }
        assert!(whole.at(&[0, 63, 0]) - whole.at(&[0, 0, 0]) > 0.0);
    }

    #[test]
    fn coords_shape_checked() {
        let cam = camera();
        let setting = CameraSetting::new(800, 100.0).unwrap();
        let clean = Tensor::zeros(&[1, 4, 4]);
        let bad = coord_map((0, 0), 4, 5);
        assert!(sample_camera_noise(&clean, &setting, &cam, &bad, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn clipping_bounds_and_saturation_tail() {
        let cam = camera();
        let setting = CameraSetting::new(6400, 300.0).unwrap();
        let clean = Tensor::full(&[1, 32, 32], 0.98);
        let out = sample_camera_noise(&clean, &setting, &cam, &coord_map((0, 0), 32, 32), &mut Rng::new(8, 0))
            .unwrap();
        assert!(out.noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let clipped = out.clipped_noise(&clean).unwrap();
        let max = clipped.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 0.02).abs() < 1e-12);
        assert!(out.noise.data().iter().any(|&v| v > 0.02));
    }

    #[test]
    fn dark_shading_basics() {
        let a = Tensor::full(&[2, 2], 3.0);
        assert_eq!(compute_dark_shading(&[a.clone(), a.clone()]).unwrap(), a);
        let s = compute_dark_shading(&[Tensor::zeros(&[2, 2]), Tensor::full(&[2, 2], 2.0)]).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
        assert!(compute_dark_shading(&[]).is_err());
        assert_eq!(dark_shading_correct(&a, &Tensor::zeros(&[2, 2])).unwrap(), a);
        assert!(dark_shading_correct(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(dark_shading_correct(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn dark_shading_recovers_fixed_pattern() {
        let cam = camera();
        let setting = CameraSetting::new(800, 100.0).unwrap();
        let coords = coord_map((32, 0), 32, 32);
        let mut rng = Rng::new(9, 0);
        let frames: Vec<Tensor> = (0..400)
            .map(|_| sample_dark_frame(1, &setting, &cam, &coords, &mut rng).unwrap())
            .collect();
        let shading = compute_dark_shading(&frames).unwrap();
        let pattern = cam.fixed_pattern_map(&setting, 1, &coords).unwrap();
        let eff = cam.effective(&setting);
        let sd = (eff.physics.sigma2() + eff.row_band_sigma.powi(2)).sqrt();
        let bound = 3.0 * sd / 20.0;
        let ok = shading
            .data()
            .iter()
            .zip(pattern.data())
            .filter(|(a, b)| (*a - *b).abs() <= bound)
            .count();
        assert!(ok as f64 >= 0.99 * shading.len() as f64, "{ok}");
        let corrected = dark_shading_correct(&frames[0], &shading).unwrap();
        assert!(corrected.mean().abs() < 3.0 * sd / 32.0);
    }

    #[test]
    fn shot_noise_augment_bookkeeping() {
        let mut rng = Rng::new(10, 0);
        let clean = Tensor::full(&[4], 5.0);
        let noisy = Tensor::full(&[4], 6.0);
        let (c, n) = shot_noise_augment(&clean, &noisy, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!((c, n), (clean.clone(), noisy.clone()));
        assert!(shot_noise_augment(&clean, &noisy, 0.0, 0.5, &mut rng).is_err());
        assert!(shot_noise_augment(&clean, &noisy, 1.5, 0.5, &mut rng).is_err());

        let ga = 0.5;
        let level = 20.0;
        let p = PhysicsNoiseParams::new(ga, 1.0, 0.0, 1.0).unwrap();
        let n = 100_000;
        let clean = Tensor::full(&[n], level);
        let photons = clean.map(|x| x / ga);
        let noise = sample_poisson_gaussian(&photons, &p, &mut rng).unwrap();
        let noisy = clean.zip_map(&noise, |a, b| a + b).unwrap();
        let delta = 0.4;
        let (c2, n2) = shot_noise_augment(&clean, &noisy, delta, ga, &mut rng).unwrap();
        let res: Vec<f64> = n2.data().iter().zip(c2.data()).map(|(a, b)| a - b).collect();
        let (m, v) = mean_var(&res);
        let base_var = ga * level + 1.0;
        let se = (v / n as f64).sqrt();
        assert!(m.abs() < 4.0 * se, "mean {m}");
        let expect = base_var + ga * (1.0 - delta) * level;
        assert!((v - expect).abs() / expect < 0.02, "{v} vs {expect}");
    }

    #[test]
    fn setting_identity() {
        let a = CameraSetting::new(800, 100.0).unwrap();
        let b = CameraSetting::new(800, 100.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, CameraSetting::new(800, 300.0).unwrap());
        assert!(CameraSetting::new(0, 1.0).is_err());
    }
}
