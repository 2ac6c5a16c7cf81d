//! Noise evaluation: histograms and KL divergence, per-clean-level
//! statistics, std ratio, PSNR/SSIM, two-sample KS, rank correlation, and
//! the noise decomposition harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Rng, Tensor};

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_SPAN_STDS: f64 = 6.0;
pub const DEFAULT_SMOOTHING: f64 = 1e-8;
pub const DEFAULT_LEVELS: usize = 255;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub total: u64,
    pub eps: f64,
}

impl NoiseHistogram {
    /// Uniform bins over `[lo, hi]`; values outside fall into the end bins.
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "histogram needs bins > 0 and lo < hi, got {bins} bins over [{lo}, {hi}]"
            )));
        }
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &x in samples {
            let k = ((x - lo) / width).floor();
            let k = if k.is_nan() { 0 } else { k.clamp(0.0, (bins - 1) as f64) as usize };
            counts[k] += 1;
        }
        Ok(Self {
            lo,
            hi,
            counts,
            total: samples.len() as u64,
            eps: DEFAULT_SMOOTHING,
        })
    }

    /// Range `mean ± 6·std` of `reference`, 200 bins.
    pub fn reference_range(reference: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = mean_var(reference)?;
        let s = v.sqrt();
        if !(s > 0.0) {
            return Err(Error::InvalidArgument("reference noise has zero spread".into()));
        }
        Ok((m - DEFAULT_SPAN_STDS * s, m + DEFAULT_SPAN_STDS * s))
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Smoothed probabilities `(c + ε)/(N + Bε)`.
    pub fn probabilities(&self) -> Vec<f64> {
        let denom = self.total as f64 + self.eps * self.bins() as f64;
        self.counts
            .iter()
            .map(|&c| (c as f64 + self.eps) / denom)
            .collect()
    }

    fn same_binning(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins() == other.bins()
    }
}

/// `Σ p·ln(p/q)` over smoothed bins.
pub fn kld(real: &NoiseHistogram, generated: &NoiseHistogram) -> Result<f64> {
    if !real.same_binning(generated) {
        return Err(Error::InvalidArgument(format!(
            "histogram binning differs: [{}, {}]x{} vs [{}, {}]x{}",
            real.lo,
            real.hi,
            real.bins(),
            generated.lo,
            generated.hi,
            generated.bins()
        )));
    }
    let p = real.probabilities();
    let q = generated.probabilities();
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

/// KLD between sample sets using the default binning keyed on `real`.
pub fn kld_samples(real: &[f64], generated: &[f64]) -> Result<f64> {
    let (lo, hi) = NoiseHistogram::reference_range(real)?;
    let a = NoiseHistogram::new(real, lo, hi, DEFAULT_BINS)?;
    let b = NoiseHistogram::new(generated, lo, hi, DEFAULT_BINS)?;
    kld(&a, &b)
}

pub fn mean_var(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((m, v))
}

pub fn std_ratio(generated: &[f64], ground_truth: &[f64]) -> Result<f64> {
    let (_, vg) = mean_var(generated)?;
    let (_, vt) = mean_var(ground_truth)?;
    if vt == 0.0 {
        return Err(Error::InvalidArgument("ground truth has zero variance".into()));
    }
    Ok((vg / vt).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub level: usize,
    pub count: u64,
    /// `None` for levels without samples.
    pub mean: Option<f64>,
    pub var: Option<f64>,
}

/// Per-clean-level noise mean and variance.
pub fn per_clean_value_stats(
    clean: &[f64],
    noise: &[f64],
    black: f64,
    white: f64,
    levels: usize,
) -> Result<Vec<LevelStat>> {
    if clean.len() != noise.len() {
        return Err(Error::shape(
            "per_clean_value_stats",
            format!("{} clean values vs {} noise values", clean.len(), noise.len()),
        ));
    }
    if !(white > black) || levels == 0 {
        return Err(Error::InvalidArgument("need white > black and levels > 0".into()));
    }
    let mut acc = vec![(0u64, 0.0f64, 0.0f64); levels + 1];
    let scale = levels as f64 / (white - black);
    for (&c, &n) in clean.iter().zip(noise) {
        let i = ((c - black) * scale).round().clamp(0.0, levels as f64) as usize;
        let a = &mut acc[i];
        a.0 += 1;
        let d = n - a.1;
        a.1 += d / a.0 as f64;
        a.2 += d * (n - a.1);
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(level, (count, mean, m2))| LevelStat {
            level,
            count,
            mean: (count > 0).then_some(mean),
            var: match count {
                0 => None,
                1 => Some(0.0),
                _ => Some(m2 / (count - 1) as f64),
            },
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument("linear fit needs ≥3 paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        slope_se: (rss / (n - 2.0) / sxx).sqrt(),
    })
}

/// Line through the occupied levels' variances, levels weighted equally.
pub fn fit_variance_line(stats: &[LevelStat], min_count: u64) -> Result<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = stats
        .iter()
        .filter(|s| s.count >= min_count)
        .map(|s| (s.level as f64, s.var.unwrap_or(0.0)))
        .unzip();
    linear_fit(&x, &y)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs ≥2 paired values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic distribution.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS test needs non-empty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = sign * 2.0 * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    sum.clamp(0.0, 1.0)
}

fn image_planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        [n, c, h, w] => Ok((n * c, *h, *w)),
        other => Err(Error::shape("psnr_ssim", format!("expected an image, got {other:?}"))),
    }
}

pub fn psnr(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", pred.shape(), reference.shape()),
        ));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument("data_range must be positive".into()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; 11]) -> Vec<f64> {
    let (oh, ow) = (h - 10, w - 10);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..11).map(|j| k[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..11).map(|j| k[j] * tmp[(r + j) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11-tap Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, valid-region filtering.
pub fn ssim(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", pred.shape(), reference.shape()),
        ));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument("data_range must be positive".into()));
    }
    let (planes, h, w) = image_planes(pred)?;
    if h < 11 || w < 11 {
        return Err(Error::shape("ssim", format!("image {h}x{w} smaller than the 11x11 window")));
    }
    let k = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..planes {
        let x = &pred.data()[p * plane..(p + 1) * plane];
        let y = &reference.data()[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let va = sxx[i] - a * a;
            let vb = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            acc += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

pub fn psnr_ssim(pred: &Tensor, reference: &Tensor, data_range: f64) -> Result<(f64, f64)> {
    Ok((psnr(pred, reference, data_range)?, ssim(pred, reference, data_range)?))
}

#[derive(Debug, Clone)]
pub struct NoiseDecomposition {
    pub full: Tensor,
    pub signal_independent: Tensor,
    pub signal_dependent: Tensor,
}

/// Splits a generator's output into the part produced from a black clean
/// image and the residual. Both calls start from clones of `rng`.
pub fn decompose_noise<G>(generator: G, clean: &Tensor, rng: &Rng) -> Result<NoiseDecomposition>
where
    G: Fn(&Tensor, &mut Rng) -> Result<Tensor>,
{
    let full = generator(clean, &mut rng.clone())?;
    let zeros = Tensor::zeros(clean.shape());
    let signal_independent = generator(&zeros, &mut rng.clone())?;
    let signal_dependent = full.zip_map(&signal_independent, |a, b| a - b)?;
    Ok(NoiseDecomposition {
        full,
        signal_independent,
        signal_dependent,
    })
}

/// Summary comparing generated noise with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStatsReport {
    pub kld: f64,
    pub std_ratio: f64,
    pub real_levels: Vec<LevelStat>,
    pub generated_levels: Vec<LevelStat>,
}

impl NoiseStatsReport {
    pub fn compare(
        clean: &[f64],
        real_noise: &[f64],
        generated_noise: &[f64],
        black: f64,
        white: f64,
    ) -> Result<Self> {
        Ok(Self {
            kld: kld_samples(real_noise, generated_noise)?,
            std_ratio: std_ratio(generated_noise, real_noise)?,
            real_levels: per_clean_value_stats(clean, real_noise, black, white, DEFAULT_LEVELS)?,
            generated_levels: per_clean_value_stats(clean, generated_noise, black, white, DEFAULT_LEVELS)?,
        })
    }

    /// CSV rows `level,real_mean,real_var,real_count,gen_mean,gen_var,gen_count`.
    pub fn curves_csv(&self) -> String {
        let f = |o: Option<f64>| o.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let mut s = String::from("level,real_mean,real_var,real_count,gen_mean,gen_var,gen_count\n");
        for (r, g) in self.real_levels.iter().zip(&self.generated_levels) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.level,
                f(r.mean),
                f(r.var),
                r.count,
                f(g.mean),
                f(g.var),
                g.count
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{sample_poisson_gaussian, PhysicsNoiseParams};

    fn normals(n: usize, s: f64, seed: u64) -> Vec<f64> {
        let mut r = Rng::new(seed, 0);
        (0..n).map(|_| s * r.normal()).collect()
    }

    #[test]
    fn histogram_normalization() {
        let x = normals(10_000, 1.0, 1);
        let h = NoiseHistogram::new(&x, -6.0, 6.0, 200).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        assert!((h.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(NoiseHistogram::new(&x, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn kld_identity_nonnegativity_and_mismatch() {
        let x = normals(10_000, 1.0, 2);
        let h = NoiseHistogram::new(&x, -4.0, 4.0, 50).unwrap();
        assert_eq!(kld(&h, &h).unwrap(), 0.0);
        let mut rng = Rng::new(3, 0);
        for _ in 0..100 {
            let a: Vec<f64> = (0..500).map(|_| rng.normal() * (1.0 + rng.uniform())).collect();
            let b: Vec<f64> = (0..500).map(|_| rng.uniform() * 3.0 - 1.5).collect();
            let ha = NoiseHistogram::new(&a, -3.0, 3.0, 40).unwrap();
            let hb = NoiseHistogram::new(&b, -3.0, 3.0, 40).unwrap();
            assert!(kld(&ha, &hb).unwrap() >= 0.0);
        }
        let other = NoiseHistogram::new(&x, -4.0, 4.0, 51).unwrap();
        assert!(kld(&h, &other).is_err());
    }

    #[test]
    fn kld_separates_models() {
        let p = PhysicsNoiseParams::new(1.0, 1.0, 0.0, 2.0).unwrap();
        let wide = PhysicsNoiseParams::new(1.0, 1.0, 0.0, 4.0).unwrap();
        let photons = Tensor::full(&[1_000_000], 20.0);
        let a = sample_poisson_gaussian(&photons, &p, &mut Rng::new(4, 0)).unwrap();
        let b = sample_poisson_gaussian(&photons, &p, &mut Rng::new(4, 1)).unwrap();
        let c = sample_poisson_gaussian(&photons, &wide, &mut Rng::new(4, 2)).unwrap();
        let same = kld_samples(a.data(), b.data()).unwrap();
        let diff = kld_samples(a.data(), c.data()).unwrap();
        assert!(same < 0.005, "{same}");
        assert!(diff > 10.0 * same, "{diff} vs {same}");
    }

    #[test]
    fn per_level_stats_constant_noise_and_empty_levels() {
        let clean = vec![0.0, 0.5, 0.5, 1.0];
        let noise = vec![0.25; 4];
        let s = per_clean_value_stats(&clean, &noise, 0.0, 1.0, 255).unwrap();
        assert_eq!(s.len(), 256);
        for l in &s {
            if l.count > 0 {
                assert_eq!(l.mean, Some(0.25));
                assert!(l.var.unwrap().abs() < 1e-30);
            } else {
                assert_eq!((l.mean, l.var), (None, None));
            }
        }
        assert_eq!(s[128].count, 2);
    }

    #[test]
    fn per_level_stats_recover_poisson_gaussian_line() {
        let mut rng = Rng::new(5, 0);
        let (ga, sigma) = (0.002, 0.01);
        let mut clean = Vec::new();
        let mut noise = Vec::new();
        for level in (0..=255).step_by(15) {
            let x = level as f64 / 255.0;
            for _ in 0..20_000 {
                let photons = x / ga;
                clean.push(x);
                noise.push(ga * (rng.poisson(photons) as f64 - photons) + sigma * rng.normal());
            }
        }
        let s = per_clean_value_stats(&clean, &noise, 0.0, 1.0, 255).unwrap();
        let fit = fit_variance_line(&s, 10_000).unwrap();
        let expect = ga / 255.0;
        assert!((fit.slope - expect).abs() / expect < 0.05, "{fit:?}");
        for l in s.iter().filter(|l| l.count >= 10_000) {
            let se = (l.var.unwrap() / l.count as f64).sqrt();
            assert!(l.mean.unwrap().abs() < 4.0 * se);
        }
    }

    #[test]
    fn std_ratio_cases() {
        let x = normals(10_000, 1.0, 6);
        assert!((std_ratio(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!((std_ratio(&y, &x).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_ssim_cases() {
        let mut rng = Rng::new(7, 0);
        let a = Tensor::from_fn(&[16, 16], |_| (rng.uniform() * 255.0).round());
        let (p, s) = psnr_ssim(&a, &a, 255.0).unwrap();
        assert_eq!(p, PSNR_CAP);
        assert!((s - 1.0).abs() < 1e-12);
        let b = Tensor::from_fn(&[16, 16], |i| a.data()[i] + if i % 2 == 0 { 1.0 } else { -1.0 });
        assert!((psnr(&b, &a, 255.0).unwrap() - 48.130_803_608_679_1).abs() < 1e-9);
        let c = Tensor::from_fn(&[16, 16], |_| (rng.uniform() * 255.0).round());
        assert!((ssim(&a, &c, 255.0).unwrap() - ssim(&c, &a, 255.0).unwrap()).abs() < 1e-12);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ks_detects_and_accepts() {
        let a = normals(5000, 1.0, 8);
        let b = normals(5000, 1.0, 9);
        let c = normals(5000, 1.3, 10);
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
    }

    #[test]
    fn rank_correlation() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [10.0, 8.0, 7.0, 3.0, 1.0];
        assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn decomposition_of_physics_oracle() {
        let (ga, sigma) = (0.004, 0.01);
        let generator = |clean: &Tensor, rng: &mut Rng| -> Result<Tensor> {
            let p = PhysicsNoiseParams::new(ga, 1.0, 0.0, sigma).unwrap();
            sample_poisson_gaussian(&clean.map(|x| x / ga), &p, rng)
        };
        let n = 256 * 400;
        let clean = Tensor::from_fn(&[n], |i| (i % 256) as f64 / 255.0);
        let d = decompose_noise(generator, &clean, &Rng::new(11, 0)).unwrap();
        let sum = d.signal_independent.zip_map(&d.signal_dependent, |a, b| a + b).unwrap();
        for (a, b) in sum.data().iter().zip(d.full.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let indep = per_clean_value_stats(clean.data(), d.signal_independent.data(), 0.0, 1.0, 255).unwrap();
        let fit = fit_variance_line(&indep, 100).unwrap();
        assert!(fit.slope.abs() < 3.0 * fit.slope_se + 1e-12, "{fit:?}");
        let dep = per_clean_value_stats(clean.data(), d.signal_dependent.data(), 0.0, 1.0, 255).unwrap();
        let fit = fit_variance_line(&dep, 100).unwrap();
        assert!((fit.slope - ga / 255.0).abs() / (ga / 255.0) < 0.15, "{fit:?}");
    }
}
