use serde::{Deserialize, Serialize};

use crate::diffusion::{train, DiffusionModel, Normalization, Sampler, TrainBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::{normalize_coords, Branches, PatchCond, TwoBranchConfig, TwoBranchNet};
use crate::physics::{
    coord_map, sample_camera_noise, CameraSetting, FixedPatternConfig, PhysicsNoiseParams, ReadNoiseKind,
    SyntheticCameraModel,
};
use crate::pipeline::{
    evaluate_denoiser, generate_pairs, plan_tiles, train_toy_denoiser, DenoiserMetrics, DenoiserTrainConfig,
    DiffusionGenerator, NoiseGenerator, PairOptions, PhysicsGenerator, TilingPlan,
};
use crate::nets::DenoiserConfig;
use crate::schedule::{Schedule, ScheduleKind};
use crate::stats::{fit_variance_line, kld_samples, mean_var, pearson, per_clean_value_stats, DEFAULT_LEVELS};
use crate::{Rng, Tensor};

/// Model variants compared by the 2D study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2dVariant {
    Full,
    /// The full model sampled with an all-zero coordinate map.
    ZeroCoords,
    UnetOnly,
    MlpOnly,
}

impl Toy2dVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ZeroCoords => "zero_coords",
            Self::UnetOnly => "unet_only",
            Self::MlpOnly => "mlp_only",
        }
    }

    fn branches(self) -> Branches {
        match self {
            Self::Full | Self::ZeroCoords => Branches { mlp: true, unet: true },
            Self::UnetOnly => Branches { mlp: false, unet: true },
            Self::MlpOnly => Branches { mlp: true, unet: false },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy2dConfig {
    pub channels: usize,
    pub sensor: (usize, usize),
    pub patch: usize,
    pub overlap: f64,
    pub settings: Vec<CameraSetting>,
    pub camera: SyntheticCameraModel,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub train: TrainConfig,
    /// Clean scenes the diffusion models (and the denoisers) train on.
    pub train_scenes: usize,
    /// Held-out scenes for the noise statistics.
    pub eval_scenes: usize,
    pub sampler: Sampler,
    /// DDIM steps; ignored for DDPM.
    pub sample_steps: usize,
    pub eta: f64,
    /// Patches per sampler call.
    pub sample_batch: usize,
    /// Bottom share of the rows used for the row-profile correlation.
    pub bottom_fraction: f64,
    pub variants: Vec<Toy2dVariant>,
    /// Downstream denoiser comparison; `None` skips it.
    pub denoiser: Option<DenoiserStudyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserStudyConfig {
    pub train: DenoiserTrainConfig,
    /// Training scenes used to build pairs (a prefix of the diffusion set).
    pub scenes: usize,
    pub test_scenes: usize,
}

impl Default for Toy2dConfig {
    fn default() -> Self {
        let sensor = (64, 64);
        Self {
            channels: 2,
            sensor,
            patch: 32,
            overlap: 0.25,
            settings: vec![
                CameraSetting {
                    iso: 800,
                    exposure_ratio: 100.0,
                },
                CameraSetting {
                    iso: 6400,
                    exposure_ratio: 300.0,
                },
            ],
            camera: toy_camera(sensor.0),
            schedule: ScheduleKind::Sigmoid2,
            diffusion_steps: 512,
            base_channels: 8,
            depth: 2,
            mlp_hidden: 32,
            train: TrainConfig {
                steps: 1500,
                batch: 8,
                lr: 2e-3,
                lr_end: 1e-4,
            },
            train_scenes: 32,
            eval_scenes: 6,
            sampler: Sampler::Ddim,
            sample_steps: 50,
            eta: 1.0,
            sample_batch: 8,
            bottom_fraction: 0.25,
            variants: vec![
                Toy2dVariant::Full,
                Toy2dVariant::ZeroCoords,
                Toy2dVariant::UnetOnly,
                Toy2dVariant::MlpOnly,
            ],
            denoiser: Some(DenoiserStudyConfig {
                train: DenoiserTrainConfig {
                    net: DenoiserConfig {
                        channels: 2,
                        base_channels: 8,
                        depth: 2,
                    },
                    steps: 600,
                    batch: 8,
                    lr: 2e-3,
                    lr_end: 1e-4,
                },
                scenes: 8,
                test_scenes: 4,
            }),
        }
    }
}

impl Toy2dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("toy2d needs at least one setting and one variant".into()));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 || self.sample_batch == 0 {
            return Err(Error::Config("toy2d scene counts and sample batch must be positive".into()));
        }
        if !(self.bottom_fraction > 0.0 && self.bottom_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "bottom_fraction must be in (0, 1], got {}",
                self.bottom_fraction
            )));
        }
        if let Some(d) = &self.denoiser {
            if d.scenes == 0 || d.scenes > self.train_scenes || d.test_scenes == 0 {
                return Err(Error::Config(format!(
                    "denoiser study needs 0 < scenes ≤ {} and test scenes > 0",
                    self.train_scenes
                )));
            }
        }
        self.camera.validate()?;
        plan_tiles(self.sensor.0, self.sensor.1, self.patch, self.overlap)?;
        Ok(())
    }

    pub fn plan(&self) -> Result<TilingPlan> {
        plan_tiles(self.sensor.0, self.sensor.1, self.patch, self.overlap)
    }

    pub fn net_config(&self, branches: Branches) -> TwoBranchConfig {
        let mut cfg = TwoBranchConfig::toy(self.channels, self.settings.clone(), self.diffusion_steps);
        cfg.base_channels = self.base_channels;
        cfg.depth = self.depth;
        cfg.mlp_hidden = self.mlp_hidden;
        cfg.branches = branches;
        cfg
    }

    fn pair_options(&self) -> PairOptions {
        PairOptions {
            black_level: self.camera.black_level,
            white_level: self.camera.white_level,
            batch: self.sample_batch,
        }
    }
}

/// Synthetic camera for the 2D study: normalized `[0, 1]` range, a
/// bottom-row offset ramp and weak row banding.
pub fn toy_camera(sensor_height: usize) -> SyntheticCameraModel {
    SyntheticCameraModel {
        physics: PhysicsNoiseParams {
            g: 1e-5,
            alpha_qe: 1.0,
            sigma_d: 0.0,
            sigma_r: 5e-5,
        },
        read_noise: ReadNoiseKind::Gaussian,
        row_band_sigma: 1e-5,
        fixed_pattern: FixedPatternConfig {
            bottom_amplitude: 1.2e-4,
            decay: 0.1,
            column_sigma: 2e-5,
            seed: 7,
        },
        black_level: 0.0,
        white_level: 1.0,
        iso_ref: 800.0,
        sensor_height,
    }
}

/// Smooth random `[C, H, W]` scene in `[0, 1]`: a tilted plane plus a few
/// Gaussian blobs, with a per-channel gain.
pub fn synthetic_scene(channels: usize, (h, w): (usize, usize), rng: &mut Rng) -> Tensor {
    let base = 0.05 + 0.45 * rng.uniform();
    let (gy, gx) = (0.4 * rng.uniform() - 0.2, 0.4 * rng.uniform() - 0.2);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform() * h as f64,
                rng.uniform() * w as f64,
                6.0 + 24.0 * rng.uniform(),
                0.7 * rng.uniform() - 0.35,
            )
        })
        .collect();
    let gains: Vec<f64> = (0..channels).map(|_| 0.8 + 0.4 * rng.uniform()).collect();
    let plane = h * w;
    Tensor::from_fn(&[channels, h, w], |i| {
        let (c, r, col) = (i / plane, (i % plane) / w, i % w);
        let (y, x) = (r as f64 / h as f64, col as f64 / w as f64);
        let mut v = base + gy * (y - 0.5) + gx * (x - 0.5);
        for &(by, bx, s, a) in &blobs {
            let d2 = (r as f64 - by).powi(2) + (col as f64 - bx).powi(2);
            v += a * (-d2 / (2.0 * s * s)).exp();
        }
        (v * gains[c]).clamp(0.0, 1.0)
    })
}

pub fn synthetic_scenes(cfg: &Toy2dConfig, n: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..n).map(|_| synthetic_scene(cfg.channels, cfg.sensor, rng)).collect()
}

/// Random-origin oracle patches: `(noise, cond, settings index)`.
fn oracle_batch(cfg: &Toy2dConfig, scenes: &[Tensor], b: usize, rng: &mut Rng) -> Result<TrainBatch<PatchCond>> {
    let (h, w) = cfg.sensor;
    let p = cfg.patch;
    let plan = cfg.plan()?;
    let mut noise = Vec::with_capacity(b);
    let mut clean = Vec::with_capacity(b);
    let mut coords = Vec::with_capacity(b);
    let mut groups = Vec::with_capacity(b);
    for _ in 0..b {
        let scene = &scenes[rng.index(scenes.len())];
        let k = rng.index(cfg.settings.len());
        let origin = (rng.index(h - p + 1), rng.index(w - p + 1));
        let x = plan.extract(scene, origin)?;
        let c = coord_map(origin, p, p);
        noise.push(sample_camera_noise(&x, &cfg.settings[k], &cfg.camera, &c, rng)?.noise);
        clean.push(x);
        coords.push(c);
        groups.push(k);
    }
    Ok(TrainBatch {
        n0: Tensor::stack(&noise)?,
        cond: PatchCond {
            clean: Tensor::stack(&clean)?,
            coords: normalize_coords(&Tensor::stack(&coords)?, cfg.sensor)?,
            settings: groups.clone(),
        },
        groups,
    })
}

/// Per-setting mean/std of oracle noise over `scenes`.
pub fn oracle_normalization(cfg: &Toy2dConfig, scenes: &[Tensor], rng: &mut Rng) -> Result<Normalization> {
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); cfg.settings.len()];
    let batch = oracle_batch(cfg, scenes, 32 * cfg.settings.len(), rng)?;
    let inner = batch.n0.len() / batch.groups.len();
    for (i, &g) in batch.groups.iter().enumerate() {
        per[g].extend_from_slice(&batch.n0.data()[i * inner..(i + 1) * inner]);
    }
    Normalization::standardize(&per)
}

/// Trains one two-branch diffusion model on fresh oracle noise each step.
pub fn train_toy2d(
    cfg: &Toy2dConfig,
    branches: Branches,
    scenes: &[Tensor],
    rng: &mut Rng,
) -> Result<(DiffusionModel<TwoBranchNet>, Vec<f64>)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("toy2d training needs scenes".into()));
    }
    let norm = oracle_normalization(cfg, scenes, rng)?;
    let net = TwoBranchNet::new(cfg.net_config(branches), rng)?;
    let mut model = DiffusionModel {
        schedule: Schedule::build(cfg.schedule, cfg.diffusion_steps)?,
        net,
        norm,
    };
    let losses = train(&mut model, &cfg.train, rng, |_, rng| {
        oracle_batch(cfg, scenes, cfg.train.batch, rng)
    })?;
    Ok((model, losses))
}

pub fn diffusion_generator(cfg: &Toy2dConfig, model: DiffusionModel<TwoBranchNet>, zero_coords: bool) -> DiffusionGenerator {
    let mut g = DiffusionGenerator::new(model, cfg.sensor);
    g.sampler = cfg.sampler;
    g.steps = cfg.sample_steps;
    g.eta = cfg.eta;
    g.zero_coords = zero_coords;
    g
}

/// Full-sensor noise for every (scene, setting), stitched from tiles.
/// Entry `[i·S + s]` is scene `i` under setting `s`.
pub fn stitched_noise(
    cfg: &Toy2dConfig,
    generator: &dyn NoiseGenerator,
    scenes: &[Tensor],
    rng: &Rng,
) -> Result<Vec<Tensor>> {
    let plan = cfg.plan()?;
    let pairs = generate_pairs(generator, scenes, &cfg.settings, &plan, cfg.pair_options(), rng)?;
    pairs
        .chunks(plan.len())
        .map(|chunk| {
            let noise: Vec<Tensor> = chunk.iter().map(|p| p.noise.clone()).collect();
            plan.stitch(&noise)
        })
        .collect()
}

/// Noise statistics of one generator against the oracle, per setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetrics {
    /// Correlation of bottom-region per-row means with the true offset
    /// profile.
    pub row_r: Vec<f64>,
    /// Std of per-tile means of (noise − fixed pattern) over the stitched
    /// images.
    pub patch_mean_std: Vec<f64>,
    pub kld: Vec<f64>,
    pub std_ratio: Vec<f64>,
    /// Slope of noise variance against clean level (per 1/255 step), and
    /// the oracle's closed-form value.
    pub var_slope: Vec<f64>,
    pub oracle_slope: Vec<f64>,
}

impl NoiseMetrics {
    pub fn min_row_r(&self) -> f64 {
        self.row_r.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_patch_mean_std(&self) -> f64 {
        self.patch_mean_std.iter().sum::<f64>() / self.patch_mean_std.len() as f64
    }

    pub fn mean_kld(&self) -> f64 {
        self.kld.iter().sum::<f64>() / self.kld.len() as f64
    }
}

/// Mean over channels and columns of the true fixed pattern, per row.
fn pattern_profile(cfg: &Toy2dConfig, setting: &CameraSetting) -> Result<(Tensor, Vec<f64>)> {
    let (h, w) = cfg.sensor;
    let map = cfg
        .camera
        .fixed_pattern_map(setting, cfg.channels, &coord_map((0, 0), h, w))?;
    let profile = row_profile(&[&map], (h, w));
    Ok((map, profile))
}

fn row_profile(images: &[&Tensor], (h, w): (usize, usize)) -> Vec<f64> {
    let mut acc = vec![0.0; h];
    let mut count = 0usize;
    for img in images {
        let c = img.len() / (h * w);
        for ch in 0..c {
            for (r, a) in acc.iter_mut().enumerate() {
                *a += img.data()[(ch * h + r) * w..][..w].iter().sum::<f64>();
            }
        }
        count += c * w;
    }
    acc.iter().map(|a| a / count as f64).collect()
}

/// Compares stitched `generated` noise with stitched oracle noise; both are
/// laid out as returned by [`stitched_noise`] for `scenes`.
pub fn noise_metrics(cfg: &Toy2dConfig, scenes: &[Tensor], generated: &[Tensor], oracle: &[Tensor]) -> Result<NoiseMetrics> {
    let s = cfg.settings.len();
    if generated.len() != oracle.len() || generated.len() != scenes.len() * s {
        return Err(Error::shape(
            "noise_metrics",
            format!("{} generated vs {} oracle images", generated.len(), oracle.len()),
        ));
    }
    let plan = cfg.plan()?;
    let owner = plan.owner_map();
    let (h, w) = cfg.sensor;
    let bottom = ((h as f64 * cfg.bottom_fraction).round() as usize).clamp(2, h);
    let mut out = NoiseMetrics {
        row_r: Vec::new(),
        patch_mean_std: Vec::new(),
        kld: Vec::new(),
        std_ratio: Vec::new(),
        var_slope: Vec::new(),
        oracle_slope: Vec::new(),
    };
    let clean: Vec<f64> = scenes.iter().flat_map(|t| t.data().iter().copied()).collect();
    let range = cfg.camera.white_level - cfg.camera.black_level;
    let min_count = (clean.len() / (4 * DEFAULT_LEVELS)).clamp(2, 50) as u64;
    for (k, setting) in cfg.settings.iter().enumerate() {
        let gen: Vec<&Tensor> = generated.iter().skip(k).step_by(s).collect();
        let gt: Vec<&Tensor> = oracle.iter().skip(k).step_by(s).collect();
        let (map, truth) = pattern_profile(cfg, setting)?;
        let profile = row_profile(&gen, cfg.sensor);
        out.row_r.push(pearson(&profile[h - bottom..], &truth[h - bottom..])?);

        let mut means = Vec::new();
        for img in &gen {
            let mut acc = vec![(0.0, 0usize); plan.len()];
            for (i, (&v, &m)) in img.data().iter().zip(map.data()).enumerate() {
                let a = &mut acc[owner[i % (h * w)]];
                a.0 += v - m;
                a.1 += 1;
            }
            means.extend(acc.iter().filter(|a| a.1 > 0).map(|a| a.0 / a.1 as f64));
        }
        out.patch_mean_std.push(mean_var(&means)?.1.sqrt());

        let g: Vec<f64> = gen.iter().flat_map(|t| t.data().iter().copied()).collect();
        let r: Vec<f64> = gt.iter().flat_map(|t| t.data().iter().copied()).collect();
        out.kld.push(kld_samples(&r, &g)?);
        out.std_ratio.push(crate::stats::std_ratio(&g, &r)?);
        let levels = per_clean_value_stats(&clean, &g, cfg.camera.black_level, cfg.camera.white_level, DEFAULT_LEVELS)?;
        out.var_slope.push(fit_variance_line(&levels, min_count)?.slope);
        let gain = cfg.camera.effective(setting).physics.gain();
        out.oracle_slope.push(gain * range * range / DEFAULT_LEVELS as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Toy2dVariant,
    pub final_loss: Option<f64>,
    pub metrics: NoiseMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserStudy {
    pub oracle: DenoiserMetrics,
    pub generated: DenoiserMetrics,
    pub gaussian: DenoiserMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy2dReport {
    pub config: Toy2dConfig,
    /// A second oracle draw scored like a generator.
    pub oracle: NoiseMetrics,
    pub variants: Vec<VariantResult>,
    pub denoiser: Option<DenoiserStudy>,
}

impl Toy2dReport {
    pub fn get(&self, v: Toy2dVariant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// One row per (variant, setting).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,iso,exposure_ratio,row_r,patch_mean_std,kld,std_ratio,var_slope,oracle_slope\n");
        let rows = std::iter::once(("oracle", &self.oracle))
            .chain(self.variants.iter().map(|v| (v.variant.name(), &v.metrics)));
        for (name, m) in rows {
            for (k, st) in self.config.settings.iter().enumerate() {
                s.push_str(&format!(
                    "{name},{},{},{},{},{},{},{},{}\n",
                    st.iso,
                    st.exposure_ratio,
                    m.row_r[k],
                    m.patch_mean_std[k],
                    m.kld[k],
                    m.std_ratio[k],
                    m.var_slope[k],
                    m.oracle_slope[k]
                ));
            }
        }
        s
    }
}

/// Scores denoisers trained on oracle, generated and read-noise-only pairs
/// against oracle test pairs.
pub fn run_denoiser_study(
    cfg: &Toy2dConfig,
    study: &DenoiserStudyConfig,
    generated: &dyn NoiseGenerator,
    train_scenes: &[Tensor],
    test_scenes: &[Tensor],
    rng: &Rng,
) -> Result<DenoiserStudy> {
    let plan = cfg.plan()?;
    let opts = cfg.pair_options();
    let clean_noisy = |g: &dyn NoiseGenerator, scenes: &[Tensor], stream: u64| -> Result<Vec<(Tensor, Tensor)>> {
        Ok(generate_pairs(g, scenes, &cfg.settings, &plan, opts, &rng.substream(stream))?
            .into_iter()
            .map(|p| (p.clean, p.noisy))
            .collect())
    };
    let oracle = PhysicsGenerator::new(cfg.camera.clone());
    let gaussian = PhysicsGenerator::read_only(cfg.camera.clone());
    let test = clean_noisy(&oracle, test_scenes, 0)?;
    let range = cfg.camera.white_level - cfg.camera.black_level;
    let score = |g: &dyn NoiseGenerator, stream: u64| -> Result<DenoiserMetrics> {
        let pairs = clean_noisy(g, train_scenes, stream)?;
        let (net, _) = train_toy_denoiser(&pairs, &study.train, &mut rng.substream(100))?;
        evaluate_denoiser(&net, &test, range)
    };
    Ok(DenoiserStudy {
        oracle: score(&oracle, 1)?,
        generated: score(generated, 2)?,
        gaussian: score(&gaussian, 3)?,
    })
}

/// Trains the requested variants, scores their stitched noise against the
/// oracle and optionally runs the denoiser comparison.
pub fn run_toy2d(cfg: &Toy2dConfig, rng: &Rng) -> Result<Toy2dReport> {
    cfg.validate()?;
    let train_scenes = synthetic_scenes(cfg, cfg.train_scenes, &mut rng.substream(0));
    let eval_scenes = synthetic_scenes(cfg, cfg.eval_scenes, &mut rng.substream(1));
    let oracle_gen = PhysicsGenerator::new(cfg.camera.clone());
    let oracle = stitched_noise(cfg, &oracle_gen, &eval_scenes, &rng.substream(2))?;
    let second = stitched_noise(cfg, &oracle_gen, &eval_scenes, &rng.substream(3))?;
    let reference = noise_metrics(cfg, &eval_scenes, &second, &oracle)?;

    let mut trained: Vec<(Branches, DiffusionModel<TwoBranchNet>, f64)> = Vec::new();
    let mut variants = Vec::new();
    for (i, &v) in cfg.variants.iter().enumerate() {
        let branches = v.branches();
        let pos = match trained.iter().position(|(b, _, _)| *b == branches) {
            Some(p) => p,
            None => {
                let (model, losses) =
                    train_toy2d(cfg, branches, &train_scenes, &mut rng.substream(10 + trained.len() as u64))?;
                trained.push((branches, model, *losses.last().expect("steps > 0")));
                trained.len() - 1
            }
        };
        let (_, model, loss) = &trained[pos];
        let gen = diffusion_generator(cfg, model.clone(), v == Toy2dVariant::ZeroCoords);
        let noise = stitched_noise(cfg, &gen, &eval_scenes, &rng.substream(20 + i as u64))?;
        variants.push(VariantResult {
            variant: v,
            final_loss: Some(*loss),
            metrics: noise_metrics(cfg, &eval_scenes, &noise, &oracle)?,
        });
    }

    let denoiser = match &cfg.denoiser {
        None => None,
        Some(study) => {
            let full = Branches { mlp: true, unet: true };
            let model = match trained.iter().find(|(b, _, _)| *b == full) {
                Some((_, m, _)) => m.clone(),
                None => train_toy2d(cfg, full, &train_scenes, &mut rng.substream(10))?.0,
            };
            let gen = diffusion_generator(cfg, model, false);
            let test_scenes = synthetic_scenes(cfg, study.test_scenes, &mut rng.substream(4));
            Some(run_denoiser_study(
                cfg,
                study,
                &gen,
                &train_scenes[..study.scenes],
                &test_scenes,
                &rng.substream(5),
            )?)
        }
    };
    Ok(Toy2dReport {
        config: cfg.clone(),
        oracle: reference,
        variants,
        denoiser,
    })
}
