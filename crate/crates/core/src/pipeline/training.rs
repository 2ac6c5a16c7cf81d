use serde::{Deserialize, Serialize};

use super::pairs::{resample_for_balance, Manifest, PatchPair};
use crate::diffusion::{train, DiffusionModel, Normalization, TrainBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::{normalize_coords, Branches, PatchCond, TwoBranchConfig, TwoBranchNet};
use crate::physics::{coord_map, CameraSetting};
use crate::schedule::{Schedule, ScheduleKind};
use crate::{Rng, Tensor};

/// Two-branch model and training setup read by `diffusion train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainSpec {
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub branches: Branches,
    pub train: TrainConfig,
    /// Settings with fewer pairs are topped up by repetition.
    pub min_pairs_per_setting: usize,
}

impl Default for DiffusionTrainSpec {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Sigmoid2,
            diffusion_steps: 512,
            base_channels: 8,
            depth: 2,
            mlp_hidden: 32,
            branches: Branches { mlp: true, unet: true },
            train: TrainConfig {
                steps: 1000,
                batch: 8,
                lr: 2e-3,
                lr_end: 1e-4,
            },
            min_pairs_per_setting: 100,
        }
    }
}

/// Trains a two-branch noise model on the pre-clip noise of `pairs`.
///
/// Settings are registered in first-seen order; noise is standardized per
/// setting.
pub fn train_on_pairs(
    spec: &DiffusionTrainSpec,
    manifest: &Manifest,
    pairs: &[PatchPair],
    rng: &mut Rng,
) -> Result<(DiffusionModel<TwoBranchNet>, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("diffusion training needs at least one pair".into()));
    }
    let mut groups: Vec<(CameraSetting, Vec<usize>)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| *s == p.setting) {
            Some((_, v)) => v.push(i),
            None => groups.push((p.setting, vec![i])),
        }
    }
    let settings: Vec<CameraSetting> = groups.iter().map(|g| g.0).collect();
    let norm = Normalization::standardize(
        &groups
            .iter()
            .map(|(_, idx)| idx.iter().flat_map(|&i| pairs[i].noise.data().iter().copied()).collect())
            .collect::<Vec<Vec<f64>>>(),
    )?;
    let pool: Vec<(usize, usize)> = resample_for_balance(&groups, spec.min_pairs_per_setting)?
        .into_iter()
        .enumerate()
        .flat_map(|(k, (_, idx))| idx.into_iter().map(move |i| (k, i)))
        .collect();

    let sensor = (manifest.plan.height, manifest.plan.width);
    let mut cfg = TwoBranchConfig::toy(pairs[0].clean.shape()[0], settings, spec.diffusion_steps);
    cfg.base_channels = spec.base_channels;
    cfg.depth = spec.depth;
    cfg.mlp_hidden = spec.mlp_hidden;
    cfg.branches = spec.branches;
    let mut model = DiffusionModel {
        schedule: Schedule::build(spec.schedule, spec.diffusion_steps)?,
        net: TwoBranchNet::new(cfg, rng)?,
        norm,
    };
    let losses = train(&mut model, &spec.train, rng, |_, rng| {
        let picks: Vec<(usize, usize)> = (0..spec.train.batch).map(|_| pool[rng.index(pool.len())]).collect();
        let take = |f: &dyn Fn(&PatchPair) -> Tensor| -> Result<Tensor> {
            Tensor::stack(&picks.iter().map(|&(_, i)| f(&pairs[i])).collect::<Vec<_>>())
        };
        let coords = take(&|p| {
            let s = p.clean.shape();
            coord_map(p.origin, s[1], s[2])
        })?;
        let setting_idx: Vec<usize> = picks.iter().map(|&(k, _)| k).collect();
        Ok(TrainBatch {
            n0: take(&|p| p.noise.clone())?,
            cond: PatchCond {
                clean: take(&|p| p.clean.clone())?,
                coords: normalize_coords(&coords, sensor)?,
                settings: setting_idx.clone(),
            },
            groups: setting_idx,
        })
    })?;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_pairs, plan_tiles, PairOptions, PhysicsGenerator};
    use crate::physics::{FixedPatternConfig, PhysicsNoiseParams, ReadNoiseKind, SyntheticCameraModel};

    #[test]
    fn trains_on_an_unbalanced_archive() {
        let camera = SyntheticCameraModel {
            physics: PhysicsNoiseParams::new(1e-5, 1.0, 0.0, 5e-5).unwrap(),
            read_noise: ReadNoiseKind::Gaussian,
            row_band_sigma: 0.0,
            fixed_pattern: FixedPatternConfig::zero(),
            black_level: 0.0,
            white_level: 1.0,
            iso_ref: 800.0,
            sensor_height: 16,
        };
        let plan = plan_tiles(16, 16, 8, 0.0).unwrap();
        let cleans = vec![Tensor::full(&[1, 16, 16], 0.3)];
        let opts = PairOptions {
            black_level: 0.0,
            white_level: 1.0,
            batch: 4,
        };
        let g = PhysicsGenerator::new(camera);
        let a = CameraSetting::new(800, 100.0).unwrap();
        let b = CameraSetting::new(6400, 300.0).unwrap();
        let mut pairs = generate_pairs(&g, &cleans, &[a, b], &plan, opts, &Rng::new(1, 0)).unwrap();
        pairs.truncate(5);
        let manifest = Manifest {
            black_level: 0.0,
            white_level: 1.0,
            plan,
            entries: Vec::new(),
        };
        let spec = DiffusionTrainSpec {
            diffusion_steps: 16,
            base_channels: 4,
            depth: 1,
            mlp_hidden: 8,
            train: TrainConfig {
                steps: 3,
                batch: 2,
                lr: 1e-3,
                lr_end: 1e-4,
            },
            ..Default::default()
        };
        let (model, losses) = train_on_pairs(&spec, &manifest, &pairs, &mut Rng::new(2, 0)).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(model.net.bank().settings(), [a, b]);
        assert!(model.norm.scale[1] > model.norm.scale[0]);
        assert!(train_on_pairs(&spec, &manifest, &[], &mut Rng::new(2, 0)).is_err());
    }
}
