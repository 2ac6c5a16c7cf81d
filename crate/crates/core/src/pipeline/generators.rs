use crate::diffusion::{ddim_sample, ddpm_sample, DiffusionModel, Sampler};
use crate::error::{Error, Result};
use crate::nets::{normalize_coords, PatchCond, TwoBranchNet};
use crate::physics::{sample_camera_noise_with, CameraSetting, NoiseComponents, SyntheticCameraModel};
use crate::{Rng, Tensor};

/// Produces noise for batches of `[C, P, P]` clean patches with absolute
/// coordinates `[2, P, P]`.
pub trait NoiseGenerator: Sync {
    fn generate(
        &self,
        clean: &[Tensor],
        coords: &[Tensor],
        settings: &[CameraSetting],
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>>;
}

fn check_batch(clean: &[Tensor], coords: &[Tensor], settings: &[CameraSetting]) -> Result<()> {
    if clean.len() != coords.len() || clean.len() != settings.len() {
        return Err(Error::shape(
            "generate",
            format!("{} clean, {} coords, {} settings", clean.len(), coords.len(), settings.len()),
        ));
    }
    Ok(())
}

/// Ground-truth camera noise (pre-clip).
#[derive(Debug, Clone)]
pub struct PhysicsGenerator {
    pub model: SyntheticCameraModel,
    pub components: NoiseComponents,
}

impl PhysicsGenerator {
    pub fn new(model: SyntheticCameraModel) -> Self {
        Self {
            model,
            components: NoiseComponents::ALL,
        }
    }

    /// Read noise only: the "Gaussian-only" mismatched model.
    pub fn read_only(model: SyntheticCameraModel) -> Self {
        Self {
            model,
            components: NoiseComponents::READ_ONLY,
        }
    }
}

impl NoiseGenerator for PhysicsGenerator {
    fn generate(
        &self,
        clean: &[Tensor],
        coords: &[Tensor],
        settings: &[CameraSetting],
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>> {
        check_batch(clean, coords, settings)?;
        clean
            .iter()
            .zip(coords)
            .zip(settings)
            .map(|((x, c), s)| Ok(sample_camera_noise_with(x, s, &self.model, c, self.components, rng)?.noise))
            .collect()
    }
}

/// Always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroGenerator;

impl NoiseGenerator for ZeroGenerator {
    fn generate(&self, clean: &[Tensor], coords: &[Tensor], settings: &[CameraSetting], _: &mut Rng) -> Result<Vec<Tensor>> {
        check_batch(clean, coords, settings)?;
        Ok(clean.iter().map(|x| Tensor::zeros(x.shape())).collect())
    }
}

/// A trained two-branch diffusion model as a noise source.
#[derive(Debug, Clone)]
pub struct DiffusionGenerator {
    pub model: DiffusionModel<TwoBranchNet>,
    /// Full sensor `(H, W)` used to normalize coordinates.
    pub sensor: (usize, usize),
    pub sampler: Sampler,
    /// DDIM steps.
    pub steps: usize,
    pub eta: f64,
    /// Feed an all-zero coordinate map instead of the true coordinates.
    pub zero_coords: bool,
}

impl DiffusionGenerator {
    pub fn new(model: DiffusionModel<TwoBranchNet>, sensor: (usize, usize)) -> Self {
        Self {
            model,
            sensor,
            sampler: Sampler::Ddpm,
            steps: 0,
            eta: 0.0,
            zero_coords: false,
        }
    }

    pub fn cond(&self, clean: &[Tensor], coords: &[Tensor], settings: &[CameraSetting]) -> Result<(PatchCond, Vec<usize>)> {
        check_batch(clean, coords, settings)?;
        let bank = self.model.net.bank();
        let idx = settings.iter().map(|s| bank.index_of(s)).collect::<Result<Vec<_>>>()?;
        let coords = if self.zero_coords {
            Tensor::zeros(&[coords.len(), 2, coords[0].shape()[1], coords[0].shape()[2]])
        } else {
            normalize_coords(&Tensor::stack(coords)?, self.sensor)?
        };
        Ok((
            PatchCond {
                clean: Tensor::stack(clean)?,
                coords,
                settings: idx.clone(),
            },
            idx,
        ))
    }
}

impl NoiseGenerator for DiffusionGenerator {
    fn generate(
        &self,
        clean: &[Tensor],
        coords: &[Tensor],
        settings: &[CameraSetting],
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>> {
        if clean.is_empty() {
            return Ok(Vec::new());
        }
        let (cond, groups) = self.cond(clean, coords, settings)?;
        let shape = cond.clean.shape().to_vec();
        let out = match self.sampler {
            Sampler::Ddpm => ddpm_sample(&self.model, &cond, &shape, &groups, rng)?,
            Sampler::Ddim => ddim_sample(&self.model, &cond, &shape, &groups, self.steps, self.eta, rng)?,
        };
        (0..clean.len()).map(|i| unstack(&out, i)).collect()
    }
}

pub(crate) fn unstack(t: &Tensor, i: usize) -> Result<Tensor> {
    let s = t.slice_leading(i, 1)?;
    let shape = s.shape()[1..].to_vec();
    s.reshape(&shape)
}
