use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generators::NoiseGenerator;
use super::nst::{load_nst, save_nst, NstKind, NstMeta};
use super::tiling::TilingPlan;
use crate::error::{Error, Result};
use crate::physics::CameraSetting;
use crate::{Rng, Tensor};

/// One clean/noisy training pair cut from a full image.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub image: usize,
    pub origin: (usize, usize),
    pub setting: CameraSetting,
    pub clean: Tensor,
    /// Noise before clipping.
    pub noise: Tensor,
    /// `clip(clean + noise)`.
    pub noisy: Tensor,
}

impl PatchPair {
    pub fn coords(&self, patch: usize) -> Tensor {
        crate::physics::coord_map(self.origin, patch, patch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: usize,
    pub origin: [usize; 2],
    pub iso: u32,
    pub exposure_ratio: f64,
    pub clean: String,
    pub noisy: String,
    pub noise: String,
}

impl ManifestEntry {
    pub fn setting(&self) -> Result<CameraSetting> {
        CameraSetting::new(self.iso, self.exposure_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub black_level: f64,
    pub white_level: f64,
    pub plan: TilingPlan,
    pub entries: Vec<ManifestEntry>,
}

/// Pair generation options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOptions {
    pub black_level: f64,
    pub white_level: f64,
    /// Patches handed to the generator per call.
    pub batch: usize,
}

/// Runs `generator` over every (image, setting, tile), in that nesting
/// order. Batches draw from their own substreams, so the result does not
/// depend on the thread count.
pub fn generate_pairs(
    generator: &dyn NoiseGenerator,
    cleans: &[Tensor],
    settings: &[CameraSetting],
    plan: &TilingPlan,
    opts: PairOptions,
    rng: &Rng,
) -> Result<Vec<PatchPair>> {
    if opts.batch == 0 || !(opts.white_level > opts.black_level) {
        return Err(Error::Config("pair generation needs batch > 0 and white > black".into()));
    }
    let mut jobs = Vec::new();
    for (i, img) in cleans.iter().enumerate() {
        for &s in settings {
            for o in plan.origins() {
                jobs.push((i, s, o, plan.extract(img, o)?));
            }
        }
    }
    let batches: Vec<Vec<PatchPair>> = jobs
        .par_chunks(opts.batch)
        .enumerate()
        .map(|(b, chunk)| {
            let clean: Vec<Tensor> = chunk.iter().map(|j| j.3.clone()).collect();
            let coords: Vec<Tensor> = chunk.iter().map(|j| plan.coords(j.2)).collect();
            let sets: Vec<CameraSetting> = chunk.iter().map(|j| j.1).collect();
            let noise = generator.generate(&clean, &coords, &sets, &mut rng.substream(b as u64))?;
            if noise.len() != chunk.len() {
                return Err(Error::shape("generate_pairs", "generator returned a short batch"));
            }
            chunk
                .iter()
                .zip(noise)
                .map(|((image, setting, origin, clean), noise)| {
                    let noisy = clean.zip_map(&noise, |x, n| (x + n).clamp(opts.black_level, opts.white_level))?;
                    Ok(PatchPair {
                        image: *image,
                        origin: *origin,
                        setting: *setting,
                        clean: clean.clone(),
                        noise,
                        noisy,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Writes pairs as NST files plus `manifest.json` into `dir`.
pub fn write_pairs(dir: &Path, pairs: &[PatchPair], plan: &TilingPlan, black: f64, white: f64) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let names = [
            (format!("{k:06}_clean.nst"), &p.clean, NstKind::Clean),
            (format!("{k:06}_noisy.nst"), &p.noisy, NstKind::Noisy),
            (format!("{k:06}_noise.nst"), &p.noise, NstKind::Noise),
        ];
        for (name, t, kind) in &names {
            let meta = NstMeta {
                iso: Some(p.setting.iso),
                exposure_ratio: Some(p.setting.exposure_ratio),
                black_level: black,
                white_level: white,
                kind: *kind,
            };
            save_nst(&dir.join(name), t, Some(&meta))?;
        }
        let [c, n, z] = names.map(|n| n.0);
        entries.push(ManifestEntry {
            image: p.image,
            origin: [p.origin.0, p.origin.1],
            iso: p.setting.iso,
            exposure_ratio: p.setting.exposure_ratio,
            clean: c,
            noisy: n,
            noise: z,
        });
    }
    let manifest = Manifest {
        black_level: black,
        white_level: white,
        plan: plan.clone(),
        entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?)
}

/// Loads every pair listed in `dir/manifest.json`.
pub fn read_pairs(dir: &Path) -> Result<(Manifest, Vec<PatchPair>)> {
    let manifest = read_manifest(dir)?;
    let pairs = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(PatchPair {
                image: e.image,
                origin: (e.origin[0], e.origin[1]),
                setting: e.setting()?,
                clean: load_nst(&dir.join(&e.clean))?.0,
                noisy: load_nst(&dir.join(&e.noisy))?.0,
                noise: load_nst(&dir.join(&e.noise))?.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, pairs))
}

/// Repeats the members of each group cyclically until it holds at least
/// `min_count` entries; larger groups are left alone.
pub fn resample_for_balance<K: Clone, T: Clone>(groups: &[(K, Vec<T>)], min_count: usize) -> Result<Vec<(K, Vec<T>)>> {
    groups
        .iter()
        .enumerate()
        .map(|(i, (k, items))| {
            if items.is_empty() {
                return Err(Error::InvalidArgument(format!("setting group {i} is empty")));
            }
            let n = items.len().max(min_count);
            Ok((k.clone(), items.iter().cycle().take(n).cloned().collect()))
        })
        .collect()
}

/// Groups manifest entries by camera setting, in first-seen order.
pub fn group_by_setting(entries: &[ManifestEntry]) -> Result<Vec<(CameraSetting, Vec<ManifestEntry>)>> {
    let mut groups: Vec<(CameraSetting, Vec<ManifestEntry>)> = Vec::new();
    for e in entries {
        let s = e.setting()?;
        match groups.iter_mut().find(|(k, _)| *k == s) {
            Some((_, v)) => v.push(e.clone()),
            None => groups.push((s, vec![e.clone()])),
        }
    }
    Ok(groups)
}
