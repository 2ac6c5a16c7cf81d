//! Model checkpoints: parameters in an `NDCK` file, architecture and
//! normalization in a `<file>.json` sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nst::sidecar_path;
use crate::diffusion::{DiffusionModel, Normalization};
use crate::error::{Error, Result};
use crate::nets::{DenoiserConfig, DenoiserNet, ToyNet1d, ToyNetConfig, TwoBranchConfig, TwoBranchNet};
use crate::schedule::{Schedule, ScheduleKind};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointRecord};
use crate::{ParamSet, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Toy1d {
        net: ToyNetConfig,
    },
    TwoBranch {
        net: TwoBranchConfig,
        /// Full sensor `(H, W)` the coordinates are normalized against.
        sensor: (usize, usize),
    },
    Denoiser {
        net: DenoiserConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    spec: ModelSpec,
    schedule: Option<ScheduleKind>,
    diffusion_steps: Option<usize>,
    norm: Option<Normalization>,
}

#[derive(Debug, Clone)]
pub enum SavedModel {
    Toy1d(DiffusionModel<ToyNet1d>),
    TwoBranch {
        model: DiffusionModel<TwoBranchNet>,
        sensor: (usize, usize),
    },
}

fn write_params(path: &Path, params: &ParamSet, sidecar: &Sidecar) -> Result<()> {
    let records: Vec<CheckpointRecord> = params
        .iter()
        .map(|(name, t)| CheckpointRecord::from_tensor(name, t))
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &records)?;
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn read_params(path: &Path) -> Result<(Sidecar, Vec<(String, Tensor)>)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::Config(format!("missing model sidecar {}", side.display())));
    }
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(side)?)?;
    let records = read_checkpoint(BufReader::new(File::open(path)?))?;
    let tensors = records
        .iter()
        .map(|r| Ok((r.name.clone(), r.to_tensor()?)))
        .collect::<Result<_>>()?;
    Ok((sidecar, tensors))
}

fn load_into(params: &mut ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
    params.load_values(tensors.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let (spec, schedule, norm, params) = match model {
        SavedModel::Toy1d(m) => (
            ModelSpec::Toy1d {
                net: m.net.config().clone(),
            },
            &m.schedule,
            &m.norm,
            m.net.params(),
        ),
        SavedModel::TwoBranch { model, sensor } => (
            ModelSpec::TwoBranch {
                net: model.net.config().clone(),
                sensor: *sensor,
            },
            &model.schedule,
            &model.norm,
            model.net.params(),
        ),
    };
    let sidecar = Sidecar {
        spec,
        schedule: Some(schedule.kind()),
        diffusion_steps: Some(schedule.steps()),
        norm: Some(norm.clone()),
    };
    write_params(path, params, &sidecar)
}

/// Parameters come back as the stored `f32` values.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    let (side, tensors) = read_params(path)?;
    let (Some(kind), Some(steps), Some(norm)) = (side.schedule, side.diffusion_steps, side.norm) else {
        return Err(Error::Config(format!("{} is not a diffusion checkpoint", path.display())));
    };
    let schedule = Schedule::build(kind, steps)?;
    let mut rng = Rng::new(0, 0);
    match side.spec {
        ModelSpec::Toy1d { net } => {
            let mut net = ToyNet1d::new(net, &mut rng)?;
            load_into(net.params_mut(), &tensors)?;
            Ok(SavedModel::Toy1d(DiffusionModel { schedule, net, norm }))
        }
        ModelSpec::TwoBranch { net, sensor } => {
            let mut net = TwoBranchNet::new(net, &mut rng)?;
            load_into(net.params_mut(), &tensors)?;
            Ok(SavedModel::TwoBranch {
                model: DiffusionModel { schedule, net, norm },
                sensor,
            })
        }
        ModelSpec::Denoiser { .. } => Err(Error::Config(format!(
            "{} holds a denoiser, not a diffusion model",
            path.display()
        ))),
    }
}

pub fn save_denoiser(path: &Path, net: &DenoiserNet) -> Result<()> {
    let sidecar = Sidecar {
        spec: ModelSpec::Denoiser {
            net: net.config().clone(),
        },
        schedule: None,
        diffusion_steps: None,
        norm: None,
    };
    write_params(path, net.params(), &sidecar)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserNet> {
    let (side, tensors) = read_params(path)?;
    let ModelSpec::Denoiser { net } = side.spec else {
        return Err(Error::Config(format!("{} is not a denoiser checkpoint", path.display())));
    };
    let mut net = DenoiserNet::new(net, &mut Rng::new(0, 0))?;
    load_into(net.params_mut(), &tensors)?;
    Ok(net)
}
