//! File formats, tiling, pair generation and the toy denoiser.

mod denoiser;
mod generators;
mod model_io;
mod nst;
mod pairs;
mod tiling;
mod training;

pub use denoiser::{denoise, evaluate_denoiser, train_toy_denoiser, DenoiserMetrics, DenoiserTrainConfig};
pub use generators::{DiffusionGenerator, NoiseGenerator, PhysicsGenerator, ZeroGenerator};
pub use model_io::{load_denoiser, load_model, save_denoiser, save_model, ModelSpec, SavedModel};
pub use nst::{load_nst, read_nst, save_nst, sidecar_path, write_nst, NstKind, NstMeta};
pub use pairs::{
    generate_pairs, group_by_setting, read_manifest, read_pairs, resample_for_balance, write_pairs, Manifest,
    ManifestEntry, PairOptions, PatchPair,
};
pub use tiling::{pack_bayer, plan_tiles, unpack_bayer, TilingPlan};
pub use training::{train_on_pairs, DiffusionTrainSpec};
