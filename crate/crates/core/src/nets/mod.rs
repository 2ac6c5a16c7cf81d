//! Network definitions: the 1D toy ε-predictor, the two-branch patch
//! ε-predictor with positional, timestep and camera conditioning, and a
//! plain UNet denoiser.

mod layers;
mod toy;
mod two_branch;

pub use layers::{film, timestep_embedding, Bind, Conv, Init, Linear, Norm};
pub use toy::{ToyNet1d, ToyNetConfig};
pub use two_branch::{
    normalize_coords, BlockContext, Branches, CameraEmbeddingBank, CrossAttention, DenoiserConfig, DenoiserNet,
    Injections, PatchCond, PositionalEncoder, TwoBranchConfig, TwoBranchNet,
};

#[cfg(test)]
mod tests;
