use serde::{Deserialize, Serialize};

use super::layers::{timestep_embedding, Bind, Init, Linear};
use crate::error::{Error, Result};
use crate::{Graph, ParamSet, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub time_dim: usize,
    /// Width of the optional per-sample condition.
    pub cond_dim: usize,
    /// Diffusion steps `T`, scales the time embedding.
    pub steps: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            time_dim: 16,
            cond_dim: 0,
            steps: 1000,
        }
    }
}

/// Scalar ε-predictor: an MLP over `[x_t, emb(t), cond]`.
#[derive(Debug, Clone)]
pub struct ToyNet1d {
    config: ToyNetConfig,
    params: ParamSet,
    layers: Vec<Linear>,
}

impl ToyNet1d {
    pub fn new(config: ToyNetConfig, rng: &mut Rng) -> Result<Self> {
        if config.hidden == 0 || config.depth == 0 || config.time_dim < 2 || config.time_dim % 2 != 0 {
            return Err(Error::Config(format!("invalid toy net config {config:?}")));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut width = 1 + config.time_dim + config.cond_dim;
        for i in 0..config.depth {
            layers.push(Linear::new(&mut params, &format!("l{i}"), width, config.hidden, Init::Default, rng));
            width = config.hidden;
        }
        layers.push(Linear::new(&mut params, "out", width, 1, Init::Default, rng));
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ToyNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `x: [B, 1]`, `cond: [B, cond_dim]` when `cond_dim > 0`.
    pub fn forward(&self, g: &mut Graph, bind: Bind, x: Var, t: &[usize], cond: Option<&Tensor>) -> Result<Var> {
        let b = g.shape(x)[0];
        if g.shape(x) != [b, 1] || t.len() != b {
            return Err(Error::shape(
                "toy_net",
                format!("x {:?} with {} timesteps", g.shape(x), t.len()),
            ));
        }
        let emb = g.constant(timestep_embedding(t, self.config.steps, self.config.time_dim));
        let mut inputs = vec![x, emb];
        match (cond, self.config.cond_dim) {
            (None, 0) => {}
            (Some(c), d) if d > 0 && c.shape() == [b, d] => inputs.push(g.constant(c.clone())),
            (c, d) => {
                return Err(Error::shape(
                    "toy_net",
                    format!("condition {:?} for cond_dim {d}", c.map(|c| c.shape().to_vec())),
                ))
            }
        }
        let mut h = g.concat(&inputs, 1)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bind, h)?;
            if i < last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}
