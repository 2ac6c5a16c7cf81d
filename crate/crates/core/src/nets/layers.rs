use crate::error::Result;
use crate::tensor::{Conv2dOpts, ParamId};
use crate::{Graph, ParamSet, Rng, Tensor, Var};

/// How parameters enter a graph: as differentiable leaves or as constants.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub params: &'a ParamSet,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn train(params: &'a ParamSet) -> Self {
        Self {
            params,
            trainable: true,
        }
    }

    pub fn frozen(params: &'a ParamSet) -> Self {
        Self {
            params,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.params, id)
        } else {
            g.param_frozen(self.params, id)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Default,
    Zero,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Default => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| (2.0 * rng.uniform() - 1.0) * bound)
        }
    }
}

/// `y = x·W + b` on `[B, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, init: Init, rng: &mut Rng) -> Self {
        let w = ps.add(format!("{name}.w"), init_tensor(&[input, output], input, init, rng));
        let b = ps.add(format!("{name}.b"), init_tensor(&[1, output], input, init, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bind: Bind, x: Var) -> Result<Var> {
        let w = bind.var(g, self.w);
        let b = bind.var(g, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// 2D convolution with bias on `[N, C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    opts: Conv2dOpts,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(&[output, input, kernel, kernel], fan_in, init, rng),
        );
        let b = ps.add(format!("{name}.b"), init_tensor(&[1, output, 1, 1], fan_in, init, rng));
        Self {
            w,
            b,
            opts: Conv2dOpts::new(stride, kernel / 2),
        }
    }

    pub fn pointwise(ps: &mut ParamSet, name: &str, input: usize, output: usize, init: Init, rng: &mut Rng) -> Self {
        Self::new(ps, name, input, output, 1, 1, init, rng)
    }

    pub fn forward(&self, g: &mut Graph, bind: Bind, x: Var) -> Result<Var> {
        let w = bind.var(g, self.w);
        let b = bind.var(g, self.b);
        let y = g.conv2d(x, w, self.opts)?;
        g.add(y, b)
    }
}

/// Layer normalization over `(C, H, W)` with a per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[1, channels, 1, 1], 1.0));
        let beta = ps.zeros(format!("{name}.beta"), &[1, channels, 1, 1]);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, bind: Bind, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let gm = bind.var(g, self.gamma);
        let bt = bind.var(g, self.beta);
        let y = g.mul(n, gm)?;
        g.add(y, bt)
    }
}

/// `f ⊙ (1 + s) + r` where `sr` stacks `s` and `r` along axis 1.
pub fn film(g: &mut Graph, f: Var, sr: Var) -> Result<Var> {
    let parts = g.chunk(sr, 2, 1)?;
    let one_plus = g.add_scalar(parts[0], 1.0);
    let scaled = g.mul(f, one_plus)?;
    g.add(scaled, parts[1])
}

/// Sinusoidal embedding `[B, dim]` of integer timesteps, with argument
/// `(t/T)·1000·exp(−ln(1000)·k/(dim/2))`.
pub fn timestep_embedding(t: &[usize], steps: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let base = ti as f64 / steps as f64 * 1000.0;
        let args: Vec<f64> = (0..half)
            .map(|k| base * (-(1000f64).ln() * k as f64 / half as f64).exp())
            .collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(&[t.len(), 2 * half], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(&[0, 500], 1000, 16);
        assert_eq!(e.shape(), &[2, 16]);
        assert_eq!(e.at(&[0, 0]), 0.0);
        assert_eq!(e.at(&[0, 8]), 1.0);
        assert!((e.at(&[1, 0]) - 500f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn film_with_zero_scale_and_shift_is_identity() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[1, 2, 3, 3], 1.0));
        let sr = g.constant(Tensor::zeros(&[1, 4, 1, 1]));
        let y = film(&mut g, f, sr).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
        let sr = g.constant(Tensor::new(&[1, 4, 1, 1], vec![0.5, 0.5, 0.25, 0.25]).unwrap());
        let y = film(&mut g, f, sr).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    }
}
