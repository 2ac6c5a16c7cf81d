use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Bind, DenoiserConfig, DenoiserNet};
use crate::stats::psnr_ssim;
use crate::tensor::{cosine_annealing_lr, AdamConfig, AdamState};
use crate::{Graph, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub net: DenoiserConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_end: f64,
}

/// Held-out scores, averaged over patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the noisy input itself.
    pub identity_psnr: f64,
    pub identity_ssim: f64,
}

fn batch_of(pairs: &[(Tensor, Tensor)], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let clean: Vec<Tensor> = idx.iter().map(|&i| pairs[i].0.clone()).collect();
    let noisy: Vec<Tensor> = idx.iter().map(|&i| pairs[i].1.clone()).collect();
    Ok((Tensor::stack(&clean)?, Tensor::stack(&noisy)?))
}

/// Trains a residual UNet on `(clean, noisy)` patch pairs with an L1 loss.
/// Returns the net and the per-step losses.
pub fn train_toy_denoiser(
    pairs: &[(Tensor, Tensor)],
    cfg: &DenoiserTrainConfig,
    rng: &mut Rng,
) -> Result<(DenoiserNet, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("denoiser training needs at least one pair".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("denoiser training needs steps > 0 and batch > 0".into()));
    }
    let mut net = DenoiserNet::new(cfg.net.clone(), rng)?;
    let mut adam = AdamState::new(
        net.params(),
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.set_lr(cosine_annealing_lr(step, cfg.steps, cfg.lr, cfg.lr_end));
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.index(pairs.len())).collect();
        let (clean, noisy) = batch_of(pairs, &idx)?;
        let mut g = Graph::new();
        let x = g.constant(noisy);
        let y = net.forward(&mut g, Bind::train(net.params()), x)?;
        let target = g.constant(clean);
        let loss = g.l1_loss(y, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite denoiser loss at step {step}")));
        }
        losses.push(value);
        g.backward(loss)?.accumulate_into(net.params_mut());
        adam.step(net.params_mut())?;
    }
    Ok((net, losses))
}

/// Denoises a batch of `[C, H, W]` patches.
pub fn denoise(net: &DenoiserNet, noisy: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::stack(noisy)?);
    let y = net.forward(&mut g, Bind::frozen(net.params()), x)?;
    let out = g.take(y);
    (0..noisy.len()).map(|i| super::generators::unstack(&out, i)).collect()
}

/// Mean PSNR/SSIM of the denoised test patches against their clean targets.
pub fn evaluate_denoiser(net: &DenoiserNet, test: &[(Tensor, Tensor)], data_range: f64) -> Result<DenoiserMetrics> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut sums = [0.0; 4];
    for chunk in test.chunks(16) {
        let noisy: Vec<Tensor> = chunk.iter().map(|p| p.1.clone()).collect();
        let out = denoise(net, &noisy)?;
        for ((clean, noisy), pred) in chunk.iter().zip(&out) {
            let (p, s) = psnr_ssim(pred, clean, data_range)?;
            let (ip, is) = psnr_ssim(noisy, clean, data_range)?;
            for (acc, v) in sums.iter_mut().zip([p, s, ip, is]) {
                *acc += v;
            }
        }
    }
    let n = test.len() as f64;
    Ok(DenoiserMetrics {
        psnr: sums[0] / n,
        ssim: sums[1] / n,
        identity_psnr: sums[2] / n,
        identity_ssim: sums[3] / n,
    })
}
