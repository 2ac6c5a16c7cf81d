//! Finite-difference checks for every differentiable op.

use super::{Conv2dOpts, Graph, Rng, Tensor, Var};
use crate::error::Result;

const H: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Reduces the op output to a scalar with fixed random weights so that
/// every output element contributes with a distinct coefficient.
fn scalarize(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let l = scalarize(&mut g, y, &mut Rng::new(seed, 99))?;
    Ok(g.value(l).data()[0])
}

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between analytic and numeric
/// gradients, maximized over inputs.
fn check(build: &Build, shapes: &[&[usize]], seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed, 0);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = build(&mut g, &vars)?;
    let l = scalarize(&mut g, y, &mut Rng::new(seed, 99))?;
    let grads = g.backward(l)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(build, &plus, seed)? - eval(build, &minus, seed)?) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if na + nn < 1e-12 { diff } else { diff / (na + nn) };
        worst = worst.max(rel);
    }
    Ok(worst)
}

type Case = (&'static str, Box<Build>, &'static [&'static [usize]]);

fn cases() -> Vec<Case> {
    vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1])), &[&[2, 3, 4], &[3, 1]]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), &[&[2, 3], &[2, 3]]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), &[&[2, 3, 2, 2], &[2, 3, 1, 1]]),
        ("mul_self", Box::new(|g, v| g.mul(v[0], v[0])), &[&[5]]),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7))), &[&[4]]),
        ("add_scalar", Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))), &[&[4]]),
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), &[&[3, 4], &[4, 2]]),
        ("bmm", Box::new(|g, v| g.bmm(v[0], v[1])), &[&[2, 3, 4], &[2, 4, 2]]),
        ("transpose", Box::new(|g, v| g.transpose(v[0])), &[&[2, 3, 4]]),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[6, 2])), &[&[3, 4]]),
        (
            "concat_channels",
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            &[&[2, 1, 3, 3], &[2, 2, 3, 3]],
        ),
        ("concat_rows", Box::new(|g, v| g.concat(&[v[0], v[1]], 0)), &[&[1, 3], &[2, 3]]),
        ("narrow", Box::new(|g, v| g.narrow(v[0], 1, 1, 2)), &[&[2, 4, 3]]),
        ("gather_rows", Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2])), &[&[3, 4]]),
        (
            "conv2d_3x3",
            Box::new(|g, v| g.conv2d(v[0], v[1], Conv2dOpts::new(1, 1))),
            &[&[2, 2, 5, 4], &[3, 2, 3, 3]],
        ),
        (
            "conv2d_stride2",
            Box::new(|g, v| g.conv2d(v[0], v[1], Conv2dOpts::new(2, 1))),
            &[&[1, 2, 6, 6], &[2, 2, 3, 3]],
        ),
        (
            "conv2d_1x1",
            Box::new(|g, v| g.conv2d(v[0], v[1], Conv2dOpts::default())),
            &[&[2, 3, 3, 3], &[4, 3, 1, 1]],
        ),
        ("conv1d", Box::new(|g, v| g.conv1d(v[0], v[1], 1, 1)), &[&[2, 2, 7], &[3, 2, 3]]),
        ("upsample2x", Box::new(|g, v| g.upsample2x(v[0])), &[&[1, 2, 2, 3]]),
        ("avg_pool2x2", Box::new(|g, v| g.avg_pool2x2(v[0])), &[&[1, 2, 4, 4]]),
        ("silu", Box::new(|g, v| Ok(g.silu(v[0]))), &[&[3, 4]]),
        ("sin", Box::new(|g, v| Ok(g.sin(v[0]))), &[&[6]]),
        ("cos", Box::new(|g, v| Ok(g.cos(v[0]))), &[&[6]]),
        ("softmax", Box::new(|g, v| g.softmax_last(v[0])), &[&[3, 5]]),
        ("layer_norm", Box::new(|g, v| g.layer_norm(v[0], 1e-5)), &[&[2, 3, 2, 2]]),
        ("sum", Box::new(|g, v| Ok(g.sum(v[0]))), &[&[3, 2]]),
        ("mean", Box::new(|g, v| Ok(g.mean(v[0]))), &[&[3, 2]]),
        ("mse_loss", Box::new(|g, v| g.mse_loss(v[0], v[1])), &[&[2, 5], &[2, 5]]),
        ("l1_loss", Box::new(|g, v| g.l1_loss(v[0], v[1])), &[&[2, 5], &[2, 5]]),
    ]
}

/// Worst relative gradient error of every differentiable op over `seeds`
/// random draws, as `(op, error)`.
pub fn gradient_check_all(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    cases()
        .into_iter()
        .map(|(name, build, shapes)| {
            let worst = (0..seeds).try_fold(0.0f64, |w, seed| Ok::<_, crate::Error>(w.max(check(&*build, shapes, seed)?)))?;
            Ok((name, worst))
        })
        .collect()
}
