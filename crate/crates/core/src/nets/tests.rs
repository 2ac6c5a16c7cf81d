use super::*;
use crate::physics::{coord_map, CameraSetting};
use crate::{Graph, ParamSet, Rng, Tensor};

fn settings() -> Vec<CameraSetting> {
    vec![
        CameraSetting::new(800, 100.0).unwrap(),
        CameraSetting::new(6400, 300.0).unwrap(),
    ]
}

fn tiny_config() -> TwoBranchConfig {
    TwoBranchConfig {
        channels: 1,
        base_channels: 4,
        depth: 2,
        mlp_hidden: 6,
        time_dim: 8,
        time_hidden: 8,
        pe_dim: 4,
        camera_dim: 4,
        camera_tokens: 2,
        steps: 100,
        settings: settings(),
        branches: Branches { mlp: true, unet: true },
    }
}

fn cond(b: usize, h: usize, w: usize, rng: &mut Rng) -> PatchCond {
    let coords: Vec<Tensor> = (0..b)
        .map(|i| normalize_coords(&coord_map((8 * i, 4), h, w), (64, 64)).unwrap())
        .collect();
    PatchCond {
        clean: Tensor::from_fn(&[b, 1, h, w], |_| rng.uniform()),
        coords: Tensor::stack(&coords).unwrap(),
        settings: (0..b).map(|i| i % 2).collect(),
    }
}

fn randomize(ps: &mut ParamSet, std: f64, rng: &mut Rng) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

#[test]
fn zero_initialized_heads_predict_zero() {
    let mut rng = Rng::new(1, 0);
    let net = TwoBranchNet::new(tiny_config(), &mut rng).unwrap();
    let c = cond(2, 8, 8, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng));
    let y = net.forward(&mut g, Bind::frozen(net.params()), x, &[3, 50], &c).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 8, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn positional_encoding_zero_and_translation() {
    let mut rng = Rng::new(2, 0);
    let mut ps = ParamSet::new();
    let pe = PositionalEncoder::new(&mut ps, "pe", 4, Init::Zero, &mut rng);
    let mut g = Graph::new();
    let zeros = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let p = pe.encode(&mut g, Bind::frozen(&ps), zeros).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));

    let mut ps = ParamSet::new();
    let pe = PositionalEncoder::new(&mut ps, "pe", 4, Init::Default, &mut rng);
    let a = normalize_coords(&coord_map((0, 0), 4, 4), (32, 32)).unwrap().reshape(&[1, 2, 4, 4]).unwrap();
    let b = normalize_coords(&coord_map((8, 8), 4, 4), (32, 32)).unwrap().reshape(&[1, 2, 4, 4]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let pa = pe.encode(&mut g, Bind::frozen(&ps), va).unwrap();
    let pb = pe.encode(&mut g, Bind::frozen(&ps), vb).unwrap();
    assert_eq!(g.shape(pa), &[1, 4, 4, 4]);
    assert_ne!(g.value(pa).data(), g.value(pb).data());
    let bad = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(pe.encode(&mut g, Bind::frozen(&ps), bad).is_err());
}

#[test]
fn attention_identities() {
    let mut rng = Rng::new(3, 0);
    let mut ps = ParamSet::new();
    let attn = CrossAttention::new(&mut ps, "a", 3, 4, &mut rng);
    let f = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
    let z = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);

    let mut g = Graph::new();
    let (vf, vz) = (g.constant(f.clone()), g.constant(z.clone()));
    let out = attn.attend(&mut g, Bind::frozen(&ps), vf, vz).unwrap();
    let v_row: Vec<f64> = {
        let wv = ps.get(attn.value_weight());
        (0..3)
            .map(|c| (0..4).map(|k| z.data()[k] * wv.data()[k * 3 + c]).sum())
            .collect()
    };
    for c in 0..3 {
        for p in 0..4 {
            let expect = f.data()[c * 4 + p] + v_row[c];
            assert!((g.value(out).data()[c * 4 + p] - expect).abs() < 1e-12);
        }
    }

    ps.get_mut(attn.value_weight()).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut g = Graph::new();
    let (vf, vz) = (g.constant(f.clone()), g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut rng)));
    let out = attn.attend(&mut g, Bind::frozen(&ps), vf, vz).unwrap();
    assert_eq!(g.value(out).data(), f.data());
}

#[test]
fn distinct_settings_give_distinct_outputs() {
    let mut rng = Rng::new(4, 0);
    for _ in 0..100 {
        let mut ps = ParamSet::new();
        let bank = CameraEmbeddingBank::new(&mut ps, "cam", &settings(), 2, 4, &mut rng).unwrap();
        assert!(bank.rows(&ps) > bank.settings().len());
        let attn = CrossAttention::new(&mut ps, "a", 3, 4, &mut rng);
        let f = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let mut outs = Vec::new();
        for s in settings() {
            let idx = bank.index_of(&s).unwrap();
            let mut g = Graph::new();
            let z = bank.lookup(&mut g, Bind::frozen(&ps), &[idx]).unwrap();
            let vf = g.constant(f.clone());
            let o = attn.attend(&mut g, Bind::frozen(&ps), vf, z).unwrap();
            outs.push(g.value(o).data().to_vec());
        }
        assert_ne!(outs[0], outs[1]);
    }
}

#[test]
fn unregistered_setting_is_reported() {
    let mut rng = Rng::new(5, 0);
    let mut ps = ParamSet::new();
    let bank = CameraEmbeddingBank::new(&mut ps, "cam", &settings(), 2, 4, &mut rng).unwrap();
    let err = bank.index_of(&CameraSetting::new(3200, 250.0).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("ISO 800") && msg.contains("ISO 6400"), "{msg}");
    assert_eq!(bank.index_of(&settings()[1]).unwrap(), bank.index_of(&settings()[1]).unwrap());
}

#[test]
fn mlp_branch_is_pixelwise() {
    let mut rng = Rng::new(6, 0);
    let mut net = TwoBranchNet::new(tiny_config(), &mut rng).unwrap();
    randomize(net.params_mut(), 0.3, &mut rng);
    let c = cond(1, 8, 8, &mut rng);
    let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
    let mut x2 = x.clone();
    x2.data_mut()[27] += 0.5;
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let (m, u) = net.branch_outputs(&mut g, Bind::frozen(net.params()), v, &[10], &c).unwrap();
        (g.value(m.unwrap()).data().to_vec(), g.value(u.unwrap()).data().to_vec())
    };
    let (m1, u1) = run(&x);
    let (m2, u2) = run(&x2);
    for i in 0..64 {
        if i == 27 {
            assert_ne!(m1[i], m2[i]);
        } else {
            assert_eq!(m1[i], m2[i], "pixel {i}");
        }
    }
    assert!((0..64).filter(|&i| i != 27).any(|i| u1[i] != u2[i]));
}

#[test]
fn shape_errors() {
    let mut rng = Rng::new(7, 0);
    let net = TwoBranchNet::new(tiny_config(), &mut rng).unwrap();
    let c = cond(1, 8, 8, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 4]));
    assert!(net.forward(&mut g, Bind::frozen(net.params()), x, &[1], &c).is_err());
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    assert!(net.forward(&mut g, Bind::frozen(net.params()), x, &[1, 2], &c).is_err());
}

fn loss_of(net: &TwoBranchNet, ps: &ParamSet, x: &Tensor, eps: &Tensor, c: &PatchCond) -> f64 {
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let y = net.forward(&mut g, Bind::frozen(ps), vx, &[7], c).unwrap();
    let ve = g.constant(eps.clone());
    let d = g.sub(ve, y).unwrap();
    let sq = g.mul(d, d).unwrap();
    let s = g.sum(sq);
    g.value(s).data()[0]
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(8, 0);
    let mut net = TwoBranchNet::new(tiny_config(), &mut rng).unwrap();
    randomize(net.params_mut(), 0.2, &mut rng);
    let c = cond(1, 8, 8, &mut rng);
    let x = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);
    let eps = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut rng);

    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let y = net.forward(&mut g, Bind::train(net.params()), vx, &[7], &c).unwrap();
    let ve = g.constant(eps.clone());
    let d = g.sub(ve, y).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let mut ps = net.params().clone();
    grads.accumulate_into(&mut ps);

    let h = 1e-5;
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let analytic = ps.get(id).grad().expect("every parameter receives a gradient").to_vec();
        let n = analytic.len();
        let picks: Vec<usize> = (0..n.min(6)).map(|_| rng.index(n)).collect();
        let mut a = Vec::new();
        let mut num = Vec::new();
        for &k in &picks {
            let mut p = ps.clone();
            p.get_mut(id).data_mut()[k] += h;
            let up = loss_of(&net, &p, &x, &eps, &c);
            p.get_mut(id).data_mut()[k] -= 2.0 * h;
            let down = loss_of(&net, &p, &x, &eps, &c);
            a.push(analytic[k]);
            num.push((up - down) / (2.0 * h));
        }
        let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale > 1e-9 {
            assert!(diff / scale < 1e-4, "{}: {a:?} vs {num:?}", ps.name(id));
        }
    }
}

#[test]
fn toy_net_shapes_and_condition_checks() {
    let mut rng = Rng::new(9, 0);
    let net = ToyNet1d::new(
        ToyNetConfig {
            cond_dim: 1,
            ..ToyNetConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 1]));
    let c = Tensor::zeros(&[3, 1]);
    let y = net.forward(&mut g, Bind::frozen(net.params()), x, &[1, 2, 3], Some(&c)).unwrap();
    assert_eq!(g.shape(y), &[3, 1]);
    assert!(net.forward(&mut g, Bind::frozen(net.params()), x, &[1, 2, 3], None).is_err());
}

#[test]
fn denoiser_starts_as_identity() {
    let mut rng = Rng::new(10, 0);
    let net = DenoiserNet::new(
        DenoiserConfig {
            channels: 2,
            base_channels: 4,
            depth: 2,
        },
        &mut rng,
    )
    .unwrap();
    let x = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = net.forward(&mut g, Bind::frozen(net.params()), v).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}
