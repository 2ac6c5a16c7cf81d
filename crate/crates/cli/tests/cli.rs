use std::path::Path;
use std::process::{Command, Output};

use noisegen_core::experiments::toy_camera;
use noisegen_core::pipeline::{load_nst, save_nst};
use noisegen_core::{Rng, Tensor};

fn noisegen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisegen"))
        .args(args)
        .output()
        .expect("failed to launch noisegen")
}

fn ok(args: &[&str]) -> Output {
    let out = noisegen(args);
    assert!(
        out.status.success(),
        "noisegen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scene(path: &Path, seed: u64) {
    let mut rng = Rng::new(seed, 0);
    let img = noisegen_core::experiments::synthetic_scene(2, (32, 32), &mut rng);
    save_nst(path, &img, None).unwrap();
}

#[test]
fn schedule_dump_prints_a_table() {
    let out = ok(&["schedule", "dump", "--kind", "linear", "--steps", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,"));
    assert_eq!(lines.count(), 11);
}

#[test]
fn unknown_experiment_lists_the_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = noisegen(&["experiment", "run", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["poisson1d", "tukey_lambda", "toy2d", "mmse", "schedule_dump"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.nst");
    write_scene(&clean, 1);
    let missing = dir.path().join("missing.json");
    let out = noisegen(&[
        "physics", "sample", "--config", s(&missing), "--clean", s(&clean), "--iso", "800", "--ratio", "100",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = noisegen(&[
        "physics", "sample", "--config", s(&bad), "--clean", s(&clean), "--iso", "800", "--ratio", "100",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn physics_sample_writes_a_consistent_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cam = dir.path().join("cam.json");
    std::fs::write(&cam, serde_json::to_string(&toy_camera(32)).unwrap()).unwrap();
    let clean = dir.path().join("clean.nst");
    write_scene(&clean, 2);
    let pair = dir.path().join("pair");
    let args = [
        "physics", "sample", "--config", s(&cam), "--clean", s(&clean), "--iso", "3200", "--ratio", "300", "--seed",
        "7", "--out", s(&pair),
    ];
    ok(&args);
    let (x, _) = load_nst(&pair.join("clean.nst")).unwrap();
    let (n, meta) = load_nst(&pair.join("noise.nst")).unwrap();
    let (y, _) = load_nst(&pair.join("noisy.nst")).unwrap();
    assert_eq!(meta.unwrap().iso, Some(3200));
    for ((a, b), c) in x.data().iter().zip(n.data()).zip(y.data()) {
        assert!(((a + b).clamp(0.0, 1.0) - c).abs() < 1e-5);
    }
    let again = dir.path().join("again");
    let mut args2 = args;
    args2[13] = s(&again);
    ok(&args2);
    let (n2, _) = load_nst(&again.join("noise.nst")).unwrap();
    assert_eq!(n.data(), n2.data());
}

#[test]
fn mmse_verify_reports_small_errors() {
    let out = ok(&["mmse", "verify", "--samples", "200000", "--seed", "3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_gaussian_rel_err"].as_f64().unwrap() < 0.02, "{v}");
}

#[test]
fn archive_train_sample_and_denoise_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("cam.json"), serde_json::to_string(&toy_camera(32)).unwrap()).unwrap();
    write_scene(&p("a.nst"), 4);
    write_scene(&p("b.nst"), 5);

    ok(&[
        "pairs", "generate", "--clean", s(&p("a.nst")), s(&p("b.nst")), "--config", s(&p("cam.json")), "--settings",
        "800:100,6400:300", "--patch", "16", "--overlap", "0", "--out", s(&p("archive")),
    ]);
    assert!(p("archive").join("manifest.json").exists());

    std::fs::write(
        p("spec.json"),
        r#"{"diffusion_steps": 16, "base_channels": 4, "depth": 1, "mlp_hidden": 8,
            "train": {"steps": 4, "batch": 2, "lr": 1e-3, "lr_end": 1e-4}, "min_pairs_per_setting": 4}"#,
    )
    .unwrap();
    ok(&[
        "diffusion", "train", "--config", s(&p("spec.json")), "--data", s(&p("archive")), "--ckpt", s(&p("m.ndck")),
    ]);

    let sample = |sampler: &str, out: &Path| {
        ok(&[
            "diffusion", "sample", "--ckpt", s(&p("m.ndck")), "--clean", s(&p("a.nst")), "--coords", "auto", "--iso",
            "6400", "--ratio", "300", "--sampler", sampler, "--steps", "4", "--seed", "9", "--out", s(out),
        ]);
        load_nst(out).unwrap().0
    };
    let ddpm = sample("ddpm", &p("ddpm.nst"));
    let ddim = sample("ddim", &p("ddim.nst"));
    assert_eq!(ddpm.shape(), [2, 32, 32]);
    assert!(ddim.data().iter().all(|v| v.is_finite()));

    let out = noisegen(&[
        "diffusion", "sample", "--ckpt", s(&p("m.ndck")), "--clean", s(&p("a.nst")), "--iso", "1600", "--ratio",
        "100", "--out", s(&p("x.nst")),
    ]);
    assert_eq!(out.status.code(), Some(2), "unregistered setting must be rejected");

    let real = p("archive").join(
        std::fs::read_dir(p("archive"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .find(|n| n.ends_with("noise.nst"))
            .unwrap(),
    );
    let (real_t, _) = load_nst(&real).unwrap();
    let patch = Tensor::from_fn(real_t.shape(), |i| ddpm.data()[i]);
    save_nst(&p("gen.nst"), &patch, None).unwrap();
    let clean_patch = Tensor::full(real_t.shape(), 0.5);
    save_nst(&p("cp.nst"), &clean_patch, None).unwrap();
    let out = ok(&[
        "stats", "compare", "--real", s(&real), "--generated", s(&p("gen.nst")), "--clean", s(&p("cp.nst")), "--out",
        s(&p("curves.csv")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["kld"].as_f64().unwrap() >= 0.0);
    assert!(std::fs::read_to_string(p("curves.csv")).unwrap().starts_with("level,"));

    ok(&["denoise", "train", "--pairs", s(&p("archive")), "--ckpt", s(&p("d.ndck"))]);
    let out = ok(&["denoise", "eval", "--ckpt", s(&p("d.ndck")), "--pairs", s(&p("archive"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["psnr"].as_f64().unwrap().is_finite());
}

#[test]
fn schedule_dump_experiment_writes_every_schedule() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["experiment", "run", "schedule_dump", "--out", s(dir.path())]);
    let csv = std::fs::read_to_string(dir.path().join("schedules.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 1001);
}
