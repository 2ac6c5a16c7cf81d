use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use noisegen_core::diffusion::Sampler;
use noisegen_core::experiments::{
    run_mmse, run_poisson1d, run_toy2d, run_tukey_lambda, ExperimentName, Toy1dConfig, Toy2dConfig, DEFAULT_TL_SIGMAS,
};
use noisegen_core::nets::DenoiserConfig;
use noisegen_core::physics::{coord_map, sample_camera_noise, CameraSetting, SyntheticCameraModel};
use noisegen_core::pipeline::{
    evaluate_denoiser, generate_pairs, load_denoiser, load_model, load_nst, plan_tiles, read_pairs, save_denoiser,
    save_model, save_nst, train_on_pairs, train_toy_denoiser, DenoiserTrainConfig, DiffusionGenerator,
    DiffusionTrainSpec, NoiseGenerator, NstKind, NstMeta, PairOptions, PhysicsGenerator, SavedModel,
};
use noisegen_core::schedule::{Schedule, ScheduleKind};
use noisegen_core::stats::NoiseStatsReport;
use noisegen_core::{Rng, Tensor};

/// Low-light noise synthesis toolkit.
#[derive(Parser, Debug)]
#[command(name = "noisegen", version, about)]
struct Cli {
    /// Master RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Noise schedule tables.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Ground-truth camera noise.
    #[command(subcommand)]
    Physics(PhysicsCmd),
    /// Two-branch diffusion noise model.
    #[command(subcommand)]
    Diffusion(DiffusionCmd),
    /// MMSE variance-shrinkage check.
    #[command(subcommand)]
    Mmse(MmseCmd),
    /// Noise statistics.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Clean/noisy pair archives.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Toy denoiser.
    #[command(subcommand)]
    Denoise(DenoiseCmd),
    /// Study runners.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand, Debug)]
enum ScheduleCmd {
    /// Writes `t,beta,alpha_bar,c_t` as CSV.
    Dump {
        #[arg(long, default_value = "sigmoid2")]
        kind: ScheduleKind,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct SettingArgs {
    #[arg(long)]
    iso: u32,
    #[arg(long)]
    ratio: f64,
}

impl SettingArgs {
    fn setting(&self) -> Result<CameraSetting> {
        Ok(CameraSetting::new(self.iso, self.ratio)?)
    }
}

#[derive(Subcommand, Debug)]
enum PhysicsCmd {
    /// Draws one noisy capture of a clean `[C, H, W]` image into `--out`.
    Sample {
        /// Camera model JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[command(flatten)]
        setting: SettingArgs,
        /// Absolute `row,col` of the image's top-left pixel.
        #[arg(long, default_value = "0,0", value_parser = parse_origin)]
        origin: (usize, usize),
    },
}

#[derive(Subcommand, Debug)]
enum DiffusionCmd {
    /// Trains on the pre-clip noise of a pair archive.
    Train {
        /// Training spec JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Generates noise for one clean `[C, H, W]` image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        /// `auto` uses coordinates from `--origin`; `zero` feeds a zero map.
        #[arg(long, default_value = "auto")]
        coords: CoordsMode,
        #[arg(long, default_value = "0,0", value_parser = parse_origin)]
        origin: (usize, usize),
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long, default_value = "ddpm")]
        sampler: Sampler,
        /// DDIM steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CoordsMode {
    Auto,
    Zero,
}

#[derive(Subcommand, Debug)]
enum MmseCmd {
    /// Monte-Carlo check over the (σ₂, σ₁) grid plus a two-component mixture.
    Verify {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
}

#[derive(Subcommand, Debug)]
enum StatsCmd {
    /// KLD, std ratio and per-level curves of generated vs real noise.
    Compare {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        black: f64,
        #[arg(long, default_value_t = 1.0)]
        white: f64,
    },
}

#[derive(Subcommand, Debug)]
enum PairsCmd {
    /// Tiles clean images and pairs every tile with generated noise.
    Generate {
        /// Clean `[C, H, W]` NST images.
        #[arg(long, required = true, num_args = 1..)]
        clean: Vec<PathBuf>,
        /// Camera model JSON (physics oracle).
        #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
        config: Option<PathBuf>,
        /// Diffusion checkpoint used instead of the oracle.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Camera settings as `iso:ratio`.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',', value_parser = parse_setting)]
        settings: Vec<CameraSetting>,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 0.25)]
        overlap: f64,
        #[arg(long, default_value = "ddim")]
        sampler: Sampler,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
    },
}

#[derive(Subcommand, Debug)]
enum DenoiseCmd {
    /// Trains the toy denoiser on a pair archive.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Scores a denoiser on a pair archive.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum ExperimentCmd {
    /// Runs a named study and writes `summary.json` plus CSVs into `--out`.
    Run {
        name: ExperimentName,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_origin(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(r)?, num(c)?))
}

fn parse_setting(s: &str) -> Result<CameraSetting, String> {
    let (iso, ratio) = s.split_once(':').ok_or_else(|| format!("expected iso:ratio, got {s:?}"))?;
    let iso = iso.trim().parse().map_err(|e| format!("{iso:?}: {e}"))?;
    let ratio = ratio.trim().parse().map_err(|e| format!("{ratio:?}: {e}"))?;
    CameraSetting::new(iso, ratio).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(noisegen_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Writes `text` to `out`, or prints it when no path was given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    match out {
        Some(p) => Ok(p),
        None => Err(noisegen_core::Error::Config("this command needs --out".into()).into()),
    }
}

fn load_image(path: &Path) -> Result<Tensor> {
    let (t, _) = load_nst(path).with_context(|| format!("loading {}", path.display()))?;
    if t.shape().len() != 3 {
        bail!(noisegen_core::Error::InvalidArgument(format!(
            "{} must hold a [C, H, W] image, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = cli.out.as_deref();
    let rng = Rng::new(cli.seed, 0);
    match cli.command {
        Command::Schedule(ScheduleCmd::Dump { kind, steps }) => emit(out, &Schedule::build(kind, steps)?.to_csv()),
        Command::Physics(PhysicsCmd::Sample {
            config,
            clean,
            setting,
            origin,
        }) => {
            let camera: SyntheticCameraModel = read_json(&config)?;
            let setting = setting.setting()?;
            let x = load_image(&clean)?;
            let coords = coord_map(origin, x.shape()[1], x.shape()[2]);
            let sample = sample_camera_noise(&x, &setting, &camera, &coords, &mut rng.substream(0))?;
            let dir = require_out(out)?;
            fs::create_dir_all(dir)?;
            for (name, t, kind) in [
                ("clean.nst", &x, NstKind::Clean),
                ("noisy.nst", &sample.noisy, NstKind::Noisy),
                ("noise.nst", &sample.noise, NstKind::Noise),
            ] {
                let meta = NstMeta {
                    iso: Some(setting.iso),
                    exposure_ratio: Some(setting.exposure_ratio),
                    black_level: camera.black_level,
                    white_level: camera.white_level,
                    kind,
                };
                save_nst(&dir.join(name), t, Some(&meta))?;
            }
            Ok(())
        }
        Command::Diffusion(DiffusionCmd::Train { config, data, ckpt }) => {
            let spec: DiffusionTrainSpec = read_json_or_default(config.as_deref())?;
            let (manifest, pairs) = read_pairs(&data).with_context(|| format!("reading archive {}", data.display()))?;
            let sensor = (manifest.plan.height, manifest.plan.width);
            let (model, losses) = train_on_pairs(&spec, &manifest, &pairs, &mut rng.substream(0))?;
            save_model(&ckpt, &SavedModel::TwoBranch { model, sensor })?;
            if let Some(p) = out {
                let csv: String = std::iter::once("step,loss\n".to_string())
                    .chain(losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
                    .collect();
                fs::write(p, csv)?;
            }
            eprintln!("final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Diffusion(DiffusionCmd::Sample {
            ckpt,
            clean,
            coords,
            origin,
            setting,
            sampler,
            steps,
            eta,
        }) => {
            let SavedModel::TwoBranch { model, sensor } = load_model(&ckpt)? else {
                bail!(noisegen_core::Error::Config(format!(
                    "{} is not a two-branch checkpoint",
                    ckpt.display()
                )));
            };
            let x = load_image(&clean)?;
            let setting = setting.setting()?;
            let mut gen = DiffusionGenerator::new(model, sensor);
            gen.sampler = sampler;
            gen.steps = steps;
            gen.eta = eta;
            gen.zero_coords = coords == CoordsMode::Zero;
            let abs = coord_map(origin, x.shape()[1], x.shape()[2]);
            let noise = gen
                .generate(std::slice::from_ref(&x), &[abs], &[setting], &mut rng.substream(0))?
                .remove(0);
            let meta = NstMeta {
                iso: Some(setting.iso),
                exposure_ratio: Some(setting.exposure_ratio),
                black_level: 0.0,
                white_level: 1.0,
                kind: NstKind::Noise,
            };
            save_nst(require_out(out)?, &noise, Some(&meta))?;
            Ok(())
        }
        Command::Mmse(MmseCmd::Verify { samples }) => {
            let study = run_mmse(&[0.5, 1.0, 2.0], &[0.0, 0.5, 1.0, 2.0], samples, &rng)?;
            let summary = serde_json::json!({
                "max_gaussian_rel_err": study.max_gaussian_rel_err(),
                "max_gmm_rel_err": study.max_gmm_rel_err(),
                "gaussian": study.gaussian,
                "gmm": study.gmm,
            });
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&summary)?))
        }
        Command::Stats(StatsCmd::Compare {
            real,
            generated,
            clean,
            black,
            white,
        }) => {
            let (r, _) = load_nst(&real)?;
            let (g, _) = load_nst(&generated)?;
            let (c, _) = load_nst(&clean)?;
            let report = NoiseStatsReport::compare(c.data(), r.data(), g.data(), black, white)?;
            println!("{}", serde_json::json!({ "kld": report.kld, "std_ratio": report.std_ratio }));
            if let Some(p) = out {
                fs::write(p, report.curves_csv())?;
            }
            Ok(())
        }
        Command::Pairs(PairsCmd::Generate {
            clean,
            config,
            ckpt,
            settings,
            patch,
            overlap,
            sampler,
            steps,
            eta,
        }) => {
            let images = clean.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
            let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
            if images.iter().any(|t| t.shape()[1..] != [h, w]) {
                bail!(noisegen_core::Error::InvalidArgument("clean images differ in size".into()));
            }
            let plan = plan_tiles(h, w, patch, overlap)?;
            let (generator, black, white): (Box<dyn NoiseGenerator>, f64, f64) = match (config, ckpt) {
                (Some(cfg), _) => {
                    let camera: SyntheticCameraModel = read_json(&cfg)?;
                    let (b, wl) = (camera.black_level, camera.white_level);
                    (Box::new(PhysicsGenerator::new(camera)), b, wl)
                }
                (None, Some(ck)) => {
                    let SavedModel::TwoBranch { model, sensor } = load_model(&ck)? else {
                        bail!(noisegen_core::Error::Config(format!("{} is not a two-branch checkpoint", ck.display())));
                    };
                    let mut g = DiffusionGenerator::new(model, sensor);
                    g.sampler = sampler;
                    g.steps = steps;
                    g.eta = eta;
                    (Box::new(g), 0.0, 1.0)
                }
                (None, None) => unreachable!("clap requires one generator"),
            };
            let opts = PairOptions {
                black_level: black,
                white_level: white,
                batch: 8,
            };
            let pairs = generate_pairs(generator.as_ref(), &images, &settings, &plan, opts, &rng)?;
            let manifest = noisegen_core::pipeline::write_pairs(require_out(out)?, &pairs, &plan, black, white)?;
            eprintln!("wrote {} pairs", manifest.entries.len());
            Ok(())
        }
        Command::Denoise(DenoiseCmd::Train { pairs, config, ckpt }) => {
            let (_, archive) = read_pairs(&pairs)?;
            let Some(first) = archive.first() else {
                bail!(noisegen_core::Error::InvalidArgument(format!("{} holds no pairs", pairs.display())));
            };
            let mut cfg: DenoiserTrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => DenoiserTrainConfig {
                    net: DenoiserConfig {
                        channels: 0,
                        base_channels: 8,
                        depth: 2,
                    },
                    steps: 500,
                    batch: 8,
                    lr: 2e-3,
                    lr_end: 1e-4,
                },
            };
            cfg.net.channels = first.clean.shape()[0];
            let data: Vec<(Tensor, Tensor)> = archive.into_iter().map(|p| (p.clean, p.noisy)).collect();
            let (net, losses) = train_toy_denoiser(&data, &cfg, &mut rng.substream(0))?;
            save_denoiser(&ckpt, &net)?;
            eprintln!("final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Denoise(DenoiseCmd::Eval { ckpt, pairs }) => {
            let net = load_denoiser(&ckpt)?;
            let (manifest, archive) = read_pairs(&pairs)?;
            let data: Vec<(Tensor, Tensor)> = archive.into_iter().map(|p| (p.clean, p.noisy)).collect();
            let m = evaluate_denoiser(&net, &data, manifest.white_level - manifest.black_level)?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&m)?))
        }
        Command::Experiment(ExperimentCmd::Run { name, config }) => run_experiment(name, config.as_deref(), out, &rng),
    }
}

fn run_experiment(name: ExperimentName, config: Option<&Path>, out: Option<&Path>, rng: &Rng) -> Result<()> {
    let dir = require_out(out)?;
    fs::create_dir_all(dir)?;
    match name {
        ExperimentName::Poisson1d => {
            let cfg: Toy1dConfig = read_json_or_default(config)?;
            let report = run_poisson1d(&ScheduleKind::ALL[..4], &cfg, rng)?;
            fs::write(dir.join("curves.csv"), report.curves_csv())?;
            write_json(&dir.join("summary.json"), &report)
        }
        ExperimentName::TukeyLambda => {
            let cfg: Toy1dConfig = read_json_or_default(config)?;
            let report = run_tukey_lambda(&DEFAULT_TL_SIGMAS, &ScheduleKind::ALL[..4], &cfg, rng)?;
            fs::write(dir.join("ratios.csv"), report.to_csv())?;
            write_json(&dir.join("summary.json"), &report)
        }
        ExperimentName::Toy2d => {
            let cfg: Toy2dConfig = read_json_or_default(config)?;
            let report = run_toy2d(&cfg, rng)?;
            fs::write(dir.join("metrics.csv"), report.to_csv())?;
            write_json(&dir.join("summary.json"), &report)
        }
        ExperimentName::Mmse => {
            let study = run_mmse(&[0.5, 1.0, 2.0], &[0.0, 0.5, 1.0, 2.0], 1_000_000, rng)?;
            fs::write(dir.join("grid.csv"), study.to_csv())?;
            write_json(&dir.join("summary.json"), &study)
        }
        ExperimentName::ScheduleDump => {
            let steps = match config {
                Some(p) => read_json::<serde_json::Value>(p)?
                    .get("steps")
                    .and_then(|v| v.as_u64())
                    .map_or(1000, |v| v as usize),
                None => 1000,
            };
            let mut csv = String::from("schedule,t,beta,alpha_bar,c_t\n");
            for kind in ScheduleKind::ALL {
                let s = Schedule::build(kind, steps)?;
                for (t, beta, ab, c) in s.rows() {
                    csv.push_str(&format!("{kind},{t},{beta:e},{ab:e},{c:e}\n"));
                }
            }
            fs::write(dir.join("schedules.csv"), csv)?;
            write_json(&dir.join("summary.json"), &serde_json::json!({ "steps": steps }))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<noisegen_core::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
