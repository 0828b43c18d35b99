use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentswap_core::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use latentswap_core::pipeline::data::{toy_dataset, write_dataset, Dataset};
use latentswap_core::pipeline::evaluate::{evaluate, PairManifest};
use latentswap_core::pipeline::io::{load_frame_dir, load_image, load_landmarks, load_mask, save_frame_dir, save_image};
use latentswap_core::pipeline::models::swap_image;
use latentswap_core::pipeline::train::{pretrain_generator, train_iteration, TrainState};
use latentswap_core::pipeline::video_swap::swap_video;
use latentswap_core::pipeline::{run_self_test, Config, VideoMode};

#[derive(Parser, Debug)]
#[command(name = "latentswap", version, about = "Latent-space face swapping")]
struct Cli {
    /// Overrides the training seed from the config or checkpoint.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working resolution; must match the checkpoint when one is loaded.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Swap-trains the inverter and encoders on a dataset directory.
    Train(TrainArgs),
    /// Reconstruction-only fit of the generator, inverter and blend path.
    PretrainGenerator(TrainArgs),
    /// Swaps one source face onto one target.
    Swap(SwapArgs),
    /// Swaps a source face into every frame of a frame directory.
    SwapVideo(SwapVideoArgs),
    /// Writes identity, attribute and FID metrics for a list of pairs.
    Evaluate(EvaluateArgs),
    /// Runs the built-in invariant checks.
    SelfTest,
    /// Writes a synthetic dataset of toy faces.
    MakeToyData(ToyDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continues from a checkpoint; its stored config replaces `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    source_landmarks: PathBuf,
    #[arg(long)]
    target_landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also writes the generator's raw output before blending.
    #[arg(long)]
    side_output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Independent,
    Temporal,
}

#[derive(Args, Debug)]
struct SwapVideoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_landmarks: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    #[arg(long, value_enum, default_value = "independent")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    /// INI file whose `[video]` section replaces the checkpoint's video settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimates target landmarks when the frame directory has none.
    #[arg(long)]
    estimate_landmarks: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct ToyDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a, false),
        Command::PretrainGenerator(a) => train(cli, a, true),
        Command::Swap(a) => swap(cli, a),
        Command::SwapVideo(a) => video(cli, a),
        Command::Evaluate(a) => eval(cli, a),
        Command::SelfTest => self_test(),
        Command::MakeToyData(a) => {
            let res = cli.resolution.unwrap_or(64);
            let ds = toy_dataset(a.count, res, cli.seed.unwrap_or(0))?;
            write_dataset(&ds, &a.out)?;
            log::info!("wrote {} toy faces at {res}px to {}", a.count, a.out.display());
            Ok(())
        }
    }
}

fn load_state(cli: &Cli, path: &Path) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    check_resolution(cli, &state)?;
    Ok(state)
}

fn check_resolution(cli: &Cli, state: &TrainState) -> Result<()> {
    let have = state.models.resolution();
    match cli.resolution {
        Some(r) if r != have => bail!("--resolution {r} does not match the checkpoint's {have}px models"),
        _ => Ok(()),
    }
}

fn train(cli: &Cli, a: &TrainArgs, pretrain: bool) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_state(cli, path)?;
            if let Some(seed) = cli.seed {
                log::warn!("--seed {seed} ignored when resuming; the checkpoint carries its RNG state");
            }
            if a.config.is_some() {
                log::warn!("--config ignored when resuming");
            }
            s.config.train.iterations = a.iterations.unwrap_or(s.config.train.iterations);
            s
        }
        None => {
            let mut config = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            if let Some(seed) = cli.seed {
                config.train.seed = seed;
            }
            if let Some(r) = cli.resolution {
                config.model.resolution = r;
            }
            if let Some(n) = a.iterations {
                if pretrain {
                    config.train.pretrain_iterations = n;
                } else {
                    config.train.iterations = n;
                }
            }
            TrainState::new(config)?
        }
    };
    let res = state.models.resolution();
    let data = Dataset::load(&a.data, res).with_context(|| format!("loading dataset {}", a.data.display()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if pretrain {
        let n = a.iterations.unwrap_or(state.config.train.pretrain_iterations);
        let losses = pretrain_generator(&mut state, &data, n)?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            log::info!("pretraining: {n} steps, loss {first:.5} -> {last:.5}");
        }
    } else {
        let log_path = a.out.join("losses.jsonl");
        let mut losses = std::io::BufWriter::new(
            std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
        );
        let every = state.config.train.checkpoint_every;
        for _ in 0..state.config.train.iterations {
            let report = train_iteration(&mut state, &data)?;
            serde_json::to_writer(&mut losses, &report)?;
            writeln!(losses)?;
            if report.iteration % 50 == 0 {
                log::info!("iteration {}: total {:.5}", report.iteration, report.losses.total);
            }
            if every > 0 && report.iteration % every as u64 == 0 {
                save_checkpoint(&state, &a.out.join(format!("checkpoint_{:08}.ckpt", report.iteration)))?;
            }
        }
        losses.flush()?;
    }
    let path = a.out.join("checkpoint.ckpt");
    save_checkpoint(&state, &path)?;
    log::info!("saved {}", path.display());
    Ok(())
}

fn swap(cli: &Cli, a: &SwapArgs) -> Result<()> {
    let state = load_state(cli, &a.checkpoint)?;
    let m = &state.models;
    let (r, dt) = (m.resolution(), m.dtype());
    let x_s = load_image(&a.source, r, dt, &Device::Cpu)?;
    let x_t = load_image(&a.target, r, dt, &Device::Cpu)?;
    let mask = load_mask(&a.mask, r)?;
    let l_s = load_landmarks(&a.source_landmarks)?;
    let l_t = load_landmarks(&a.target_landmarks)?;
    let out = swap_image(m, &x_s, &x_t, &mask, &l_s, &l_t)?;
    save_image(&out.final_image, &a.out)?;
    if let Some(p) = &a.side_output {
        save_image(&out.side_output, p)?;
    }
    Ok(())
}

fn video(cli: &Cli, a: &SwapVideoArgs) -> Result<()> {
    let state = load_state(cli, &a.checkpoint)?;
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?.video,
        None => state.config.video.clone(),
    };
    cfg.mode = match a.mode {
        ModeArg::Independent => VideoMode::Independent,
        ModeArg::Temporal => VideoMode::Temporal,
    };
    let r = state.models.resolution();
    let x_s = load_image(&a.source, r, DType::F32, &Device::Cpu)?;
    let l_s = load_landmarks(&a.source_landmarks)?;
    let frames = load_frame_dir(&a.target_dir, r, DType::F32, &Device::Cpu)?;
    let out = swap_video(&state.models, &state.providers, &x_s, &l_s, &frames, &cfg, a.estimate_landmarks)?;
    if let (Some(first), Some(last)) = (out.objective.first(), out.objective.last()) {
        log::info!("temporal objective {first:.5} -> {last:.5} over {} steps", out.objective.len() - 1);
    }
    save_frame_dir(&out.frames, &a.out)?;
    Ok(())
}

fn eval(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let state = load_state(cli, &a.checkpoint)?;
    let manifest = PairManifest::load(&a.pairs)?;
    let report = evaluate(&state.models, &state.providers, &manifest)?;
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.report, text + "\n").with_context(|| format!("writing {}", a.report.display()))?;
    Ok(())
}

fn self_test() -> Result<()> {
    let results = run_self_test();
    let failed = results.iter().filter(|c| !c.passed).count();
    for c in &results {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
