//! Command-line front end: training, denoising, evaluation, noise synthesis
//! and debug renders.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mambapf::geometry::{add_gaussian_noise, normalize_to_unit, NoiseReference, NoiseSpec};
use mambapf::io::{
    format_loss_rows, load_cloud, load_mesh, save_cloud, view_file_name, write_pgm, CloudFormat, MeshFormat,
    MetricReport,
};
use mambapf::metrics::{chamfer_distance, point_to_mesh};
use mambapf::render::render_views;
use mambapf::train::train;
use mambapf::{Error, Model, PointCloud, RunConfig};

const SEED_ENV: &str = "MAMBAPF_SEED";

#[derive(Parser)]
#[command(name = "mambapf", version, about = "Iterative point-cloud denoising")]
struct Cli {
    /// Worker threads for patches and views; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Overrides the seed. Falls back to the config, then MAMBAPF_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Trains a model on clean clouds and writes a checkpoint and loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV); defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Clean training clouds (.xyz or .ply).
        #[arg(required = true)]
        clouds: Vec<PathBuf>,
    },
    /// Denoises a cloud with a trained checkpoint.
    Denoise {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// Output path; written in the input's format.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Prints Chamfer distance, and point-to-mesh terms when a mesh is given.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Ground-truth surface (.obj or .off).
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Adds isotropic Gaussian noise to a cloud.
    SynthNoise {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Noise standard deviation as a fraction of the reference length.
        #[arg(long)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = Reference::Sphere)]
        reference: Reference,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes the rendered views of a cloud as PGM images.
    RenderDebug {
        #[command(flatten)]
        config: ConfigArgs,
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    /// Bounding-sphere radius.
    Sphere,
    /// Bounding-box diagonal.
    Bbox,
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

/// Applies the file, then `--set` pairs, then `--seed` on top of `base`.
/// The environment seed applies only when neither the file nor the flags
/// set one.
fn resolve_config(base: RunConfig, args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base;
    let mut seed_given = false;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(Error::from).with_context(|| path.display().to_string())?;
        seed_given |= text_sets_seed(&text);
        cfg.apply_text(&text).with_context(|| path.display().to_string())?;
    }
    for pair in &args.sets {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        seed_given |= k.trim() == "seed";
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    } else if !seed_given {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn text_sets_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "seed")
}

fn read_cloud(path: &Path) -> anyhow::Result<PointCloud> {
    let format = CloudFormat::from_path(path)?;
    load_cloud(path, format).with_context(|| path.display().to_string())
}

fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_stem().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

fn cmd_train(config: &ConfigArgs, out: &Path, log: Option<&Path>, paths: &[PathBuf]) -> anyhow::Result<()> {
    let cfg = resolve_config(RunConfig::default(), config)?;
    let clouds = paths.iter().map(|p| read_cloud(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut model = Model::init(&cfg)?;
    let rows = match train(&mut model, &clouds, |s| {
        if s.step == 1 || s.step == s.total_steps || s.step % 10 == 0 {
            eprintln!("step {}/{} loss {:.6e} grad_norm {:.3e}", s.step, s.total_steps, s.loss, s.grad_norm);
        }
    }) {
        Ok(rows) => rows,
        Err(e @ Error::Numeric(_)) => {
            let mut dump = out.as_os_str().to_os_string();
            dump.push(".diverged");
            let dump = PathBuf::from(dump);
            model.save(&dump)?;
            return Err(anyhow!(e).context(format!("parameters at abort written to {}", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    model.save(out)?;
    let log = log.map(Path::to_path_buf).unwrap_or_else(|| default_log_path(out));
    fs::write(&log, format_loss_rows(&rows)).map_err(Error::from)?;
    println!("checkpoint\t{}", out.display());
    println!("loss_log\t{}", log.display());
    Ok(())
}

fn cmd_denoise(config: &ConfigArgs, checkpoint: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let model = Model::load(checkpoint)?;
    let cfg = resolve_config(model.config.clone(), config)?;
    let model = model.with_config(&cfg)?;
    let format = CloudFormat::from_path(input)?;
    let noisy = read_cloud(input)?;
    let denoised = model.denoise(&noisy)?;
    save_cloud(output, &denoised, format)?;
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, mesh: Option<&Path>) -> anyhow::Result<()> {
    let p = read_cloud(pred)?;
    let g = read_cloud(gt)?;
    let chamfer = chamfer_distance(&p, &g)?;
    let p2m = match mesh {
        Some(path) => {
            let m = load_mesh(path, MeshFormat::from_path(path)?).with_context(|| path.display().to_string())?;
            Some(point_to_mesh(&p, &m)?)
        }
        None => None,
    };
    print!("{}", MetricReport { chamfer, p2m }.to_text());
    Ok(())
}

fn cmd_synth_noise(input: &Path, output: &Path, sigma: f64, reference: Reference, seed: Option<u64>) -> anyhow::Result<()> {
    let format = CloudFormat::from_path(input)?;
    let clean = read_cloud(input)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = NoiseSpec {
        sigma_fraction: sigma,
        reference: match reference {
            Reference::Sphere => NoiseReference::BoundingSphereRadius,
            Reference::Bbox => NoiseReference::BboxDiagonal,
        },
        seed,
    };
    save_cloud(output, &add_gaussian_noise(&clean, &spec)?, format)?;
    Ok(())
}

fn cmd_render_debug(config: &ConfigArgs, input: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let cfg = resolve_config(RunConfig::default(), config)?;
    let (unit, _) = normalize_to_unit(&read_cloud(input)?)?;
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    for (i, view) in render_views(&unit, &cfg.render_config())?.iter().enumerate() {
        let path = out_dir.join(view_file_name(i));
        write_pgm(&path, &view.image, view.camera.height, view.camera.width)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Train {
            config,
            out,
            log,
            clouds,
        } => cmd_train(config, out, log.as_deref(), clouds),
        Command::Denoise {
            config,
            checkpoint,
            input,
            output,
        } => cmd_denoise(config, checkpoint, input, output),
        Command::Eval { pred, gt, mesh } => cmd_eval(pred, gt, mesh.as_deref()),
        Command::SynthNoise {
            input,
            output,
            sigma,
            reference,
            seed,
        } => cmd_synth_noise(input, output, *sigma, *reference, *seed),
        Command::RenderDebug {
            config,
            input,
            out_dir,
        } => cmd_render_debug(config, input, out_dir),
    }
}

/// Short code of the first library error in the chain.
fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or("E_INTERNAL", Error::code)
}

/// The error chain on one line, down to the first library error (whose
/// message already names its cause).
fn one_line(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for c in e.chain() {
        parts.push(c.to_string());
        if c.is::<Error>() {
            break;
        }
    }
    let text = parts.join(": ");
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", error_code(&e), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
