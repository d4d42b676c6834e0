use clap::{Args, Parser, Subcommand};
use placekit::cli;
use placekit::config::Config;
use placekit::error::{Error, Result};
use placekit::placement::SamplerKind;

use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "placekit", version, about = "Scene-aware 3D placement augmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker count (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the density range, as LO:HI.
    #[arg(long, value_parser = parse_density)]
    density: Option<(usize, usize)>,
    /// Override the sampler.
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BEV placement prior from the ground-truth corpus.
    BuildPrior(CommonArgs),
    /// Sample placements per scene without compositing.
    Sample(CommonArgs),
    /// Generate one augmented (image, label, sidecar) triple per scene.
    Augment(CommonArgs),
    /// Score a box corpus: road overlap and orientation KL vs ground truth.
    Metrics {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of label files to score; defaults to the GT labels dir.
        #[arg(long)]
        boxes_dir: Option<PathBuf>,
    },
    /// Render the BEV heatmap from an existing prior file.
    Heatmap {
        #[command(flatten)]
        common: CommonArgs,
        /// Output PGM path; defaults to <out_dir>/heatmap.pgm.
        #[arg(long)]
        out_path: Option<PathBuf>,
    },
    /// Generate the synthetic straight-road fixture corpus.
    #[command(hide = true)]
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.35)]
        road_fraction: f64,
    },
}

fn parse_density(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let lo = lo.parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi = hi.parse().map_err(|e| format!("bad HI: {e}"))?;
    if lo > hi {
        return Err(format!("density {lo}:{hi} has lo > hi"));
    }
    Ok((lo, hi))
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    match s {
        "prior" => Ok(SamplerKind::Prior),
        "rbp" => Ok(SamplerKind::Rbp),
        "preset" => Ok(SamplerKind::Preset),
        other => Err(format!("unknown sampler {other:?} (prior|rbp|preset)")),
    }
}

fn resolve_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(density) = common.density {
        cfg.density = density;
    }
    if let Some(sampler) = common.sampler {
        cfg.sampler = sampler;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::BuildPrior(common) => {
            let cfg = resolve_config(common)?;
            let report = cli::cmd_build_prior(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sample(common) => {
            let cfg = resolve_config(common)?;
            let summary = cli::cmd_sample(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Augment(common) => {
            let cfg = resolve_config(common)?;
            let summary = cli::cmd_augment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Metrics { common, boxes_dir } => {
            let cfg = resolve_config(common)?;
            let boxes = boxes_dir.clone().unwrap_or_else(|| cfg.labels_dir.clone());
            let summary = cli::cmd_metrics(&cfg, &boxes)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Heatmap { common, out_path } => {
            let cfg = resolve_config(common)?;
            let out = out_path
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("heatmap.pgm"));
            cli::cmd_heatmap(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GenFixture {
            out,
            scenes,
            seed,
            road_fraction,
        } => {
            let report = cli::cmd_gen_fixture(out, *scenes, *seed, *road_fraction)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PLACEKIT_LOG")).init();
    let cli = Cli::parse();
    if let Err(err) = run(&cli.command) {
        eprintln!("error: {err}");
        let code = match &err {
            Error::Config(_) => err.exit_code(),
            Error::Parse { .. } => err.exit_code(),
            Error::Io { .. } => err.exit_code(),
            _ => err.exit_code(),
        };
        std::process::exit(code);
    }
}
