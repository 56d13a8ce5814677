use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use slam_core::cloud::ply;
use slam_core::dataio::{generate_synthetic, read_tum_sequence, write_synthetic, SyntheticSceneSpec};
use slam_core::geometry::{ate_rmse, Trajectory};
use slam_core::pipeline::{run, write_outputs, Mode, PipelineConfig};

#[derive(Parser)]
#[command(name = "slam", version, about = "Submap RGB-D SLAM with robust loop closure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetFormat {
    /// TUM RGB-D layout.
    Tum,
    /// TUM layout written by `synth`, with `gt_surface.ply`.
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Backend,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::Backend => Mode::Backend,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a sequence and write its outputs.
    Run {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "tum")]
        format: DatasetFormat,
        /// Key/value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aligned absolute trajectory error between two TUM trajectories.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Skip the rigid alignment before measuring.
        #[arg(long)]
        no_align: bool,
    },
    /// Generate a synthetic sequence.
    Synth {
        /// Key/value scene file; `preset = harness` selects the loop harness.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            mode,
            dataset,
            format,
            config,
            out,
            seed,
        } => run_command(mode, &dataset, format, config.as_deref(), &out, seed),
        Command::Eval { est, gt, no_align } => {
            let est = Trajectory::load(&est).with_context(|| format!("reading {}", est.display()))?;
            let gt = Trajectory::load(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let ate = ate_rmse(&est, &gt, !no_align)?;
            println!("{}", serde_json::json!({ "ate_rmse_m": ate }));
            Ok(())
        }
        Command::Synth { spec, out, seed } => {
            let spec = match spec {
                Some(path) => SyntheticSceneSpec::load(&path).with_context(|| format!("reading {}", path.display()))?,
                None => SyntheticSceneSpec::default(),
            };
            let synth = generate_synthetic(&spec, seed)?;
            write_synthetic(&out, &synth)?;
            log::info!("wrote {} frames to {}", synth.sequence.frames.len(), out.display());
            Ok(())
        }
    }
}

fn run_command(
    mode: Option<ModeArg>,
    dataset: &Path,
    format: DatasetFormat,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let seq = read_tum_sequence(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    if seq.dropped > 0 {
        log::warn!("{} frames had no association and were dropped", seq.dropped);
    }
    let gt_surface = match format {
        DatasetFormat::Tum => None,
        DatasetFormat::Synth => Some(ply::load_point_cloud(dataset.join("gt_surface.ply"))?),
    };
    let result = run(&cfg, &seq, gt_surface.as_ref())?;
    write_outputs(out, &result)?;
    println!("{}", serde_json::to_string(&result.metrics)?);
    Ok(())
}
