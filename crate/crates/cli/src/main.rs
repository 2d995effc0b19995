mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frametwin::Error;

#[derive(Debug, Parser)]
#[command(name = "frametwin", version, about = "Digital twins of partially printed wireframes")]
struct Cli {
    /// TOML file with run settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, env = "FRAMETWIN_SEED")]
    seed: Option<u64>,

    /// Worker threads for per-view passes.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render target views of a deformed, partially printed model.
    GenScene(GenSceneArgs),
    /// Reconstruct the twin of a scene.
    Twin(TwinArgs),
    /// Simulate the adaptive printing loop over every batch of a plan.
    Adapt(AdaptArgs),
    /// Render curves or a planned model from one camera.
    Render(RenderArgs),
    /// Compare two curve sets.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Number of printed batches.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub t: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub views: Option<u64>,
    /// Deformation oracle, e.g. `sag:0.05` or `tip_bend:x,0.005`.
    #[arg(long, default_value = "none")]
    pub deform: String,
    /// Leave these printed edges out of the target images.
    #[arg(long, value_delimiter = ',')]
    pub missing_edges: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TwinArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub wbend: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// One oracle per batch, or a single oracle for all of them.
    #[arg(long, default_value = "none")]
    pub deform: Vec<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub views: Option<u64>,
    #[arg(long)]
    pub wbend: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["curves", "model"]))]
pub struct RenderArgs {
    /// Twin or ground-truth curve JSON.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Wireframe JSON; renders the planned geometry.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// With `--model`: restrict to the edges printed after `--t` batches.
    #[arg(long, requires = "model", requires = "t")]
    pub plan: Option<PathBuf>,
    #[arg(long, requires = "plan", value_parser = clap::value_parser!(u64).range(1..))]
    pub t: Option<u64>,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Curve JSON to evaluate.
    #[arg(long)]
    pub curves: PathBuf,
    /// Curve JSON to compare against.
    #[arg(long)]
    pub reference: PathBuf,
    /// Planned model for displacement metrics.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric(_) | Error::IllConditioned(_) | Error::DegenerateCurve(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let run = || -> frametwin::Result<()> {
        let mut cfg = config::Config::load(cli.config.as_deref())?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        match &cli.command {
            Command::GenScene(a) => commands::gen_scene(cfg, a),
            Command::Twin(a) => commands::twin(cfg, a),
            Command::Adapt(a) => commands::adapt(cfg, a),
            Command::Render(a) => commands::render(cfg, a),
            Command::Metrics(a) => commands::metrics(cfg, a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
