use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdx_core::experiments::{
    run_evolve, run_manifold, run_shadow, run_spectrum, run_stationary, run_verify_all, Datum, Pipeline,
    RunConfig, RunOutcome,
};

#[derive(Parser)]
#[command(name = "fdx", version, about = "Relative-error dynamics near extinction for fast diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out_dir; artifacts go to <out>/<subcommand>/.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Lane–Emden profile V, grid and residual.
    Stationary(Common),
    /// Eigenpairs of L and the gap parameters at a cut.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Cut index K; defaults to spectrum.cut.
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Relative-error trajectory from a stable or unstable datum.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "stable")]
        datum: Datum,
        /// Use the truncated nonlinearity.
        #[arg(long)]
        truncated: bool,
    },
    /// Center-manifold samples θ(h_c).
    Manifold(Common),
    /// Shadow orbit on the center manifold for a generic small datum.
    Shadow(Common),
    /// Every acceptance criterion, one line each.
    VerifyAll(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Stationary(c) | Command::Manifold(c) | Command::Shadow(c) | Command::VerifyAll(c) => c,
            Command::Spectrum { common, .. } | Command::Evolve { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Stationary(_) => "stationary",
            Command::Spectrum { .. } => "spectrum",
            Command::Evolve { .. } => "evolve",
            Command::Manifold(_) => "manifold",
            Command::Shadow(_) => "shadow",
            Command::VerifyAll(_) => "verify-all",
        }
    }
}

fn load(common: &Common) -> fdx_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn run(cmd: &Command, cfg: &RunConfig) -> fdx_core::Result<RunOutcome> {
    let pipe = Pipeline::build(cfg)?;
    let dir = Path::new(&cfg.run.out_dir).join(cmd.name());
    match cmd {
        Command::Stationary(_) => run_stationary(&pipe, &dir),
        Command::Spectrum { k, .. } => run_spectrum(&pipe, *k, &dir),
        Command::Evolve { datum, truncated, .. } => run_evolve(&pipe, *datum, *truncated, &dir),
        Command::Manifold(_) => run_manifold(&pipe, &dir),
        Command::Shadow(_) => run_shadow(&pipe, &dir),
        Command::VerifyAll(_) => run_verify_all(&pipe, &dir, |r| println!("{r}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load(cli.command.common()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fdx: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(outcome) => {
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            for f in &outcome.failures {
                eprintln!("assertion failed: {f}");
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("fdx {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
    }
}
