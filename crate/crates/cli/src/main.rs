use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maet_core::{Error, ExperimentConfig};

mod manifest;
mod stages;

#[derive(Parser, Debug)]
#[command(name = "maet", version, about = "Conductivity imaging from coil measurements of Lorentz-force currents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Conductivity phantom with a JSON sidecar.
    Phantom,
    /// Coil kernels C and G on the grid.
    CoilField,
    /// Adjoint currents for every coil.
    Forward,
    /// Synthetic traces for every coil and field direction.
    Measure,
    /// Stage 1: initial states from traces, assembled into W.
    InvertSource,
    /// Stage 2: current density from W.
    RecoverCurrent,
    /// Stage 3: conductivity from the recovered currents.
    RecoverSigma,
    /// Stability report for the reconstruction.
    Diagnose,
    /// All of the above in order.
    Pipeline,
    /// Prints the built-in reference configuration.
    ExampleConfig {
        #[arg(long, default_value_t = 24)]
        n: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotConverged { .. } | Error::NonFinite(_) | Error::PaddingTooSmall(_) => 3,
        Error::Io(_) | Error::Format { .. } | Error::Csv(_) => 4,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::ExampleConfig { n } = cli.command {
        println!("{}", serde_json::to_string_pretty(&ExperimentConfig::reference(n))?);
        return Ok(());
    }
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    // hash the effective config so a seed override shows up in manifests
    let hash = manifest::sha256_bytes(serde_json::to_string(&cfg)?.as_bytes());
    let ctx = stages::Context::new(cfg, hash, cli.out.clone())?;
    let m = match cli.command {
        Command::Phantom => stages::phantom(&ctx),
        Command::CoilField => stages::coil_field(&ctx),
        Command::Forward => stages::forward(&ctx),
        Command::Measure => stages::measure(&ctx),
        Command::InvertSource => stages::invert_source(&ctx),
        Command::RecoverCurrent => stages::recover_current(&ctx),
        Command::RecoverSigma => stages::recover_sigma(&ctx),
        Command::Diagnose => stages::diagnose(&ctx),
        Command::Pipeline => stages::pipeline(&ctx),
        Command::ExampleConfig { .. } => unreachable!("handled above"),
    }?;
    log::info!("{} finished in {:.2} s", m.stage, m.seconds);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NotAdmissible("x".into())), 2);
        let nc = Error::NotConverged {
            solver: "cg",
            iterations: 1,
            residual: 1.0,
        };
        assert_eq!(exit_code(&nc), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from(["maet", "measure", "--config", "c.json", "--seed", "3", "--threads", "1"]).unwrap();
        assert!(matches!(cli.command, Command::Measure));
        assert_eq!(cli.seed, Some(3));
    }
}
