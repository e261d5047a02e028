use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ScenarioConfig, DEFAULT_TOML};
use crate::error::CliError;
use crate::output::{write_bundle, write_failure_manifest, Bundle};
use crate::scenarios::{self, LoadMcOptions};

#[derive(Debug, Parser)]
#[command(name = "tweezer", version, about = "Continuous tweezer-loading simulations and figure recipes")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// TOML configuration; the shipped defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; all available cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cavity figures of merit, residual lattice contrast and sidebands.
    Cavity,
    /// Reservoir loading curves per duty cycle and the extraction depletion.
    Reservoir,
    /// Monte Carlo tweezer loading curves and the capture probability map.
    LoadMc(LoadMcArgs),
    /// Preparation / readout cycle simulation.
    Pipeline(PipelineArgs),
    /// Fit a model to an x,y[,sigma] CSV.
    Fit(FitArgs),
    /// Run one named figure recipe.
    RunScenario {
        name: String,
    },
    /// Check a configuration and report every violation.
    ValidateConfig {
        /// Defaults to --config, then the shipped defaults.
        path: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct LoadMcArgs {
    /// Reservoir density, atoms/cm^3.
    #[arg(long)]
    pub density: Option<f64>,
    /// Use the steady-state density at this molasses duty cycle.
    #[arg(long, conflicts_with = "density")]
    pub duty: Option<f64>,
    /// Array side length (side x side tweezers).
    #[arg(long)]
    pub side: Option<usize>,
    /// Sampled reservoir atoms.
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Trajectories per probability-map cell; 0 skips the map.
    #[arg(long)]
    pub map_reps: Option<usize>,
    /// Also report the molasses equilibrium temperatures.
    #[arg(long)]
    pub molasses: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub cycles: Option<u64>,
    /// Reuse each loaded array this many times before reloading.
    #[arg(long, default_value_t = 0)]
    pub reuse: u32,
    /// Advance a Rabi pulse by one step per reuse round.
    #[arg(long)]
    pub rabi: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// saturating_exponential, exponential_decay, fringe or damped_rabi.
    #[arg(long)]
    pub model: String,
    /// Comma-separated initial parameter values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub guess: Vec<f64>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, CliError> {
    match path {
        Some(p) => ScenarioConfig::from_path(p),
        None => ScenarioConfig::from_toml_str(DEFAULT_TOML),
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Command::ValidateConfig { path } = &cli.command {
        let cfg = load_config(path.as_deref().or(cli.config.as_deref()))?;
        let diags = cfg.diagnostics();
        if diags.is_empty() {
            println!("ok: 0 diagnostics (config hash {})", cfg.hash());
            return Ok(());
        }
        for d in &diags {
            println!("{d}");
        }
        return Err(CliError::Invalid(diags));
    }

    let cfg = load_config(cli.config.as_deref())?.validated()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} threads: {e}", cli.threads.unwrap_or(0))))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &ScenarioConfig) -> Result<(), CliError> {
    let seed = cli.seed;
    let (name, result): (String, Box<dyn FnOnce() -> Result<Bundle, CliError>>) = match &cli.command {
        Command::Cavity => ("cavity".into(), Box::new(|| scenarios::cavity(cfg))),
        Command::Reservoir => ("reservoir".into(), Box::new(|| scenarios::reservoir_curves(cfg))),
        Command::LoadMc(a) => {
            let o = LoadMcOptions {
                density_per_cm3: a.density,
                duty: a.duty,
                side: a.side,
                n_atoms: a.atoms,
                map_reps: a.map_reps,
                molasses: a.molasses,
            };
            ("load-mc".into(), Box::new(move || scenarios::load_mc(cfg, seed, &o)))
        }
        Command::Pipeline(a) => {
            let cycles = a.cycles.unwrap_or(cfg.cycle.n_cycles);
            let (reuse, rabi) = (a.reuse, a.rabi);
            if cycles == 0 {
                return Err(CliError::Config("--cycles must be >= 1".into()));
            }
            ("pipeline".into(), Box::new(move || scenarios::pipeline(cfg, seed, reuse, cycles, rabi)))
        }
        Command::Fit(a) => {
            let text = std::fs::read_to_string(&a.input)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", a.input.display())))?;
            let (model, guess) = (a.model.clone(), a.guess.clone());
            ("fit".into(), Box::new(move || scenarios::fit_csv(cfg, &text, &model, &guess)))
        }
        Command::RunScenario { name } => {
            if !scenarios::SCENARIOS.contains(&name.as_str()) {
                return Err(CliError::UnknownScenario { name: name.clone(), valid: scenarios::SCENARIOS.to_vec() });
            }
            let n = name.clone();
            (name.clone(), Box::new(move || scenarios::run_scenario(&n, cfg, seed)))
        }
        Command::ValidateConfig { .. } => unreachable!("handled before the pool starts"),
    };

    let started = Instant::now();
    match result() {
        Ok(bundle) => {
            let dir = write_bundle(&cli.out_dir, &name, seed, cfg, bundle, started)?;
            println!("{}", dir.display());
            Ok(())
        }
        Err(e) => {
            // Best effort: the original error is what the caller needs.
            let _ = write_failure_manifest(&cli.out_dir, &name, seed, cfg, &e, started);
            Err(e)
        }
    }
}
