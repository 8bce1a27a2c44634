use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddsqueeze::experiments::{
    cmd_evolve, cmd_noise_ensemble, cmd_scaling, cmd_verify_dd, exit, exit_code, ControlConfig, CsvTable,
    HamiltonianKind, NoiseConfig, ReductionConfig, Sampling, ScenarioConfig,
};
use ddsqueeze::Result;

/// Spin squeezing of a collective spin under one-axis twisting and
/// continuous dynamical decoupling.
#[derive(Debug, Parser)]
#[command(name = "ddsqueeze", version)]
struct Cli {
    /// TOML scenario file; keys not given keep their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Write the CSV here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Period-averaged decoupling residuals for a list of winding pairs.
    VerifyDd {
        /// Winding pair as `n_x,n_y`; repeat for several pairs.
        #[arg(long = "pair", value_parser = parse_pair, allow_hyphen_values = true)]
        pairs: Vec<[i32; 2]>,
    },
    /// Noiseless squeezing time series.
    Evolve,
    /// Noise-averaged squeezing time series.
    NoiseEnsemble,
    /// Minimum squeezing against N with log-log slope fits.
    Scaling {
        /// Spin numbers, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_values: Vec<u32>,
        /// Extra spin numbers appended to the list.
        #[arg(long, value_delimiter = ',')]
        extend: Vec<u32>,
        /// Hamiltonians, comma separated (oat, tat, dr-averaged).
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        hamiltonians: Vec<HamiltonianKind>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

/// Flag overrides for config keys.
#[derive(Debug, Default, Args)]
struct Overrides {
    #[arg(long, global = true)]
    n_spins: Option<u32>,
    #[arg(long, global = true, value_parser = parse_kind)]
    hamiltonian: Option<HamiltonianKind>,
    #[arg(long, global = true)]
    chi: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    n_x: Option<i32>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    n_y: Option<i32>,
    #[arg(long, global = true)]
    n_cyc: Option<u32>,
    #[arg(long, global = true)]
    t_min: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    sigma_sq: Option<f64>,
    #[arg(long, global = true)]
    n_paths: Option<usize>,
    /// Master seed of the noise ensemble.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    per_path_xi: bool,
    #[arg(long, global = true)]
    t_end: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    substeps: Option<usize>,
    #[arg(long, global = true)]
    stroboscopic: bool,
}

fn parse_pair(s: &str) -> std::result::Result<[i32; 2], String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected n_x,n_y, got '{s}'"))?;
    let p = |x: &str| x.trim().parse::<i32>().map_err(|e| format!("'{x}': {e}"));
    Ok([p(a)?, p(b)?])
}

fn parse_kind(s: &str) -> std::result::Result<HamiltonianKind, String> {
    HamiltonianKind::parse(s).map_err(|e| e.to_string())
}

impl Overrides {
    fn apply(&self, c: &mut ScenarioConfig) {
        if let Some(v) = self.n_spins {
            c.n_spins = v;
        }
        if let Some(v) = self.hamiltonian {
            c.hamiltonian = v;
        }
        if let Some(v) = self.chi {
            c.chi = v;
        }
        let touches_control = self.n_x.is_some() || self.n_y.is_some() || self.n_cyc.is_some() || self.t_min.is_some();
        if touches_control || (c.hamiltonian == HamiltonianKind::DrivenDd && c.control.is_none()) {
            let ctl = c.control.get_or_insert_with(ControlConfig::default);
            if let Some(v) = self.n_x {
                ctl.n_x = v;
            }
            if let Some(v) = self.n_y {
                ctl.n_y = v;
            }
            if let Some(v) = self.n_cyc {
                ctl.n_cyc = v;
            }
            if self.t_min.is_some() {
                ctl.t_min = self.t_min;
            }
        }
        let touches_noise = self.alpha.is_some()
            || self.sigma_sq.is_some()
            || self.n_paths.is_some()
            || self.seed.is_some()
            || self.per_path_xi;
        if touches_noise {
            let n = c.noise.get_or_insert_with(NoiseConfig::default);
            if let Some(v) = self.alpha {
                n.alpha = v;
            }
            if let Some(v) = self.sigma_sq {
                n.sigma_sq = v;
            }
            if let Some(v) = self.n_paths {
                n.n_paths = v;
            }
            if let Some(v) = self.seed {
                n.master_seed = v;
            }
            if self.per_path_xi {
                n.reduction = ReductionConfig::PerPathXi;
            }
        }
        if let Some(v) = self.t_end {
            c.time.t_end = v;
        }
        if let Some(v) = self.dt {
            c.time.dt = v;
        }
        if let Some(v) = self.substeps {
            c.time.substeps_per_period = v;
        }
        if self.stroboscopic {
            c.time.sampling = Sampling::Stroboscopic;
        }
    }
}

fn emit(table: &CsvTable, config: &ScenarioConfig) -> Result<()> {
    match &config.output {
        Some(path) => table.write_to(path),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(table.render().as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut config = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    cli.overrides.apply(&mut config);
    if cli.output.is_some() {
        config.output = cli.output.clone();
    }
    match cli.command {
        Command::Defaults => {
            print!("{}", ScenarioConfig::default().to_toml_string());
            Ok(exit::OK)
        }
        Command::VerifyDd { pairs } => {
            if !pairs.is_empty() {
                config.verify_dd.pairs = pairs;
            }
            if let Some(n) = cli.overrides.n_spins {
                config.verify_dd.n_spins = n;
            }
            let report = cmd_verify_dd(&config)?;
            emit(&report.table(&config), &config)?;
            if report.passed() {
                Ok(exit::OK)
            } else {
                eprintln!("verify-dd: an expected-pass pair failed");
                Ok(exit::CHECK_FAILED)
            }
        }
        Command::Evolve => {
            emit(&cmd_evolve(&config)?, &config)?;
            Ok(exit::OK)
        }
        Command::NoiseEnsemble => {
            emit(&cmd_noise_ensemble(&config)?, &config)?;
            Ok(exit::OK)
        }
        Command::Scaling {
            n_values,
            extend,
            hamiltonians,
        } => {
            if !n_values.is_empty() {
                config.scaling.n_values = n_values;
            }
            config.scaling.n_values.extend(extend);
            if !hamiltonians.is_empty() {
                config.scaling.hamiltonians = hamiltonians;
            }
            let report = cmd_scaling(&config)?;
            for (kind, slope) in &report.slopes {
                eprintln!("slope {kind}: {slope:.4}");
            }
            emit(&report.table(&config), &config)?;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(exit::USAGE);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::NUMERIC);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
