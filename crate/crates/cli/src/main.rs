use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use clonesim_core::adiabatic::pulse_csv;
use clonesim_core::config::{self, SEED_ENV};
use clonesim_core::ideal_cloner::InputQubit;
use clonesim_core::protocol::{
    csv_header, csv_row, linspace, run, sweep, sweep_csv, CloneReport, Mode, ProtocolConfig, ProtocolError,
    SweepError,
};
use clonesim_core::report::fmt_sig;
use clonesim_core::verify;
use log::{info, warn};
use serde::Serialize;

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const NORM_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "clonesim", version, about = "Atom-to-photon optimal cloning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ideal heralded cloner for one input qubit a|0> + b|1>.
    Ideal {
        #[arg(long, allow_hyphen_values = true)]
        a: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        b: Option<String>,
        /// Base config; its input is replaced by --a/--b when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "clonesim-out")]
        out: PathBuf,
    },
    /// Integrates both cavity nodes and heralds the emitted photons.
    Dynamics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "clonesim-out")]
        out: PathBuf,
    },
    /// Runs one config per value of a parameter and tabulates the results.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "clonesim-out")]
        out: PathBuf,
    },
    /// Runs the acceptance suite and prints a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Verify(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Verify(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(format!("config error: {e}"))
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(_) => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Config(e) => e.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    config: ProtocolConfig,
    config_text: String,
    version: &'static str,
    seed: u64,
    timestamp: u64,
    outputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ideal { a, b, config, out } => cmd_ideal(a.as_deref(), b.as_deref(), config.as_deref(), &out),
        Command::Dynamics { config, out } => cmd_dynamics(&config, &out),
        Command::Sweep { param, from, to, steps, config, out } => cmd_sweep(&param, from, to, steps, &config, &out),
        Command::Verify { seed, out } => cmd_verify(seed, out.as_deref()),
    }
}

fn seed_override() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn load_config(path: &Path) -> Result<ProtocolConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = config::parse(&text)?;
    config::apply_seed_override(&mut cfg, seed_override().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn amplitude(name: &str, v: &str) -> Result<num_complex::Complex64> {
    config::parse_complex(v).ok_or_else(|| CliError::Config(format!("cannot parse amplitude --{name} `{v}`")))
}

fn input_qubit(a: &str, b: &str) -> Result<InputQubit> {
    let (a, b) = (amplitude("a", a)?, amplitude("b", b)?);
    let n2 = a.norm_sqr() + b.norm_sqr();
    if (n2 - 1.0).abs() > NORM_TOL {
        warn!("|a|^2 + |b|^2 = {}; renormalizing", fmt_sig(n2));
    }
    InputQubit::renormalized(a, b).map_err(|e| CliError::Config(format!("invalid amplitudes: {e}")))
}

fn cmd_ideal(a: Option<&str>, b: Option<&str>, path: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => {
            let mut cfg = ProtocolConfig::default();
            config::apply_seed_override(&mut cfg, seed_override().as_deref())?;
            cfg
        }
    };
    cfg.mode = Mode::Analytic;
    match (a, b) {
        (Some(a), Some(b)) => cfg.input = input_qubit(a, b)?,
        (None, None) if path.is_some() => {}
        _ => return Err(CliError::Config("ideal needs both --a and --b, or a --config".into())),
    }
    let report = run(&cfg)?;
    print_summary(&report);
    write_run(out, "ideal", path, &cfg, &report)?;
    Ok(())
}

fn cmd_dynamics(path: &Path, out: &Path) -> Result<()> {
    let mut cfg = load_config(path)?;
    cfg.mode = Mode::Dynamic;
    let report = run(&cfg)?;
    print_summary(&report);
    write_run(out, "dynamics", Some(path), &cfg, &report)?;
    if report.adiabaticity_violated() {
        let d = report.dynamics.as_ref().expect("dynamic run");
        return Err(CliError::Verify(format!(
            "adiabaticity violated: max excited population alice {} bob {}",
            fmt_sig(d.alice.excited_pop_max),
            fmt_sig(d.bob.excited_pop_max)
        )));
    }
    Ok(())
}

fn cmd_sweep(param: &str, from: f64, to: f64, steps: usize, path: &Path, out: &Path) -> Result<()> {
    if !config::sweepable().iter().any(|k| k == param) {
        return Err(config::ConfigError::NotSweepable(param.to_string()).into());
    }
    if steps == 0 || !from.is_finite() || !to.is_finite() {
        return Err(CliError::Config("sweep needs finite bounds and steps >= 1".into()));
    }
    let cfg = load_config(path)?;
    let rows = sweep(&cfg, param, &linspace(from, to, steps))?;
    let table = sweep_csv(param, &rows);
    print!("{table}");
    fs::create_dir_all(out)?;
    let csv = out.join("sweep.csv");
    fs::write(&csv, &table)?;
    let cfg_txt = out.join("config_resolved.txt");
    fs::write(&cfg_txt, config::to_text(&cfg))?;
    write_manifest(out, &format!("sweep {param} {from:?} {to:?} {steps}"), Some(path), &cfg, vec![csv, cfg_txt])?;
    Ok(())
}

fn cmd_verify(seed: u64, out: Option<&Path>) -> Result<()> {
    let seed = match seed_override() {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
        None => seed,
    };
    let report = verify::run_all(seed);
    print!("{}", report.table());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), report.to_json())?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .criteria
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.to_string())
            .collect();
        Err(CliError::Verify(format!("failed criteria: {}", failed.join(", "))))
    }
}

fn print_summary(r: &CloneReport) {
    let rows = [
        ("clone_fidelity_1", r.clone_fidelity_1),
        ("clone_fidelity_2", r.clone_fidelity_2),
        ("telenot_fidelity", r.telenot_fidelity),
        ("p_symmetric", r.p_symmetric),
        ("p_herald", r.p_herald),
        ("p_operational", r.p_operational),
        ("p_reference", r.breakdown.p_reference),
        ("p_detected", r.p_detected),
        ("false_herald_fraction", r.false_herald_fraction),
        ("overlap_visibility", r.overlap_visibility),
        ("emission_prob_alice", r.emission_prob_alice),
        ("emission_prob_bob", r.emission_prob_bob),
    ];
    for (k, v) in rows {
        println!("{k:<22} {}", fmt_sig(v));
    }
    for w in &r.warnings {
        warn!("{w}");
    }
}

fn write_run(out: &Path, command: &str, path: Option<&Path>, cfg: &ProtocolConfig, r: &CloneReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        outputs.push(p);
        Ok(())
    };
    let json = serde_json::to_string_pretty(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    put("report.json", &(json + "\n"))?;
    put("summary.csv", &format!("{}\n{}\n", csv_header(), csv_row(r)))?;
    put("config_resolved.txt", &config::to_text(cfg))?;
    if let Some(d) = &r.dynamics {
        put("pulse_alice.csv", &pulse_csv(&d.alice.times, &d.alice.pulse_shape))?;
        put("pulse_bob.csv", &pulse_csv(&d.bob.times, &d.bob.pulse_shape))?;
    }
    write_manifest(out, command, path, cfg, outputs)
}

fn write_manifest(out: &Path, command: &str, path: Option<&Path>, cfg: &ProtocolConfig, outputs: Vec<PathBuf>) -> Result<()> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: path.map(Path::to_path_buf),
        config: *cfg,
        config_text: config::to_text(cfg),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        timestamp,
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    let p = out.join("manifest.json");
    fs::write(&p, json + "\n")?;
    info!("wrote {}", p.display());
    Ok(())
}
