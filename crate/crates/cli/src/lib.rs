//! `fedchain` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedchain_core::chain::verify_chain_dump;
use fedchain_core::export::{self, adversary_ids};
use fedchain_core::scenario::{calibrate, Preset, Scenario};
use fedchain_core::sim::{run_simulation, SimStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ABORT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedchain", version, about = "Simulate a federated-learning blockchain consensus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Built-in scenario: fairness, knn-attack or baseline-even.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation and write metrics.csv, rounds.txt, chain.txt and summary.txt.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads (0 = all cores). Results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print mean and max simulated costs and suggested deadlines.
    Calibrate {
        #[command(flatten)]
        source: Source,
    },
    /// Re-hash a chain dump and check every link.
    Verify {
        #[arg(long)]
        chain: PathBuf,
    },
}

fn load(source: &Source) -> Result<(String, Scenario), String> {
    match (&source.preset, &source.config) {
        (Some(name), _) => {
            let preset = Preset::from_name(name).map_err(|e| e.to_string())?;
            Ok((preset.name().to_string(), preset.scenario()))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let scenario = Scenario::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            Ok((path.display().to_string(), scenario))
        }
        (None, None) => Err("one of --preset or --config is required".into()),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match cli.command {
        Command::Run {
            source,
            seed,
            out: dir,
            threads,
        } => cmd_run(&source, seed, &dir, threads, out, err),
        Command::Calibrate { source } => cmd_calibrate(&source, out, err),
        Command::Verify { chain } => cmd_verify(&chain, out, err),
    }
}

pub fn cmd_run(
    source: &Source,
    seed: Option<u64>,
    dir: &Path,
    threads: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let (label, mut scenario) = match load(source) {
        Ok(x) => x,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(threads) = threads {
        scenario.threads = threads;
    }
    let config = match scenario.build() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let output = match run_simulation(&config) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let artifacts = export::render(&label, &config, &output);
    if let Err(e) = export::write_artifacts(dir, &artifacts) {
        let _ = writeln!(err, "error: cannot write to {}: {e}", dir.display());
        return EXIT_CONFIG;
    }
    let adversary_wins: usize = adversary_ids(&config).iter().map(|&m| output.metrics.wins(m)).sum();
    let _ = writeln!(
        out,
        "{label} seed {}: {} rounds, {} blocks, adversary wins {adversary_wins}, tip {}",
        config.seed,
        output.records.len(),
        output.ledger.blocks().len(),
        output.ledger.tip_hash()
    );
    let _ = writeln!(out, "wrote {}", dir.display());
    match output.status {
        SimStatus::Completed => EXIT_OK,
        SimStatus::Aborted { round, reason } => {
            let _ = writeln!(err, "simulation aborted in round {round}: {reason}");
            EXIT_ABORT
        }
    }
}

pub fn cmd_calibrate(source: &Source, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (label, scenario) = match load(source) {
        Ok(x) => x,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let (cal, config) = match calibrate(&scenario).and_then(|c| Ok((c, scenario.build()?))) {
        Ok(x) => x,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let rc = &config.round_config;
    let _ = writeln!(out, "scenario: {label}");
    let _ = writeln!(out, "miners: {}", config.miners.len());
    let _ = writeln!(out, "forward cost: mean {:.1} max {:.1}", cal.forward_mean, cal.forward_max);
    let _ = writeln!(out, "train cost: mean {:.1} max {:.1}", cal.train_mean, cal.train_max);
    let _ = writeln!(out, "vote cost: max {:.1}", cal.vote_max);
    let _ = writeln!(
        out,
        "suggested pred_deadline: {} (mean forward x {})",
        cal.suggested_pred_deadline(),
        cal.safety_factor
    );
    let _ = writeln!(
        out,
        "suggested model_deadline: {} (mean train x {})",
        cal.suggested_model_deadline(),
        cal.safety_factor
    );
    let _ = writeln!(
        out,
        "deadlines in effect: model {} pred {} vote {}",
        rc.model_deadline, rc.pred_deadline, rc.vote_deadline
    );
    EXIT_OK
}

pub fn cmd_verify(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    if bytes.is_empty() {
        let _ = writeln!(out, "empty chain: nothing to verify");
        return EXIT_OK;
    }
    match verify_chain_dump(&bytes) {
        Ok(n) => {
            let _ = writeln!(out, "ok: {n} blocks verified");
            EXIT_OK
        }
        Err(fault) => {
            let _ = writeln!(
                err,
                "verification failed at block height {}: {}",
                fault.height, fault.reason
            );
            EXIT_VERIFY
        }
    }
}
