use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use lads_core::gateway::service::{error_code, Client, Request, Response, Server, ServiceConfig};
use lads_core::sim::{prop1_preset, run_sweep, write_csv_file, SweepConfig};
use lads_core::verify::{check_lossless, run_suites, CheckOutcome, Suite, VerifyConfig};
use lads_core::LadsError;

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(name = "lads", version, about = "Coupled-noise gateway and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the noise gateway as a line-delimited JSON service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = DEFAULT_ADDR)]
        listen: String,
    },
    /// Ask a running gateway to write a snapshot.
    Snapshot {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_ADDR)]
        connect: String,
    },
    /// Run a simulation sweep and write results.csv and summary.json.
    Simulate {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Run the acceptance suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these suites (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<Suite>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// KS and autocorrelation checks on served noise; prints JSON.
    VerifyLossless {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Prop1,
}

/// Written when a run starts and rewritten with the end time and outputs
/// when it finishes.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: u64,
    version: String,
    started_at: String,
    finished_at: Option<String>,
    outputs: Vec<PathBuf>,
    passed: Option<bool>,
}

impl RunManifest {
    fn start(command: &str, config: Option<&Path>, preset: Option<&str>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: config.map(Path::to_path_buf),
            preset: preset.map(String::from),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            outputs: Vec::new(),
            passed: None,
        }
    }

    fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    fn finish(&mut self, dir: &Path, passed: bool) -> anyhow::Result<()> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.passed = Some(passed);
        self.write(dir)
    }
}

fn parallelism(requested: Option<usize>) -> usize {
    requested
        .filter(|&p| p > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn load_verify_config(path: Option<&Path>) -> anyhow::Result<VerifyConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(VerifyConfig::from_toml(&text)?)
        }
        None => Ok(VerifyConfig::default()),
    }
}

fn serve(config: &Path, listen: &str) -> anyhow::Result<ExitCode> {
    let cfg = ServiceConfig::load(config)?;
    let gateway = cfg.open_gateway()?;
    let server = Server::bind(gateway, listen, cfg.snapshot_path.clone())
        .with_context(|| format!("binding {listen}"))?;
    let flag = server.shutdown_handle();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    // tests and scripts read the bound address from the first stdout line
    println!("listening on {}", server.local_addr()?);
    server.run()?;
    Ok(ExitCode::SUCCESS)
}

fn snapshot(out: &Path, connect: &str) -> anyhow::Result<ExitCode> {
    let mut client = Client::connect(connect).with_context(|| format!("connecting to {connect}"))?;
    let path = if out.is_absolute() {
        out.to_path_buf()
    } else {
        std::env::current_dir()?.join(out)
    };
    match client.send(&Request::Snapshot { path })? {
        Response::Snapshot { path, bytes } => {
            println!("wrote {bytes} bytes to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Response::Error { error, code } => bail!("gateway refused snapshot [{code}]: {error}"),
        other => bail!("unexpected response {other:?}"),
    }
}

fn simulate(
    config: Option<&Path>,
    preset: Option<Preset>,
    out_dir: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SweepConfig::from_toml(&text)?
        }
        None => {
            if preset.is_none() {
                info!("no config given; using the prop1 preset");
            }
            prop1_preset()
        }
    };
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let preset_name = config.is_none().then_some("prop1");
    let mut manifest = RunManifest::start("simulate", config, preset_name, cfg.experiment.seed);
    manifest.write(out_dir)?;

    let resolved = out_dir.join("config.toml");
    fs::write(&resolved, toml::to_string(&cfg)?)?;
    let result = run_sweep(&cfg, parallelism(threads))?;
    let csv = out_dir.join("results.csv");
    write_csv_file(&result.rows, &csv)?;
    let summary = out_dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&result.summary)? + "\n")?;

    for s in &result.summary.slopes {
        println!(
            "slope {} {:?}{} = {:.4} [{:.4}, {:.4}]{}",
            s.regime,
            s.axis,
            s.at.map(|v| format!(" at {v}")).unwrap_or_default(),
            s.slope,
            s.ci_low,
            s.ci_high,
            if s.underpowered { " (underpowered)" } else { "" }
        );
    }
    for a in &result.summary.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    let passed = result.summary.all_passed();
    manifest.outputs = vec![resolved, csv, summary];
    manifest.finish(out_dir, passed)?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!("{}", o.line());
    }
    let passed = outcomes.iter().all(|o| o.passed);
    println!(
        "{}/{} checks passed",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len()
    );
    passed
}

fn verify(
    config: Option<&Path>,
    only: &[Suite],
    out_dir: Option<&Path>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut cfg = load_verify_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.parallelism = parallelism(threads);
    let mut manifest = RunManifest::start("verify", config, None, cfg.seed);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        manifest.write(dir)?;
    }
    let outcomes = run_suites(&cfg, only);
    let passed = report(&outcomes);
    if let Some(dir) = out_dir {
        let path = dir.join("verify.json");
        fs::write(&path, serde_json::to_string_pretty(&outcomes)? + "\n")?;
        manifest.outputs = vec![path];
        manifest.finish(dir, passed)?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verify_lossless(config: Option<&Path>, samples: usize) -> anyhow::Result<ExitCode> {
    let cfg = VerifyConfig {
        lossless_samples: samples,
        ..load_verify_config(config)?
    };
    let outcome = check_lossless(&cfg);
    println!("{}", serde_json::to_string(&outcome)?);
    Ok(if outcome.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LADS_LOG_LEVEL", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve { config, listen } => serve(config, listen),
        Command::Snapshot { out, connect } => snapshot(out, connect),
        Command::Simulate {
            config,
            preset,
            out_dir,
            seed,
            parallelism,
        } => simulate(config.as_deref(), *preset, out_dir, *seed, *parallelism),
        Command::Verify {
            config,
            only,
            out_dir,
            seed,
            parallelism,
        } => verify(config.as_deref(), only, out_dir.as_deref(), *seed, *parallelism),
        Command::VerifyLossless { config, samples } => verify_lossless(config.as_deref(), *samples),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = e.downcast_ref::<LadsError>().map(error_code).unwrap_or("internal");
            warn!("{e:#}");
            eprintln!("error [{code}]: {e:#}");
            ExitCode::from(2)
        }
    }
}
