use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use othr_ecm::config::ScenarioConfig;
use othr_ecm::ecm::{AssociationMode, EcmConfig};
use othr_ecm::experiment::{reference_case, run_experiment, CaseDef, ExperimentSpec, METRICS};
use othr_ecm::oracle;
use othr_ecm::sim::Scenario;
use othr_ecm::Error;

#[derive(Parser)]
#[command(name = "othr", version, about = "OTHR multitarget tracking with ionospheric height inference")]
struct Cli {
    /// Scenario file (TOML); the built-in reference scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Summary,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate one run of ground truth and write it as JSON.
    Simulate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        case: u8,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulate one run, track it and print per-scan errors.
    Track {
        #[arg(long, default_value_t = 3)]
        case: u8,
        #[arg(long, default_value_t = 1)]
        kappa: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Monte Carlo experiment for one case.
    Experiment {
        #[arg(long)]
        case: u8,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        kappa: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Outputs to write; both when omitted.
        #[arg(long, value_enum)]
        format: Vec<Format>,
        /// Case to compute improvement ratios against.
        #[arg(long)]
        reference: Option<u8>,
        /// Use the simulator's origin labels instead of gating.
        #[arg(long)]
        true_association: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Largest tolerated fraction of aborted runs.
        #[arg(long, default_value_t = 0.05)]
        max_excluded: f64,
    },
    /// Check the solvers against dense and brute-force references.
    Oracle {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let config = match &cli.config {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::reference()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd, config) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd, config: ScenarioConfig) -> othr_ecm::Result<ExitCode> {
    let config_toml = config.to_toml();
    let scenario = Scenario::new(config)?;
    match cmd {
        Cmd::Simulate { seed, case, out } => {
            let case = CaseDef::new(case, scenario.config.targets.len())?;
            let truth = scenario.simulate(seed, &case.targets)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(format!("truth_seed{seed}.json"));
            let json = serde_json::to_string_pretty(&othr_ecm::sim::TruthExport::from(&truth))
                .map_err(|e| Error::Invalid(e.to_string()))?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            println!("wrote {}", path.display());
        }
        Cmd::Track { case, kappa, seed } => {
            let case = CaseDef::new(case, scenario.config.targets.len())?;
            let cfg = EcmConfig {
                kappa,
                vih_mode: case.vih_mode,
                ..scenario.config.ecm
            };
            let tracker = scenario.tracker(cfg)?;
            let errs = othr_ecm::experiment::run_once(&scenario, &tracker, &case, seed)?;
            println!("target,scan,{}", METRICS.map(|m| m.trim_start_matches("rmse_")).join(","));
            for (l, seq) in errs.iter().enumerate() {
                for (k, e) in seq.iter().enumerate() {
                    let cells: Vec<String> = e.iter().map(|v| v.map_or(String::new(), |v| format!("{v:.6}"))).collect();
                    println!("{},{},{}", case.targets[l] + 1, k + 1, cells.join(","));
                }
            }
        }
        Cmd::Experiment {
            case,
            runs,
            kappa,
            seed,
            out,
            format,
            reference,
            true_association,
            workers,
            max_excluded,
        } => {
            let mk = |case: u8| {
                let mut spec = ExperimentSpec::new(case, runs, kappa, seed);
                spec.workers = workers;
                if true_association {
                    spec.association = AssociationMode::Truth;
                }
                spec
            };
            let report = run_experiment(&scenario, &mk(case))?;
            let reference = match reference.or_else(|| reference_case(case)) {
                Some(r) if r != case => Some(run_experiment(&scenario, &mk(r))?),
                _ => None,
            };
            let csv = format.is_empty() || format.iter().any(|f| matches!(f, Format::Csv));
            let summary = format.is_empty() || format.iter().any(|f| matches!(f, Format::Summary));
            report.export(&out, reference.as_ref(), &config_toml, csv, summary)?;
            println!("{}", report.summary(reference.as_ref(), "").trim_end());
            if report.excluded.len() as f64 > max_excluded * runs as f64 {
                eprintln!("{} of {runs} runs aborted", report.excluded.len());
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Oracle { seed } => {
            let mut ok = true;
            for check in oracle::run_all(&scenario, seed)? {
                println!("{} {:<24} {}", if check.pass { "PASS" } else { "FAIL" }, check.name, check.detail);
                ok &= check.pass;
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
