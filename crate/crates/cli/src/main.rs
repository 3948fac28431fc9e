//! `wmaudit`: black-box watermark detection campaigns from the command line.
//!
//! Exit status is 0 on success, 1 on errors (including a refused
//! estimation) and 2 when the query budget ran out; partial reports are
//! written in that case.

mod campaign;
mod config;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use campaign::Outcome;
use config::{CampaignConfig, Overrides};
use simulate::Probe;
use wmaudit::schemes::Family;

#[derive(Parser, Debug)]
#[command(name = "wmaudit", version, about = "Detect and characterise LLM watermarks through black-box queries")]
struct Cli {
    /// Campaign file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ceiling on transport queries.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Runs per test.
    #[arg(long, global = true)]
    repetitions: Option<usize>,
    /// Provider file of an HTTP endpoint; replaces the configured model.
    #[arg(long, global = true)]
    provider: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    RedGreen,
    FixedSampling,
    CacheAugmented,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::RedGreen => Family::RedGreen,
            FamilyArg::FixedSampling => Family::FixedSampling,
            FamilyArg::CacheAugmented => Family::CacheAugmented,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeKind {
    Diversity,
    Choice,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured tests and write reports plus summary.json.
    Detect,
    /// Estimate parameters of the families an earlier detect run rejected.
    Estimate {
        /// Output directory of the detect run (defaults to --out).
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Restrict to one family.
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
    },
    /// Print raw samples of the configured simulator.
    Simulate {
        #[arg(long, value_enum, default_value = "diversity")]
        probe: ProbeKind,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Tokens per free generation.
        #[arg(long, default_value_t = 20)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        prompt_id: usize,
        #[arg(long, default_value = "I bought")]
        prefix: String,
        #[arg(long, default_value_t = 7)]
        digit: u8,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long, value_delimiter = ',', default_value = "apples,pears")]
        choices: Vec<String>,
        /// One JSON response per line instead of plain text.
        #[arg(long)]
        json: bool,
    },
    /// Fit the diversity decay n − R(n) ≈ c·e^(−αt) per temperature.
    AuditDiversity,
    /// Print a detect run and check summary.json against its reports.
    Report {
        /// Output directory of the detect run (defaults to --out).
        #[arg(long)]
        reports: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        budget: cli.budget,
        repetitions: cli.repetitions,
        provider: cli.provider.clone(),
    };
    let cfg = CampaignConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Detect => campaign::detect(&cfg),
        Command::Estimate { reports, family } => {
            campaign::estimate(&cfg, reports.as_ref().unwrap_or(&cfg.out), family.map(Family::from))
        }
        Command::Simulate { probe, samples, length, prompt_id, prefix, digit, repeat, choices, json } => {
            let probe = match probe {
                ProbeKind::Diversity => Probe::Diversity { length, prompt_id },
                ProbeKind::Choice => Probe::Choice { prefix, digit, repeat, choices },
            };
            simulate::simulate(&cfg, &probe, samples, json, &mut std::io::stdout().lock())?;
            Ok(Outcome::Complete)
        }
        Command::AuditDiversity => campaign::audit_diversity(&cfg),
        Command::Report { reports } => {
            campaign::report(reports.as_ref().unwrap_or(&cfg.out))?;
            Ok(Outcome::Complete)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::BudgetExhausted) => {
            eprintln!("wmaudit: query budget exhausted; partial results written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("wmaudit: {e:#}");
            ExitCode::from(1)
        }
    }
}
