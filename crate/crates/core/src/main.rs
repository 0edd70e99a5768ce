use clap::{Args, Parser, Subcommand};
use loclab::config::RunConfig;
use loclab::report::{
    cmd_certify, cmd_report, cmd_scaling, cmd_search, cmd_verify_bounds, Outcome,
};
use loclab::LabError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "loclab",
    version,
    about = "Localization counterexample laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dyadic stage exponents `j` (v = 2^-j) for scaling and envelope suites.
    #[arg(long, global = true, value_delimiter = ',')]
    stages: Option<Vec<u32>>,
    /// Explicit scales replacing the recurrence.
    #[arg(long = "override-v", global = true, value_delimiter = ',')]
    override_v: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Envelope, norm and Dirichlet suites.
    VerifyBounds,
    /// Log-log fits and Sobolev membership.
    Scaling,
    /// Monte Carlo search per stage.
    Search,
    /// Search plus per-point certificates and the cross-term ledger.
    Certify,
    /// Collate existing artifacts into report.md and SVG traces.
    Report,
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), LabError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(st) = &common.stages {
        cfg.stages = st.clone();
        cfg.envelope_stages = st.clone();
    }
    if let Some(v) = &common.override_v {
        cfg.k_max = v.len();
        cfg.v_list = Some(v.clone());
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    let out = PathBuf::from(&cfg.out_dir);
    Ok((cfg, out))
}

fn exit_code(e: &LabError) -> u8 {
    match e {
        LabError::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, out) = match resolve(&cli.common) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result: Result<Outcome, LabError> = match cli.command {
        Command::VerifyBounds => cmd_verify_bounds(&cfg, &out),
        Command::Scaling => cmd_scaling(&cfg, &out),
        Command::Search => cmd_search(&cfg, &out),
        Command::Certify => cmd_certify(&cfg, &out),
        Command::Report => cmd_report(&out),
    };
    match result {
        Ok(o) => {
            for l in &o.lines {
                println!("{l}");
            }
            println!("wrote {} artifacts to {}", o.artifacts.len(), out.display());
            if o.ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("invariant violated; see the lines above");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
