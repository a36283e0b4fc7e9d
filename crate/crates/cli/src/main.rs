use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcoin::experiment::{run_plan, write_artifacts, Format, Outcome, Plan, Preset};
use fedcoin::netsim::{SimConfig, SimMetrics};
use fedcoin::verify::{verify_chain_file, ChainReport};
use fedcoin::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// FedCoin network simulator.
#[derive(Parser)]
#[command(name = "fedcoin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a config file and write its metrics.
    Run(RunArgs),
    /// Re-check a chain file written by `run`.
    VerifyChain {
        path: PathBuf,
        /// Print the report as JSON or CSV instead of a table.
        #[arg(long, value_parser = parse_format)]
        format: Option<Format>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// One of: default, fig4, fig6, conservation, obs1, obs2.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML config file; keys left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed of the preset or config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Summary file format.
    #[arg(long, value_parser = parse_format, default_value = "json")]
    format: Format,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code, reported on stderr as one JSON line.
struct Failure {
    code: u8,
    kind: &'static str,
    error: Error,
}

impl Failure {
    fn from_error(error: Error) -> Self {
        let (code, kind) = match &error {
            Error::Config { .. } | Error::InvalidArgument(_) => (EXIT_CONFIG, "config"),
            Error::Decode { .. } | Error::Malformed(_) => (EXIT_VERIFY, "structural"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        Failure { code, kind, error }
    }

    fn report(&self) -> ExitCode {
        let mut obj = serde_json::json!({
            "error": self.kind,
            "message": self.error.to_string(),
        });
        match &self.error {
            Error::Config { path, reason } => {
                obj["path"] = path.clone().into();
                obj["reason"] = reason.clone().into();
            }
            Error::Decode { offset, .. } => obj["offset"] = (*offset).into(),
            _ => {}
        }
        eprintln!("{obj}");
        ExitCode::from(self.code)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::VerifyChain { path, format } => verify(path, format),
        Command::Presets => {
            for p in Preset::ALL {
                println!("{p}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|f| f.report())
}

fn run(args: RunArgs) -> Result<ExitCode, Failure> {
    let mut plan = match (&args.preset, &args.config) {
        (Some(name), _) => name.parse::<Preset>().map_err(Failure::from_error)?.plan(),
        (None, Some(path)) => Plan::Single(SimConfig::load(path).map_err(Failure::from_error)?),
        (None, None) => Preset::Default.plan(),
    };
    if let Some(seed) = args.seed {
        plan = plan.with_seed(seed);
    }
    let outcome = run_plan(&plan).map_err(Failure::from_error)?;
    let written = write_artifacts(&outcome, &args.out, args.format).map_err(Failure::from_error)?;
    print!("{}", render(&outcome));
    for p in written {
        println!("wrote {}", p.display());
    }
    let ok = match &outcome {
        Outcome::Single { metrics, .. } => metrics.conservation.holds && metrics.conservation.payouts_match,
        _ => true,
    };
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    })
}

fn verify(path: PathBuf, format: Option<Format>) -> Result<ExitCode, Failure> {
    let file = File::open(&path).map_err(|e| {
        Failure::from_error(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })?;
    let report: ChainReport = verify_chain_file(BufReader::new(file)).map_err(Failure::from_error)?;
    match format {
        Some(Format::Json) => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
        Some(Format::Csv) => {
            println!("check,passed,failures,first_failure");
            for c in &report.checks {
                let first = c.first_failure().map_or(String::new(), |h| h.to_string());
                println!("{},{},{},{first}", c.name, c.passed(), c.failures.len());
            }
        }
        None => print!("{report}"),
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    })
}

fn render(outcome: &Outcome) -> String {
    let mut s = String::new();
    match outcome {
        Outcome::Single { metrics, .. } => render_single(&mut s, metrics),
        Outcome::Difficulty(curve) => {
            writeln!(
                s,
                "{:>10} {:>7} {:>12} {:>12} {:>10}",
                "D", "blocks", "median iters", "mean iters", "max iters"
            )
            .unwrap();
            for r in &curve.rows {
                writeln!(
                    s,
                    "{:>10.0e} {:>7} {:>12} {:>12.1} {:>10}",
                    r.difficulty, r.blocks, r.median_iterations, r.mean_iterations, r.max_iterations
                )
                .unwrap();
            }
        }
        Outcome::Revenue(curve) => {
            writeln!(s, "{:?} schedule, gamma {}", curve.mode, curve.gamma).unwrap();
            writeln!(
                s,
                "{:>6} {:>8} {:>8} {:>7} {:>6}",
                "alpha", "share", "excess", "blocks", "stale"
            )
            .unwrap();
            for r in &curve.rows {
                writeln!(
                    s,
                    "{:>6.2} {:>8.4} {:>+8.4} {:>7} {:>6}",
                    r.alpha, r.share, r.excess, r.blocks, r.stale_blocks
                )
                .unwrap();
            }
            match curve.crossing {
                Some(a) => writeln!(s, "share crosses alpha at {a:.3}").unwrap(),
                None => writeln!(s, "share never crosses alpha").unwrap(),
            }
        }
    }
    s
}

fn render_single(s: &mut String, m: &SimMetrics) {
    writeln!(
        s,
        "seed {}  tasks {}  blocks {}  stale {}  ticks {}",
        m.seed,
        m.tasks,
        m.blocks.len(),
        m.stale_blocks,
        m.ticks
    )
    .unwrap();
    writeln!(s, "\n{:<5} {:>10} {:>10} {:>10}", "type", "mean SV", "std err", "exact").unwrap();
    for (j, v) in m.type_mean_sv.iter().enumerate() {
        let se = m.type_sv_se.as_ref().map_or("-".into(), |x| format!("{:.5}", x[j]));
        let ex = m.type_exact_sv.as_ref().map_or("-".into(), |x| format!("{:.5}", x[j]));
        writeln!(s, "T{j:<4} {v:>10.5} {se:>10} {ex:>10}").unwrap();
    }
    writeln!(s).unwrap();
    for (name, st) in [("block interval", &m.interval), ("winner iters", &m.winner_iterations)] {
        writeln!(
            s,
            "{name:<15} median {:>9} mean {:>11.1} min {:>8} max {:>8}",
            st.median, st.mean, st.min, st.max
        )
        .unwrap();
    }
    let v = &m.verification;
    writeln!(
        s,
        "verification    {}/{} passed, {} stale, {} readmitted",
        v.passed, v.checked, v.stale, v.readmitted
    )
    .unwrap();
    let c = &m.conservation;
    writeln!(
        s,
        "conservation    deposits {} supply {} server {} clients {} winners {}: {}",
        c.deposits,
        c.supply,
        c.server_balance,
        c.client_payouts,
        c.winner_net,
        if c.holds && c.payouts_match { "ok" } else { "VIOLATED" }
    )
    .unwrap();
    if let Some(a) = m.adversary_share {
        writeln!(s, "adversary share {a:.4}").unwrap();
    }
}
