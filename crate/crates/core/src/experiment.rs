//! Named experiment presets, parameter sweeps and their output files.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{write_chain, write_digests, Block};
use crate::netsim::{prepare, run_with_chain, MiningModel, ScheduleMode, SimConfig, SimMetrics, Strategy, UtilityKind};

pub const FIG6_SCHEMA: &str = "fedcoin.fig6/1";
pub const REVENUE_SCHEMA: &str = "fedcoin.revenue/1";

pub const FIG6_DIFFICULTIES: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
pub const SELFISH_ALPHAS: [f64; 8] = [0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The default config: FL utility, 10 clients, 10 miners, 5 rounds.
    Default,
    /// Per-type mean Shapley values of one converged FL round.
    Fig4,
    /// Winner iterations against difficulty on the toy game.
    Fig6,
    /// 201 blocks funded by three requesters.
    Conservation,
    /// Selfish pool against sequential task issuance.
    Obs1,
    /// Selfish pool against parallel task issuance.
    Obs2,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Default,
        Preset::Fig4,
        Preset::Fig6,
        Preset::Conservation,
        Preset::Obs1,
        Preset::Obs2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::Fig4 => "fig4",
            Preset::Fig6 => "fig6",
            Preset::Conservation => "conservation",
            Preset::Obs1 => "obs1",
            Preset::Obs2 => "obs2",
        }
    }

    pub fn plan(self) -> Plan {
        match self {
            Preset::Default => Plan::Single(SimConfig::default()),
            Preset::Fig4 => {
                let mut cfg = SimConfig::default();
                cfg.economy.rounds = 1;
                cfg.difficulty.initial = 5e-3;
                Plan::Single(cfg)
            }
            Preset::Fig6 => {
                let mut cfg = toy(10);
                cfg.network.gossip_batch = 1;
                cfg.economy.rounds = 101;
                Plan::Difficulty {
                    base: cfg,
                    values: FIG6_DIFFICULTIES.to_vec(),
                }
            }
            Preset::Conservation => {
                let mut cfg = toy(10);
                cfg.economy.requesters = 3;
                cfg.economy.rounds = 67;
                Plan::Single(cfg)
            }
            Preset::Obs1 => Plan::Alpha {
                base: selfish(ScheduleMode::Sequential, 2000),
                alphas: SELFISH_ALPHAS.to_vec(),
            },
            Preset::Obs2 => Plan::Alpha {
                base: selfish(ScheduleMode::Parallel, 10_000),
                alphas: SELFISH_ALPHAS.to_vec(),
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::config(
                "preset",
                format!("unknown preset `{s}`, expected one of {}", names.join(", ")),
            )
        })
    }
}

fn toy(players: usize) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.task.utility = UtilityKind::Toy;
    cfg.task.players = players;
    cfg
}

fn selfish(mode: ScheduleMode, blocks: u64) -> SimConfig {
    let mut cfg = toy(4);
    cfg.mining.model = MiningModel::Lottery;
    cfg.mining.max_ticks = 1_000_000_000;
    cfg.network.delay = 1;
    cfg.economy.rounds = blocks;
    cfg.schedule.mode = mode;
    cfg.adversary.strategy = Strategy::Selfish;
    cfg.adversary.alpha = 0.25;
    cfg.adversary.gamma = 0.5;
    cfg
}

/// What to run: one simulation, or one per value of a swept parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Single(SimConfig),
    Difficulty { base: SimConfig, values: Vec<f64> },
    Alpha { base: SimConfig, alphas: Vec<f64> },
}

impl Plan {
    pub fn base(&self) -> &SimConfig {
        match self {
            Plan::Single(c) | Plan::Difficulty { base: c, .. } | Plan::Alpha { base: c, .. } => c,
        }
    }

    pub fn base_mut(&mut self) -> &mut SimConfig {
        match self {
            Plan::Single(c) | Plan::Difficulty { base: c, .. } | Plan::Alpha { base: c, .. } => c,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Plan {
        self.base_mut().seed = seed;
        self
    }

    /// Every config the plan will run, in output order.
    pub fn configs(&self) -> Vec<SimConfig> {
        match self {
            Plan::Single(c) => vec![c.clone()],
            Plan::Difficulty { base, values } => values
                .iter()
                .map(|&d| {
                    let mut c = base.clone();
                    c.difficulty.initial = d;
                    c
                })
                .collect(),
            Plan::Alpha { base, alphas } => alphas
                .iter()
                .map(|&a| {
                    let mut c = base.clone();
                    c.adversary.alpha = a;
                    c
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub difficulty: f64,
    pub blocks: usize,
    pub median_iterations: f64,
    pub mean_iterations: f64,
    pub min_iterations: f64,
    pub max_iterations: f64,
    pub median_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyCurve {
    pub schema: String,
    pub seed: u64,
    pub rows: Vec<DifficultyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueRow {
    pub alpha: f64,
    pub share: f64,
    /// `share - alpha`: the pool's gain over honest mining.
    pub excess: f64,
    pub blocks: usize,
    pub stale_blocks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueCurve {
    pub schema: String,
    pub seed: u64,
    pub mode: ScheduleMode,
    pub gamma: f64,
    pub rows: Vec<RevenueRow>,
    /// Pool power at which the revenue share first rises above `alpha`.
    pub crossing: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Single {
        metrics: Box<SimMetrics>,
        chain: Vec<Block>,
    },
    Difficulty(DifficultyCurve),
    Revenue(RevenueCurve),
}

/// Linear interpolation of the first sign change of `share - alpha` from
/// non-positive to positive. `None` when the curve never crosses.
pub fn fairness_crossing(rows: &[RevenueRow]) -> Option<f64> {
    rows.windows(2).find_map(|w| {
        let (a, b) = (&w[0], &w[1]);
        (a.excess <= 0.0 && b.excess > 0.0).then(|| {
            let t = -a.excess / (b.excess - a.excess);
            a.alpha + t * (b.alpha - a.alpha)
        })
    })
}

fn run_one(cfg: &SimConfig) -> Result<(SimMetrics, Vec<Block>)> {
    let prep = prepare(cfg)?;
    run_with_chain(cfg, &prep)
}

/// Run every config on its own thread; results keep the input order.
fn run_all(configs: &[SimConfig]) -> Result<Vec<SimMetrics>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || run_one(c).map(|(m, _)| m)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    })
}

pub fn run_plan(plan: &Plan) -> Result<Outcome> {
    let base = plan.base();
    base.validate()?;
    match plan {
        Plan::Single(cfg) => {
            let (metrics, chain) = run_one(cfg)?;
            Ok(Outcome::Single {
                metrics: Box::new(metrics),
                chain,
            })
        }
        Plan::Difficulty { values, .. } => {
            let runs = run_all(&plan.configs())?;
            let rows = values
                .iter()
                .zip(runs)
                .map(|(&d, m)| DifficultyRow {
                    difficulty: d,
                    blocks: m.blocks.len(),
                    median_iterations: m.winner_iterations.median,
                    mean_iterations: m.winner_iterations.mean,
                    min_iterations: m.winner_iterations.min,
                    max_iterations: m.winner_iterations.max,
                    median_interval: m.interval.median,
                })
                .collect();
            Ok(Outcome::Difficulty(DifficultyCurve {
                schema: FIG6_SCHEMA.into(),
                seed: base.seed,
                rows,
            }))
        }
        Plan::Alpha { alphas, .. } => {
            let runs = run_all(&plan.configs())?;
            let rows: Vec<RevenueRow> = alphas
                .iter()
                .zip(runs)
                .map(|(&alpha, m)| {
                    let share = m.adversary_share.unwrap_or(0.0);
                    RevenueRow {
                        alpha,
                        share,
                        excess: share - alpha,
                        blocks: m.blocks.len(),
                        stale_blocks: m.stale_blocks,
                    }
                })
                .collect();
            Ok(Outcome::Revenue(RevenueCurve {
                schema: REVENUE_SCHEMA.into(),
                seed: base.seed,
                mode: base.schedule.mode,
                gamma: base.adversary.gamma,
                crossing: fairness_crossing(&rows),
                rows,
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::config(
                "format",
                format!("unknown format `{s}`, expected json or csv"),
            )),
        }
    }
}

/// Flatten a summary into `(section, key, value)` rows.
pub fn summary_rows(m: &SimMetrics) -> Vec<[String; 3]> {
    let mut rows = Vec::new();
    let mut push = |section: &str, key: &str, value: String| rows.push([section.to_string(), key.to_string(), value]);
    push("run", "schema", m.schema.clone());
    push("run", "seed", m.seed.to_string());
    push("run", "ticks", m.ticks.to_string());
    push("run", "tasks", m.tasks.to_string());
    push("run", "blocks", m.blocks.len().to_string());
    push("run", "blocks_mined", m.blocks_mined.to_string());
    push("run", "stale_blocks", m.stale_blocks.to_string());
    for (j, v) in m.type_mean_sv.iter().enumerate() {
        push("type_mean_sv", &format!("T{j}"), v.to_string());
    }
    for (j, v) in m.type_sv_se.iter().flatten().enumerate() {
        push("type_sv_se", &format!("T{j}"), v.to_string());
    }
    for (j, v) in m.type_exact_sv.iter().flatten().enumerate() {
        push("type_exact_sv", &format!("T{j}"), v.to_string());
    }
    for (k, v) in &m.revenue {
        push("revenue", k, v.to_string());
    }
    if let Some(a) = m.adversary_share {
        push("revenue", "adversary_share", a.to_string());
    }
    for (name, s) in [("interval", &m.interval), ("winner_iterations", &m.winner_iterations)] {
        push(name, "count", s.count.to_string());
        push(name, "mean", s.mean.to_string());
        push(name, "median", s.median.to_string());
        push(name, "min", s.min.to_string());
        push(name, "max", s.max.to_string());
    }
    let v = &m.verification;
    for (k, x) in [
        ("checked", v.checked),
        ("passed", v.passed),
        ("structural", v.structural),
        ("winner_distance", v.winner_distance),
        ("aggregate_distance", v.aggregate_distance),
        ("stale", v.stale),
        ("readmitted", v.readmitted),
    ] {
        push("verification", k, x.to_string());
    }
    let c = &m.conservation;
    push("conservation", "deposits", c.deposits.to_string());
    push("conservation", "supply", c.supply.to_string());
    push("conservation", "server_balance", c.server_balance.to_string());
    push("conservation", "client_payouts", c.client_payouts.to_string());
    push("conservation", "winner_net", c.winner_net.to_string());
    push("conservation", "holds", c.holds.to_string());
    push("conservation", "payouts_match", c.payouts_match.to_string());
    for (k, v) in &m.client_payouts {
        push("client_payouts", k, v.to_string());
    }
    rows
}

fn create(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)?;
    written.push(path);
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(mut out: impl Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Write an outcome's files into `dir`, creating it if needed. Returns the
/// paths written.
///
/// Single runs produce `blocks.jsonl`, `summary.<fmt>`, `chain.jsonl` and
/// `chain.digests`; difficulty sweeps `fig6.<fmt>`; revenue sweeps
/// `revenue.<fmt>`.
pub fn write_artifacts(outcome: &Outcome, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match outcome {
        Outcome::Single { metrics, chain } => {
            let mut out = create(dir, "blocks.jsonl", &mut written)?;
            for r in &metrics.blocks {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            let out = create(dir, &format!("summary.{}", format.ext()), &mut written)?;
            match format {
                Format::Json => write_json(out, metrics)?,
                Format::Csv => {
                    let mut rows = vec![["section".to_string(), "key".into(), "value".into()]];
                    rows.extend(summary_rows(metrics));
                    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
                    for r in rows {
                        w.write_record(&r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
                    }
                    w.flush()?;
                }
            }
            let mut out = create(dir, "chain.jsonl", &mut written)?;
            write_chain(&mut out, chain)?;
            out.flush()?;
            let mut out = create(dir, "chain.digests", &mut written)?;
            write_digests(&mut out, chain)?;
            out.flush()?;
        }
        Outcome::Difficulty(curve) => {
            let out = create(dir, &format!("fig6.{}", format.ext()), &mut written)?;
            match format {
                Format::Json => write_json(out, curve)?,
                Format::Csv => write_csv(out, &curve.rows)?,
            }
        }
        Outcome::Revenue(curve) => {
            let out = create(dir, &format!("revenue.{}", format.ext()), &mut written)?;
            match format {
                Format::Json => write_json(out, curve)?,
                Format::Csv => write_csv(out, &curve.rows)?,
            }
        }
    }
    Ok(written)
}
