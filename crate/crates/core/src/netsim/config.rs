use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::DifficultyConfig;
use crate::error::{Error, Result};
use crate::flenv::FlConfig;
use crate::shapley::EXACT_MAX_PLAYERS;

/// Full description of one simulation run. Every field has a default, so a
/// config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub difficulty: DifficultyConfig,
    pub mining: MiningConfig,
    pub task: TaskConfig,
    pub fl: FlConfig,
    pub economy: EconomyConfig,
    pub schedule: ScheduleConfig,
    pub adversary: AdversaryConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 7,
            network: NetworkConfig::default(),
            difficulty: DifficultyConfig::default(),
            mining: MiningConfig::default(),
            task: TaskConfig::default(),
            fl: FlConfig::default(),
            economy: EconomyConfig::default(),
            schedule: ScheduleConfig::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Honest miners. A selfish pool, if any, is an extra actor.
    pub miners: usize,
    /// Base latency of every message, in ticks.
    pub delay: u64,
    /// Extra latency drawn uniformly from `0..=jitter` per message.
    pub jitter: u64,
    /// Iterations between two gossip messages of a miner.
    pub gossip_batch: u64,
    /// Fraction of the other miners whose estimate must be in hand before
    /// a miner may finalize.
    pub quorum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            miners: 10,
            delay: 0,
            jitter: 0,
            gossip_batch: 10,
            quorum: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningModel {
    /// Miners run the Shapley sampling loop.
    Posap,
    /// Block discovery is a memoryless lottery weighted by mining power;
    /// headers carry the exact Shapley values.
    Lottery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub model: MiningModel,
    /// Sampling iterations per tick of each honest miner.
    pub power: u64,
    /// Lottery model: mean ticks between blocks across the whole network.
    pub mean_interval: f64,
    /// Abort the run once the clock passes this many ticks.
    pub max_ticks: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            model: MiningModel::Posap,
            power: 1,
            mean_interval: 1000.0,
            max_ticks: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    /// Validation accuracy of the FedAvg model over the coalition.
    Fl,
    /// Unit-weight clients plus a unit bonus when clients 0 and 1 team up.
    Toy,
    /// Unit-weight clients.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub utility: UtilityKind,
    /// Client count for the synthetic games; the FL utility takes it from
    /// the `fl` section.
    pub players: usize,
    pub norm_p: f64,
    /// Compute exact Shapley values for each task (at most 12 clients).
    pub exact_reference: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            utility: UtilityKind::Fl,
            players: 10,
            norm_p: 2.0,
            exact_reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconomyConfig {
    pub requesters: usize,
    /// Budget of each requester, in whole coins.
    pub budget: u64,
    /// TrainPrice : ComPrice : SapPrice.
    pub ratio: [u64; 3],
    /// Training rounds bought by each requester; one task per round.
    pub rounds: u64,
    /// Relative price of each round. Empty means equal division.
    pub round_weights: Vec<u64>,
}

impl Default for EconomyConfig {
    fn default() -> Self {
        EconomyConfig {
            requesters: 1,
            budget: 1000,
            ratio: [7, 1, 2],
            rounds: 5,
            round_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// The next task is issued once the server's chain settles the previous.
    Sequential,
    /// All tasks are issued at the start.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mode: ScheduleMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Honest,
    Selfish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub strategy: Strategy,
    /// Share of total mining power held by the pool.
    pub alpha: f64,
    /// Share of honest mining power that builds on the pool's block in a
    /// tie.
    pub gamma: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            strategy: Strategy::Honest,
            alpha: 0.0,
            gamma: 0.5,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let located = |e: &toml::de::Error| {
            e.span().map_or_else(
                || "<root>".to_string(),
                |s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line}, column {col}")
                },
            )
        };
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config(located(&e), e.message()))?;
        let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = if path == "." { located(&inner) } else { path };
            Error::config(at, inner.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: at, reason } => Error::config(format!("{}: {at}", path.display()), reason),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn clients(&self) -> usize {
        match self.task.utility {
            UtilityKind::Fl => self.fl.clients(),
            _ => self.task.players,
        }
    }

    pub fn tasks(&self) -> u64 {
        self.economy.requesters as u64 * self.economy.rounds
    }

    pub fn selfish(&self) -> bool {
        self.adversary.strategy == Strategy::Selfish
    }

    /// Check every field, naming the first offending one.
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: &str| Err(Error::config(path, reason));
        if self.network.miners == 0 {
            return fail("network.miners", "at least one honest miner is required");
        }
        if self.network.gossip_batch == 0 {
            return fail("network.gossip_batch", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.network.quorum) {
            return fail("network.quorum", "must lie in [0, 1]");
        }
        self.difficulty.validate()?;
        if self.mining.power == 0 {
            return fail("mining.power", "must be at least 1");
        }
        if !(self.mining.mean_interval >= 1.0) {
            return fail("mining.mean_interval", "must be at least one tick");
        }
        if self.clients() == 0 {
            return fail("task.players", "at least one client is required");
        }
        if !(self.task.norm_p >= 1.0) {
            return fail("task.norm_p", "must be at least 1");
        }
        let need_exact = self.mining.model == MiningModel::Lottery;
        if (self.task.exact_reference || need_exact) && self.clients() > EXACT_MAX_PLAYERS {
            return fail(
                if need_exact {
                    "mining.model"
                } else {
                    "task.exact_reference"
                },
                "exact Shapley values need at most 12 clients",
            );
        }
        if self.economy.requesters == 0 || self.economy.rounds == 0 {
            return fail("economy", "requesters and rounds must be positive");
        }
        if self.economy.ratio.iter().all(|&r| r == 0) {
            return fail("economy.ratio", "must not be all zero");
        }
        if !self.economy.round_weights.is_empty() {
            if self.economy.round_weights.len() as u64 != self.economy.rounds {
                return fail("economy.round_weights", "needs one weight per round");
            }
            if self.economy.round_weights.iter().all(|&w| w == 0) {
                return fail("economy.round_weights", "must not be all zero");
            }
        }
        if self.economy.budget.checked_mul(crate::ledger::MICRO_PER_COIN).is_none() {
            return fail("economy.budget", "too large");
        }
        let a = &self.adversary;
        if !(0.0..=1.0).contains(&a.alpha) {
            return fail("adversary.alpha", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&a.gamma) {
            return fail("adversary.gamma", "must lie in [0, 1]");
        }
        if self.selfish() {
            if self.mining.model != MiningModel::Lottery {
                return fail("adversary.strategy", "selfish mining needs the lottery mining model");
            }
            if !(a.alpha > 0.0 && a.alpha < 1.0) {
                return fail("adversary.alpha", "a selfish pool needs power in (0, 1)");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_path(text: &str) -> String {
        match SimConfig::from_toml(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(SimConfig::from_toml("").unwrap(), SimConfig::default());
    }

    #[test]
    fn round_trips() {
        let mut cfg = SimConfig::default();
        cfg.network.delay = 3;
        cfg.adversary.gamma = 0.25;
        assert_eq!(SimConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(err_path("[network]\nminers = \"ten\"\n"), "network.miners");
        assert_eq!(err_path("[task]\nutility = \"cnn\"\n"), "task.utility");
        assert!(err_path("[network]\nspeed = 1\n").starts_with("network"));
        assert_eq!(err_path("[network]\nminers = 0\n"), "network.miners");
        assert_eq!(
            err_path("[adversary]\nstrategy = \"selfish\"\nalpha = 0.3\n"),
            "adversary.strategy"
        );
        assert_eq!(err_path("seed = \n"), "line 1, column 8");
    }
}
