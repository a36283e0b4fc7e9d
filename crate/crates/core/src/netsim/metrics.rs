use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Found, Prepared, SimConfig};
use crate::consensus::VerifyStats;
use crate::ledger::{replay, total_deposits, total_supply, Accounts, Amount, Block, Hash32, TxKind};

pub const BLOCK_SCHEMA: &str = "fedcoin.block/1";
pub const SUMMARY_SCHEMA: &str = "fedcoin.summary/1";

/// One main-chain block as written to `blocks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub schema: String,
    pub height: u64,
    pub hash: Hash32,
    pub prev_hash: Hash32,
    pub task: u64,
    pub winner: String,
    pub winner_iterations: u64,
    pub difficulty: f64,
    pub found_at: u64,
    pub interval: u64,
    pub averaged_s: Vec<f64>,
    pub winner_s: Vec<f64>,
    pub train_paid: Amount,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Stats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub deposits: Amount,
    pub supply: Amount,
    pub server_balance: Amount,
    pub client_payouts: Amount,
    pub winner_net: Amount,
    /// Supply equals deposits and the tip state equals a fresh replay.
    pub holds: bool,
    /// Every block pays its clients exactly its TrainPrice (or nothing when
    /// no client contributed positively) and the winner train + sap.
    pub payouts_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub schema: String,
    pub seed: u64,
    pub ticks: u64,
    pub tasks: u64,
    #[serde(skip)]
    pub blocks: Vec<BlockRecord>,
    pub blocks_mined: u64,
    pub stale_blocks: u64,
    pub verification: VerifyStats,
    pub revenue: BTreeMap<String, f64>,
    pub adversary_share: Option<f64>,
    pub client_payouts: BTreeMap<String, Amount>,
    pub client_types: Vec<usize>,
    /// Mean of `S̄` over blocks and over the clients of each type.
    pub type_mean_sv: Vec<f64>,
    /// Monte-Carlo standard error of each type mean, when estimable.
    pub type_sv_se: Option<Vec<f64>>,
    /// Exact Shapley values averaged the same way, when computed.
    pub type_exact_sv: Option<Vec<f64>>,
    pub interval: Stats,
    pub winner_iterations: Stats,
    pub conservation: Conservation,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn collect(
    cfg: &SimConfig,
    prep: &Prepared,
    chain: &[Block],
    accounts: &Accounts,
    found: &HashMap<Hash32, Found>,
    mined: u64,
    ticks: u64,
    verification: VerifyStats,
) -> SimMetrics {
    let mut records = Vec::new();
    let mut prev_time = 0;
    for b in chain.iter().skip(1) {
        let f = found.get(&b.hash());
        let time = f.map_or(prev_time, |f| f.time);
        let train_paid = b
            .transactions
            .iter()
            .filter(|t| t.kind == TxKind::TrainPayout)
            .map(|t| t.amount)
            .sum();
        records.push(BlockRecord {
            schema: BLOCK_SCHEMA.into(),
            height: b.height(),
            hash: b.hash(),
            prev_hash: b.header.prev_hash,
            task: b.task.as_ref().map_or(0, |t| t.id),
            winner: b.header.winner.to_string(),
            winner_iterations: b.winner_iterations,
            difficulty: b.header.difficulty,
            found_at: time,
            interval: time - prev_time,
            averaged_s: b.header.averaged_s.clone(),
            winner_s: b.header.winner_s.clone(),
            train_paid,
        });
        prev_time = time;
    }
    let n_blocks = records.len();

    let mut wins: BTreeMap<String, u64> = BTreeMap::new();
    for r in &records {
        *wins.entry(r.winner.clone()).or_default() += 1;
    }
    let revenue: BTreeMap<String, f64> = wins
        .iter()
        .map(|(k, v)| (k.clone(), *v as f64 / n_blocks.max(1) as f64))
        .collect();
    let adversary_share = cfg
        .selfish()
        .then(|| revenue.get(super::pool_account().as_str()).copied().unwrap_or(0.0));

    let types = &prep.client_types;
    let n_types = types.iter().max().map_or(0, |m| m + 1);
    let per_type = |vectors: &mut dyn Iterator<Item = &[f64]>| -> Vec<f64> {
        let mut sum = vec![0.0; n_types];
        let mut cnt = vec![0usize; n_types];
        for v in vectors {
            for (i, x) in v.iter().enumerate() {
                sum[types[i]] += x;
                cnt[types[i]] += 1;
            }
        }
        sum.iter().zip(&cnt).map(|(s, c)| s / (*c).max(1) as f64).collect()
    };
    let type_mean_sv = per_type(&mut records.iter().map(|r| r.averaged_s.as_slice()));
    let references: Option<Vec<&Vec<f64>>> = records
        .iter()
        .map(|r| prep.tasks[r.task as usize].reference.as_ref())
        .collect();
    let type_exact_sv = references
        .filter(|r| !r.is_empty())
        .map(|r| per_type(&mut r.iter().map(|v| v.as_slice())));
    let ses: Option<Vec<&Vec<f64>>> = chain
        .iter()
        .skip(1)
        .map(|b| found.get(&b.hash()).and_then(|f| f.standard_error.as_ref()))
        .collect();
    let type_sv_se = ses.filter(|s| !s.is_empty()).map(|ses| {
        let mut var = vec![0.0; n_types];
        let mut cnt = vec![0usize; n_types];
        for se in &ses {
            for (i, x) in se.iter().enumerate() {
                var[types[i]] += x * x;
                cnt[types[i]] += 1;
            }
        }
        var.iter()
            .zip(&cnt)
            .map(|(v, c)| v.sqrt() / (*c).max(1) as f64)
            .collect()
    });

    let intervals: Vec<f64> = records.iter().map(|r| r.interval as f64).collect();
    let iterations: Vec<f64> = records.iter().map(|r| r.winner_iterations as f64).collect();

    let client_payouts: BTreeMap<String, Amount> = (0..cfg.clients())
        .map(|i| {
            let id = crate::ledger::AccountId::client(i);
            let bal = accounts.get(&id).map_or(0, |a| a.balance);
            (id.0, bal)
        })
        .collect();

    let deposits = total_deposits(chain);
    let supply = total_supply(accounts);
    let replayed = replay(chain).ok();
    let server_balance = accounts
        .get(&crate::ledger::AccountId::server())
        .map_or(0, |a| a.balance);
    let paid: Amount = client_payouts.values().sum();
    let payouts_match = chain.iter().skip(1).all(|b| {
        let Some(task) = &b.task else { return false };
        let reward: Amount = b
            .transactions
            .iter()
            .filter(|t| t.kind == TxKind::BlockReward)
            .map(|t| t.amount)
            .sum();
        let train: Amount = b
            .transactions
            .iter()
            .filter(|t| t.kind == TxKind::TrainPayout)
            .map(|t| t.amount)
            .sum();
        let any_positive = b.header.averaged_s.iter().any(|&s| s > 0.0);
        reward == task.train_price + task.sap_price && train == if any_positive { task.train_price } else { 0 }
    });
    let conservation = Conservation {
        deposits,
        supply,
        server_balance,
        client_payouts: paid,
        winner_net: supply - server_balance - paid,
        holds: supply == deposits && replayed.as_ref() == Some(accounts),
        payouts_match,
    };

    SimMetrics {
        schema: SUMMARY_SCHEMA.into(),
        seed: cfg.seed,
        ticks,
        tasks: cfg.tasks(),
        blocks: records,
        blocks_mined: mined,
        stale_blocks: mined.saturating_sub(n_blocks as u64),
        verification,
        revenue,
        adversary_share,
        client_payouts,
        client_types: types.clone(),
        type_mean_sv,
        type_sv_se,
        type_exact_sv,
        interval: Stats::of(&intervals),
        winner_iterations: Stats::of(&iterations),
        conservation,
    }
}
