//! Offline re-validation of a persisted chain.
//!
//! Every check runs over the whole chain and records each block it fails
//! at, so one corrupted block does not hide problems further along.
//! Condition 2 of block verification compares a verifier's own aggregate
//! with the block's; offline the only aggregate on record is the block's,
//! so it is not re-checked here.

use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::economy::{settle_block, RoundPrice};
use crate::error::Result;
use crate::ledger::{
    apply_transactions, read_chain, total_deposits, total_supply, AccountId, Accounts, Block, Hash32, TxKind,
};
use crate::shapley::lp_distance;

pub const CHECKS: [&str; 6] = [
    "structure",
    "linkage",
    "height",
    "winner-distance",
    "settlement",
    "conservation",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub height: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub failures: Vec<Failure>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Height of the first block this check failed at.
    pub fn first_failure(&self) -> Option<u64> {
        self.failures.first().map(|f| f.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub blocks: usize,
    pub checks: Vec<CheckResult>,
}

impl ChainReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ChainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} blocks", self.blocks)?;
        for c in &self.checks {
            match c.failures.first() {
                None => writeln!(f, "  {:<16} pass", c.name)?,
                Some(first) => writeln!(
                    f,
                    "  {:<16} FAIL at block {} ({} total): {}",
                    c.name,
                    first.height,
                    c.failures.len(),
                    first.reason
                )?,
            }
        }
        Ok(())
    }
}

/// Read and check a chain file. Decode errors carry the byte offset.
pub fn verify_chain_file<R: BufRead>(input: R) -> Result<ChainReport> {
    Ok(verify_chain(&read_chain(input)?))
}

/// Check a chain given genesis first.
pub fn verify_chain(blocks: &[Block]) -> ChainReport {
    let mut fails: Vec<Vec<Failure>> = vec![Vec::new(); CHECKS.len()];
    let mut fail = |check: usize, height: u64, reason: String| fails[check].push(Failure { height, reason });

    if blocks.is_empty() {
        fail(1, 0, "chain is empty".into());
    }
    let mut accounts = Accounts::new();
    let mut ledger_ok = true;
    let mut prev: Option<Hash32> = None;
    for (i, b) in blocks.iter().enumerate() {
        let h = b.height();
        if let Err(e) = b.check_structure() {
            fail(0, h, e.to_string());
        }

        let expect_prev = prev.unwrap_or(Hash32::ZERO);
        if b.header.prev_hash != expect_prev {
            fail(
                1,
                h,
                format!("prev_hash {} but parent digest is {}", b.header.prev_hash, expect_prev),
            );
        }
        prev = Some(b.hash());

        if h != i as u64 {
            fail(2, h, format!("block #{i} claims height {h}"));
        }
        if let Some(task) = &b.task {
            if task.id + 1 != h {
                fail(
                    2,
                    h,
                    format!("settles task {} instead of {}", task.id, h.wrapping_sub(1)),
                );
            }
            match lp_distance(&b.header.winner_s, &b.header.averaged_s, task.norm_p) {
                Ok(d) if d <= b.header.difficulty => {}
                Ok(d) => fail(3, h, format!("|S - S̄| = {d:.3e} > D = {:.3e}", b.header.difficulty)),
                Err(e) => fail(3, h, e.to_string()),
            }

            let reward: u64 = b
                .transactions
                .iter()
                .filter(|t| t.kind == TxKind::BlockReward)
                .map(|t| t.amount)
                .sum();
            let train: u64 = b
                .transactions
                .iter()
                .filter(|t| t.kind == TxKind::TrainPayout)
                .map(|t| t.amount)
                .sum();
            let any_positive = b.header.averaged_s.iter().any(|&s| s > 0.0);
            if reward != task.train_price + task.sap_price {
                fail(
                    5,
                    h,
                    format!("reward {reward} != train + sap {}", task.train_price + task.sap_price),
                );
            }
            if any_positive && train != task.train_price {
                fail(
                    5,
                    h,
                    format!("client payouts {train} != train price {}", task.train_price),
                );
            }

            if ledger_ok {
                match settle_block(
                    &b.header.winner,
                    &b.header.averaged_s,
                    RoundPrice {
                        train: task.train_price,
                        sap: task.sap_price,
                    },
                    &task.clients,
                    &AccountId::server(),
                    &accounts,
                ) {
                    Ok(expected) if expected == b.transactions => {}
                    Ok(_) => fail(4, h, "transactions differ from the settlement of the recorded S̄".into()),
                    Err(e) => fail(4, h, e.to_string()),
                }
            }
        } else if h != 0 {
            fail(2, h, "block settles no task".into());
        }

        if ledger_ok {
            if let Err(e) = apply_transactions(&mut accounts, b) {
                fail(5, h, e.to_string());
                ledger_ok = false;
            }
        }
    }
    if ledger_ok && !blocks.is_empty() {
        let supply = total_supply(&accounts);
        let deposits = total_deposits(blocks);
        if supply != deposits {
            let h = blocks.last().map_or(0, Block::height);
            fail(5, h, format!("supply {supply} != deposits {deposits}"));
        }
    }

    ChainReport {
        blocks: blocks.len(),
        checks: CHECKS
            .iter()
            .zip(fails)
            .map(|(name, failures)| CheckResult {
                name: name.to_string(),
                failures,
            })
            .collect(),
    }
}
