//! Proof-of-Shapley mining and block verification.
//!
//! A miner samples permutations of the current task's clients, folds the
//! marginal vectors into a running mean and gossips `(S, time)` to its
//! peers. Once its published estimate lies within distance `D` of the
//! iteration-weighted network average `S̄` it assembles a block. Smaller `D`
//! means a tighter match and more sampling work.
//!
//! Block `h` settles task `h - 1`, so a miner always works on the task whose
//! id equals its tip height, provided the server has issued it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::economy::{settle_block, RoundPrice};
use crate::error::{Error, Result};
use crate::ledger::{merkle_root, AccountId, Block, BlockHeader, ChainState, Hash32, TaskRecord};
use crate::rng::SimRng;
use crate::shapley::{lp_distance, merge_estimates, posap_iteration, CoalitionUtility, ShapleyEstimate};

/// One valuation task: the on-chain record plus the utility miners sample.
#[derive(Clone)]
pub struct TaskSpec {
    pub record: TaskRecord,
    pub utility: Arc<dyn CoalitionUtility>,
    /// Exact Shapley values when they were affordable to compute.
    pub reference: Option<Vec<f64>>,
}

impl TaskSpec {
    pub fn id(&self) -> u64 {
        self.record.id
    }

    pub fn k(&self) -> usize {
        self.record.clients.len()
    }

    pub fn price(&self) -> RoundPrice {
        RoundPrice {
            train: self.record.train_price,
            sap: self.record.sap_price,
        }
    }
}

impl fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSpec")
            .field("record", &self.record)
            .field("utility", &self.utility.describe())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipMsg {
    pub sender: usize,
    pub task: u64,
    pub estimate: ShapleyEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyConfig {
    pub initial: f64,
    pub retarget: bool,
    pub target_iters: u64,
    pub window: u64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            initial: 1e-2,
            retarget: false,
            target_iters: 500,
            window: 10,
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            return Err(Error::config("difficulty.initial", "must be a positive number"));
        }
        if self.retarget && (self.target_iters == 0 || self.window == 0) {
            return Err(Error::config(
                "difficulty",
                "target_iters and window must be positive when retargeting",
            ));
        }
        Ok(())
    }
}

/// Multiplicative retarget: `D * clamp(mean / target, 1/4, 4)`. Slow blocks
/// (many iterations) loosen the bound, fast blocks tighten it.
pub fn retarget_difficulty(d: f64, history: &[u64], target_iters: u64) -> f64 {
    if history.is_empty() || target_iters == 0 {
        return d;
    }
    let mean = history.iter().sum::<u64>() as f64 / history.len() as f64;
    d * (mean / target_iters as f64).clamp(0.25, 4.0)
}

/// Difficulty a child of `parent` must meet. It depends only on the
/// parent's ancestry, so every node agrees on it for a given branch.
pub fn difficulty_for_child(chain: &ChainState, parent: &Hash32, cfg: &DifficultyConfig) -> f64 {
    let Some(p) = chain.get(parent) else {
        return cfg.initial;
    };
    if p.height() == 0 || !cfg.retarget {
        return cfg.initial;
    }
    let d = p.header.difficulty;
    let n = p.height() + 1;
    if (n - 1) % cfg.window != 0 {
        return d;
    }
    let mut history = Vec::with_capacity(cfg.window as usize);
    let mut cur = p.clone();
    while cur.height() > 0 && (history.len() as u64) < cfg.window {
        history.push(cur.winner_iterations);
        match chain.get(&cur.header.prev_hash) {
            Some(b) => cur = b.clone(),
            None => break,
        }
    }
    retarget_difficulty(d, &history, cfg.target_iters)
}

/// Outcome of checking a block against the three acceptance conditions.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Valid,
    Structural(String),
    /// Condition 1: the winner's estimate is too far from the block's `S̄`.
    WinnerDistance {
        distance: f64,
        bound: f64,
    },
    /// Condition 2: the verifier's own `S̄` is too far from the block's.
    AggregateDistance {
        distance: f64,
        bound: f64,
    },
    /// Condition 3: the block does not reach the verifier's chain length.
    Stale {
        height: u64,
        longest: u64,
    },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }

    /// Number of the failed condition, if a condition failed.
    pub fn condition(&self) -> Option<u8> {
        match self {
            Verdict::WinnerDistance { .. } => Some(1),
            Verdict::AggregateDistance { .. } => Some(2),
            Verdict::Stale { .. } => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Valid => f.write_str("valid"),
            Verdict::Structural(m) => write!(f, "malformed: {m}"),
            Verdict::WinnerDistance { distance, bound } => {
                write!(f, "condition 1: |S - S̄| = {distance:.3e} > {bound:.3e}")
            }
            Verdict::AggregateDistance { distance, bound } => {
                write!(f, "condition 2: |S̄_local - S̄| = {distance:.3e} > {bound:.3e}")
            }
            Verdict::Stale { height, longest } => {
                write!(f, "condition 3: height {height} < chain length {longest}")
            }
        }
    }
}

/// Check `blk` against a verifier's local view. `local_s_bar` is `None`
/// when the verifier holds no estimates for the block's task, in which case
/// condition 2 has nothing to compare against and holds. Never mutates
/// anything.
pub fn verify_block(blk: &Block, local_s_bar: Option<&[f64]>, local_d: f64, longest: u64) -> Verdict {
    if let Err(e) = blk.check_structure() {
        return Verdict::Structural(e.to_string());
    }
    let Some(task) = &blk.task else {
        return Verdict::Structural("block carries no task".into());
    };
    let p = task.norm_p;
    let h = &blk.header;
    let d1 = match lp_distance(&h.winner_s, &h.averaged_s, p) {
        Ok(d) => d,
        Err(e) => return Verdict::Structural(e.to_string()),
    };
    if !(d1 <= local_d) {
        return Verdict::WinnerDistance {
            distance: d1,
            bound: local_d,
        };
    }
    if let Some(local) = local_s_bar {
        let d2 = match lp_distance(local, &h.averaged_s, p) {
            Ok(d) => d,
            Err(e) => return Verdict::Structural(e.to_string()),
        };
        if !(d2 <= local_d) {
            return Verdict::AggregateDistance {
                distance: d2,
                bound: local_d,
            };
        }
    }
    if h.height < longest {
        return Verdict::Stale {
            height: h.height,
            longest,
        };
    }
    Verdict::Valid
}

/// Build a block on `parent` settling `task`, paying out by `averaged_s`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_block(
    chain: &ChainState,
    parent: &Hash32,
    task: &TaskSpec,
    winner: &AccountId,
    server: &AccountId,
    winner_s: Vec<f64>,
    averaged_s: Vec<f64>,
    difficulty: f64,
    iterations: u64,
) -> Result<Block> {
    let parent_block = chain
        .get(parent)
        .ok_or_else(|| Error::invalid(format!("unknown parent {parent}")))?;
    let accounts = chain.accounts_at(parent).expect("stored block has state");
    let txs = settle_block(
        winner,
        &averaged_s,
        task.price(),
        &task.record.clients,
        server,
        accounts,
    )?;
    Ok(Block {
        header: BlockHeader {
            height: parent_block.height() + 1,
            winner: winner.clone(),
            averaged_s,
            prev_hash: *parent,
            winner_s,
            difficulty,
            merkle_root: merkle_root(&txs),
        },
        task: Some(task.record.clone()),
        transactions: txs,
        winner_iterations: iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinerConfig {
    pub id: usize,
    pub account: AccountId,
    pub server: AccountId,
    /// Publish the estimate every `gossip_batch` iterations.
    pub gossip_batch: u64,
    /// Peers whose estimate must be in hand before finalizing.
    pub quorum: usize,
    pub difficulty: DifficultyConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub checked: u64,
    pub passed: u64,
    pub structural: u64,
    pub winner_distance: u64,
    pub aggregate_distance: u64,
    pub stale: u64,
    pub readmitted: u64,
}

impl VerifyStats {
    fn record(&mut self, v: &Verdict) {
        self.checked += 1;
        match v {
            Verdict::Valid => self.passed += 1,
            Verdict::Structural(_) => self.structural += 1,
            Verdict::WinnerDistance { .. } => self.winner_distance += 1,
            Verdict::AggregateDistance { .. } => self.aggregate_distance += 1,
            Verdict::Stale { .. } => self.stale += 1,
        }
    }

    pub fn merge(&mut self, o: &VerifyStats) {
        self.checked += o.checked;
        self.passed += o.passed;
        self.structural += o.structural;
        self.winner_distance += o.winner_distance;
        self.aggregate_distance += o.aggregate_distance;
        self.stale += o.stale;
        self.readmitted += o.readmitted;
    }
}

/// What a node did with a received block.
#[derive(Debug, Clone, PartialEq)]
pub enum Reception {
    Accepted {
        tip_changed: bool,
    },
    /// Failed verification. Stale blocks are still kept as side branches so
    /// that their descendants can connect.
    Rejected(Verdict),
    Orphaned,
    Known,
}

#[derive(Debug, Clone)]
struct Work {
    task: u64,
    own: ShapleyEstimate,
    published: Option<ShapleyEstimate>,
    difficulty: f64,
}

const TASK_STREAM_BITS: u32 = 40;

/// One miner's state: chain view, current estimate and peer estimates.
pub struct Miner {
    cfg: MinerConfig,
    tasks: Arc<Vec<TaskSpec>>,
    issued: u64,
    chain: ChainState,
    rng: SimRng,
    work: Option<Work>,
    peers: BTreeMap<u64, BTreeMap<usize, ShapleyEstimate>>,
    past: BTreeMap<u64, Vec<f64>>,
    rejected: HashMap<Hash32, Block>,
    stats: VerifyStats,
    last_se: Option<Vec<f64>>,
}

impl Miner {
    pub fn new(cfg: MinerConfig, tasks: Arc<Vec<TaskSpec>>, genesis: Block, rng: SimRng) -> Result<Self> {
        Ok(Miner {
            cfg,
            tasks,
            issued: 0,
            chain: ChainState::new(genesis)?,
            rng,
            work: None,
            peers: BTreeMap::new(),
            past: BTreeMap::new(),
            rejected: HashMap::new(),
            stats: VerifyStats::default(),
            last_se: None,
        })
    }

    pub fn id(&self) -> usize {
        self.cfg.id
    }

    pub fn account(&self) -> &AccountId {
        &self.cfg.account
    }

    pub fn chain(&self) -> &ChainState {
        &self.chain
    }

    pub fn stats(&self) -> &VerifyStats {
        &self.stats
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    /// Id of the task being mined, if any.
    pub fn current_task(&self) -> Option<u64> {
        self.work.as_ref().map(|w| w.task)
    }

    pub fn estimate(&self) -> Option<&ShapleyEstimate> {
        self.work.as_ref().map(|w| &w.own)
    }

    pub fn published(&self) -> Option<&ShapleyEstimate> {
        self.work.as_ref().and_then(|w| w.published.as_ref())
    }

    pub fn difficulty(&self) -> Option<f64> {
        self.work.as_ref().map(|w| w.difficulty)
    }

    /// Tasks with id below `n` may now be mined.
    pub fn set_issued(&mut self, n: u64) {
        if n > self.issued {
            self.issued = n.min(self.tasks.len() as u64);
            self.sync();
        }
    }

    fn sync(&mut self) {
        let want = self.chain.height();
        let want = (want < self.issued).then_some(want);
        if self.work.as_ref().map(|w| w.task) == want {
            return;
        }
        if let Some(old) = self.work.take() {
            if let Some(s_bar) = self.local_s_bar_for(old.task, old.published.as_ref()) {
                self.past.insert(old.task, s_bar);
            }
        }
        if let Some(task) = want {
            let k = self.tasks[task as usize].k();
            let difficulty = difficulty_for_child(&self.chain, &self.chain.tip(), &self.cfg.difficulty);
            // Each task samples from its own segment of the miner's stream,
            // independent of how long earlier tasks took.
            self.rng.set_word_pos((task as u128) << TASK_STREAM_BITS);
            self.work = Some(Work {
                task,
                own: ShapleyEstimate::new(k),
                published: None,
                difficulty,
            });
            // Estimates for tasks already behind us are no longer useful.
            self.peers = self.peers.split_off(&task);
            self.past = self.past.split_off(&task.saturating_sub(2));
        }
    }

    fn local_s_bar_for(&self, task: u64, own: Option<&ShapleyEstimate>) -> Option<Vec<f64>> {
        let mut all: Vec<&ShapleyEstimate> = Vec::new();
        let peers = self.peers.get(&task);
        let mut own = own;
        if let Some(peers) = peers {
            for (id, est) in peers {
                if let Some(o) = own {
                    if self.cfg.id < *id {
                        all.push(o);
                        own = None;
                    }
                }
                all.push(est);
            }
        }
        if let Some(o) = own {
            all.push(o);
        }
        merge_estimates(all).ok()
    }

    /// This node's current `S̄` for `task`.
    pub fn local_s_bar(&self, task: u64) -> Option<Vec<f64>> {
        match &self.work {
            Some(w) if w.task == task => self.local_s_bar_for(task, w.published.as_ref()),
            _ => self
                .past
                .get(&task)
                .cloned()
                .or_else(|| self.local_s_bar_for(task, None)),
        }
    }

    /// Run one sampling iteration. Returns the gossip message when the
    /// iteration closes a batch.
    pub fn mine_step(&mut self) -> Result<Option<GossipMsg>> {
        let Some(work) = self.work.as_mut() else {
            return Ok(None);
        };
        let task = &self.tasks[work.task as usize];
        let s_t = posap_iteration(&*task.utility, &mut self.rng)?;
        work.own = work.own.update(&s_t)?;
        if work.own.iterations % self.cfg.gossip_batch.max(1) != 0 {
            return Ok(None);
        }
        work.published = Some(work.own.clone());
        Ok(Some(GossipMsg {
            sender: self.cfg.id,
            task: work.task,
            estimate: work.own.clone(),
        }))
    }

    pub fn receive_gossip(&mut self, msg: GossipMsg) {
        if msg.sender == self.cfg.id || msg.estimate.iterations == 0 {
            return;
        }
        if let Some(w) = &self.work {
            if msg.task < w.task {
                return;
            }
        }
        let slot = self.peers.entry(msg.task).or_default();
        match slot.get(&msg.sender) {
            Some(old) if old.iterations >= msg.estimate.iterations => {}
            _ => {
                slot.insert(msg.sender, msg.estimate);
            }
        }
    }

    /// Produce a block if the published estimate has converged to within
    /// `D` of `S̄`. The block is applied to this miner's own chain.
    pub fn try_finalize(&mut self) -> Result<Option<Block>> {
        let Some(work) = &self.work else {
            return Ok(None);
        };
        let Some(own) = &work.published else {
            return Ok(None);
        };
        let heard = self.peers.get(&work.task).map_or(0, BTreeMap::len);
        if heard < self.cfg.quorum {
            return Ok(None);
        }
        let task = &self.tasks[work.task as usize];
        let s_bar = self
            .local_s_bar_for(work.task, Some(own))
            .expect("own estimate is present");
        let dist = lp_distance(&own.values, &s_bar, task.record.norm_p)?;
        if !(dist <= work.difficulty) {
            return Ok(None);
        }
        self.last_se = self.spread(work.task, own);
        let block = assemble_block(
            &self.chain,
            &self.chain.tip(),
            task,
            &self.cfg.account,
            &self.cfg.server,
            own.values.clone(),
            s_bar,
            work.difficulty,
            own.iterations,
        )?;
        self.adopt_own(block.clone())?;
        Ok(Some(block))
    }

    /// Standard error of `S̄` at the last finalization, estimated from the
    /// spread of the independent miner estimates it merged.
    pub fn last_standard_error(&self) -> Option<&[f64]> {
        self.last_se.as_deref()
    }

    fn spread(&self, task: u64, own: &ShapleyEstimate) -> Option<Vec<f64>> {
        let mut all = vec![&own.values];
        if let Some(p) = self.peers.get(&task) {
            all.extend(p.values().map(|e| &e.values));
        }
        let n = all.len();
        if n < 2 {
            return None;
        }
        let k = own.values.len();
        Some(
            (0..k)
                .map(|i| {
                    let mean = all.iter().map(|v| v[i]).sum::<f64>() / n as f64;
                    let var = all.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (var / n as f64).sqrt()
                })
                .collect(),
        )
    }

    /// Build a block for the current task with the given vectors, as a
    /// lottery-model miner does. Not applied to the chain.
    pub fn build_block(&self, winner_s: Vec<f64>, averaged_s: Vec<f64>, iterations: u64) -> Result<Option<Block>> {
        let Some(work) = &self.work else {
            return Ok(None);
        };
        let task = &self.tasks[work.task as usize];
        assemble_block(
            &self.chain,
            &self.chain.tip(),
            task,
            &self.cfg.account,
            &self.cfg.server,
            winner_s,
            averaged_s,
            work.difficulty,
            iterations,
        )
        .map(Some)
    }

    pub fn task(&self, id: u64) -> Option<&TaskSpec> {
        self.tasks.get(id as usize)
    }

    /// Store a block this miner produced itself.
    pub fn adopt_own(&mut self, block: Block) -> Result<()> {
        self.chain.apply_block(block)?;
        self.sync();
        Ok(())
    }

    /// Verify and store a block received from the network.
    pub fn receive_block(&mut self, block: Block) -> Reception {
        let hash = block.hash();
        if self.chain.contains(&hash) || self.rejected.contains_key(&hash) {
            return Reception::Known;
        }
        let parent = block.header.prev_hash;
        let local_d = if self.chain.contains(&parent) {
            difficulty_for_child(&self.chain, &parent, &self.cfg.difficulty)
        } else {
            self.work.as_ref().map_or(block.header.difficulty, |w| w.difficulty)
        };
        let task = block.task.as_ref().map(|t| t.id);
        let s_bar = task.and_then(|t| self.local_s_bar(t));
        let verdict = verify_block(&block, s_bar.as_deref(), local_d, self.chain.height());
        self.stats.record(&verdict);
        let out = match verdict {
            Verdict::Valid | Verdict::Stale { .. } => {
                // A descendant of blocks this node rejected means the rest of
                // the network accepted them; take them back.
                let mut back = Vec::new();
                let mut cur = parent;
                while let Some(b) = self.rejected.remove(&cur) {
                    cur = b.header.prev_hash;
                    back.push(b);
                }
                self.stats.readmitted += back.len() as u64;
                for b in back.into_iter().rev() {
                    let _ = self.chain.apply_block(b);
                }
                match self.chain.apply_block(block) {
                    Ok(acc) if verdict.is_valid() => Reception::Accepted {
                        tip_changed: acc.tip_changed,
                    },
                    Ok(_) => Reception::Rejected(verdict),
                    Err(Error::Orphan { .. }) => Reception::Orphaned,
                    Err(e) => Reception::Rejected(Verdict::Structural(e.to_string())),
                }
            }
            Verdict::Structural(_) => Reception::Rejected(verdict),
            Verdict::WinnerDistance { .. } | Verdict::AggregateDistance { .. } => {
                self.rejected.insert(hash, block);
                Reception::Rejected(verdict)
            }
        };
        self.sync();
        out
    }
}
