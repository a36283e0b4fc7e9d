//! Deterministic discrete-event simulation of a FedCoin network.
//!
//! Time advances in ticks, one Shapley sampling iteration each. Events are
//! totally ordered by `(time, class, sequence)`. Within a tick, message
//! deliveries come first, then every miner checks convergence (in a seeded
//! random order), then every miner samples. A zero-latency message is
//! delivered before the next event of a later class. All randomness comes
//! from streams derived from the config seed.

pub mod adversary;
pub mod config;
pub mod metrics;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

pub use adversary::{AdversaryAction, AdversaryEvent, SelfishState};
pub use config::*;
pub use metrics::{BlockRecord, Conservation, SimMetrics, Stats};

use crate::consensus::{GossipMsg, Miner, MinerConfig, TaskSpec};
use crate::economy::{round_prices, split_budget};
use crate::error::{Error, Result};
use crate::flenv::{FlEnvironment, FlUtility};
use crate::ledger::{AccountId, Block, Hash32, TaskRecord, Transaction, TxKind, MICRO_PER_COIN};
use crate::rng::{stream_rng, SimRng, STREAM_NETWORK, STREAM_SCHEDULE};
use crate::shapley::games::SynergyGame;
use crate::shapley::{exact_shapley, CoalitionUtility, Memoized};

/// Tasks, genesis block and client types derived from a config.
pub struct Prepared {
    pub tasks: Arc<Vec<TaskSpec>>,
    pub genesis: Block,
    pub client_types: Vec<usize>,
}

/// Build the task list and the genesis deposits.
pub fn prepare(cfg: &SimConfig) -> Result<Prepared> {
    cfg.validate()?;
    let k = cfg.clients();
    let rounds = cfg.economy.rounds as usize;
    let (utilities, client_types): (Vec<Arc<dyn CoalitionUtility>>, Vec<usize>) = match cfg.task.utility {
        UtilityKind::Fl => {
            let env = FlEnvironment::build(cfg.seed, &cfg.fl)?;
            let types = (0..k).map(|i| env.type_of(i)).collect();
            let utils = env
                .rounds(rounds)?
                .into_iter()
                .map(|updates| {
                    let u = FlUtility::new(updates, env.valset.clone())?;
                    Ok(Arc::new(Memoized::new(u)) as Arc<dyn CoalitionUtility>)
                })
                .collect::<Result<Vec<_>>>()?;
            (utils, types)
        }
        UtilityKind::Toy => (vec![Arc::new(SynergyGame::toy(k))], (0..k).collect()),
        UtilityKind::Additive => (vec![Arc::new(SynergyGame::additive(vec![1.0; k]))], (0..k).collect()),
    };
    let need_exact = cfg.task.exact_reference || cfg.mining.model == MiningModel::Lottery;
    let references = utilities
        .iter()
        .map(|u| need_exact.then(|| exact_shapley(&**u)).transpose())
        .collect::<Result<Vec<_>>>()?;

    let budget = cfg.economy.budget * MICRO_PER_COIN;
    let split = split_budget(budget, cfg.economy.ratio)?;
    let weights = if cfg.economy.round_weights.is_empty() {
        vec![1; rounds]
    } else {
        cfg.economy.round_weights.clone()
    };
    let prices = round_prices(&split, &weights)?;
    let clients: Vec<AccountId> = (0..k).map(AccountId::client).collect();
    let q = cfg.economy.requesters;
    let tasks = (0..cfg.tasks())
        .map(|id| {
            let requester = (id % q as u64) as usize;
            let round = (id / q as u64) as usize;
            let which = round.min(utilities.len() - 1);
            TaskSpec {
                record: TaskRecord {
                    id,
                    requester: AccountId::requester(requester),
                    round: round as u32,
                    clients: clients.clone(),
                    train_price: prices[round].train,
                    sap_price: prices[round].sap,
                    norm_p: cfg.task.norm_p,
                    utility: utilities[which].describe(),
                },
                utility: utilities[which].clone(),
                reference: references[which].clone(),
            }
        })
        .collect();
    let deposits = (0..q)
        .map(|r| Transaction {
            from: AccountId::requester(r),
            to: AccountId::server(),
            amount: budget,
            nonce: 0,
            kind: TxKind::Deposit,
        })
        .collect();
    Ok(Prepared {
        tasks: Arc::new(tasks),
        genesis: Block::genesis(deposits),
        client_types,
    })
}

pub fn pool_account() -> AccountId {
    AccountId::new("pool")
}

// Event classes at equal times.
const PRIORITY: u8 = 0;
const DELIVERY: u8 = 1;
const STEP: u8 = 2;
const MINE: u8 = 3;

#[derive(Debug, Clone)]
enum Action {
    Gossip { to: usize, msg: Arc<GossipMsg> },
    Block { to: usize, block: Arc<Block> },
    Issue { to: usize, upto: u64 },
    Tick,
    Finalize(usize),
    Mine(usize),
    Find(usize),
}

#[derive(Debug)]
struct Event {
    key: (u64, u8, u64),
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.key == o.key
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.key.cmp(&o.key)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Found {
    pub time: u64,
    pub standard_error: Option<Vec<f64>>,
}

struct Sim {
    cfg: SimConfig,
    tasks: Arc<Vec<TaskSpec>>,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    /// Honest miners `0..honest`, then the pool (if any), then the server.
    nodes: Vec<Miner>,
    honest: usize,
    pool: Option<usize>,
    server: usize,
    selfish: Option<SelfishState>,
    net_rng: SimRng,
    sched_rng: SimRng,
    found: HashMap<Hash32, Found>,
    mined: u64,
    issued: u64,
    find_p: Vec<f64>,
    race_p: f64,
}

impl Sim {
    fn new(cfg: &SimConfig, prep: &Prepared) -> Result<Self> {
        let honest = cfg.network.miners;
        let selfish = cfg.selfish();
        let quorum = (cfg.network.quorum * (honest - 1) as f64).ceil() as usize;
        let make = |id: usize, account: AccountId, quorum: usize| {
            Miner::new(
                MinerConfig {
                    id,
                    account,
                    server: AccountId::server(),
                    gossip_batch: cfg.network.gossip_batch,
                    quorum,
                    difficulty: cfg.difficulty.clone(),
                },
                prep.tasks.clone(),
                prep.genesis.clone(),
                stream_rng(cfg.seed, id as u64),
            )
        };
        let mut nodes = (0..honest)
            .map(|i| make(i, AccountId::miner(i), quorum))
            .collect::<Result<Vec<_>>>()?;
        let pool = if selfish {
            nodes.push(make(honest, pool_account(), 0)?);
            Some(honest)
        } else {
            None
        };
        let server = nodes.len();
        nodes.push(make(server, AccountId::server(), usize::MAX)?);

        let alpha = if selfish { cfg.adversary.alpha } else { 0.0 };
        let mut find_p = vec![(1.0 - alpha) / honest as f64 / cfg.mining.mean_interval; honest];
        if selfish {
            find_p.push(alpha / cfg.mining.mean_interval);
        }
        // The finder of the contested honest block always keeps it, so the
        // other honest miners side with the pool a little more often to
        // make the pool's expected share of honest power equal gamma.
        let race_p = if honest > 1 {
            (cfg.adversary.gamma * honest as f64 / (honest - 1) as f64).min(1.0)
        } else {
            cfg.adversary.gamma
        };
        Ok(Sim {
            cfg: cfg.clone(),
            tasks: prep.tasks.clone(),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            honest,
            pool,
            server,
            selfish: pool.map(|_| SelfishState::new(0)),
            net_rng: stream_rng(cfg.seed, STREAM_NETWORK),
            sched_rng: stream_rng(cfg.seed, STREAM_SCHEDULE),
            found: HashMap::new(),
            mined: 0,
            issued: 0,
            find_p,
            race_p,
        })
    }

    fn push(&mut self, time: u64, class: u8, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            key: (time, class, self.seq),
            action,
        }));
    }

    fn latency(&mut self) -> u64 {
        let j = self.cfg.network.jitter;
        self.cfg.network.delay + if j > 0 { self.net_rng.random_range(0..=j) } else { 0 }
    }

    fn miners(&self) -> impl Iterator<Item = usize> {
        0..self.honest + usize::from(self.pool.is_some())
    }

    fn issue(&mut self, upto: u64) {
        let upto = upto.min(self.tasks.len() as u64);
        if upto <= self.issued {
            return;
        }
        self.issued = upto;
        for to in self.miners() {
            let at = self.now + self.latency();
            self.push(at, DELIVERY, Action::Issue { to, upto });
        }
    }

    /// Send `block` from `from` to every node except `from` and the pool.
    fn broadcast_block(&mut self, from: usize, block: &Arc<Block>) {
        for to in 0..self.nodes.len() {
            if to == from || Some(to) == self.pool {
                continue;
            }
            let at = self.now + self.latency();
            self.push(
                at,
                DELIVERY,
                Action::Block {
                    to,
                    block: block.clone(),
                },
            );
        }
    }

    fn record_found(&mut self, block: &Block, standard_error: Option<Vec<f64>>) {
        self.mined += 1;
        self.found.insert(
            block.hash(),
            Found {
                time: self.now,
                standard_error,
            },
        );
    }

    fn deliver_block(&mut self, to: usize, block: Block) {
        let before = self.nodes[to].chain().height();
        self.nodes[to].receive_block(block);
        if to == self.server
            && self.cfg.schedule.mode == ScheduleMode::Sequential
            && self.nodes[to].chain().height() > before
        {
            let h = self.nodes[to].chain().height();
            self.issue(h + 1);
        }
    }

    fn publish(&mut self, actions: Vec<AdversaryAction>, finder: Option<usize>) {
        let pool = self.pool.expect("pool exists");
        for AdversaryAction::Publish { blocks, race } in actions {
            for to in 0..self.nodes.len() {
                if to == pool {
                    continue;
                }
                let class = if race && Some(to) != finder && self.net_rng.random::<f64>() < self.race_p {
                    PRIORITY
                } else {
                    DELIVERY
                };
                let at = self.now + self.latency();
                for b in &blocks {
                    self.push(
                        at,
                        class,
                        Action::Block {
                            to,
                            block: Arc::new(b.clone()),
                        },
                    );
                }
            }
        }
    }

    fn schedule_find(&mut self, node: usize) {
        let p = self.find_p[node];
        if p <= 0.0 {
            return;
        }
        let u: f64 = self.nodes[node].rng().random();
        let gap = if p >= 1.0 {
            0
        } else {
            ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
        };
        let at = self.now + 1 + gap;
        self.push(at, STEP, Action::Find(node));
    }

    fn finalize(&mut self, m: usize) -> Result<()> {
        if let Some(block) = self.nodes[m].try_finalize()? {
            let se = self.nodes[m].last_standard_error().map(<[f64]>::to_vec);
            self.record_found(&block, se);
            self.broadcast_block(m, &Arc::new(block));
        }
        Ok(())
    }

    fn mine(&mut self, m: usize) -> Result<()> {
        for _ in 0..self.cfg.mining.power {
            if let Some(msg) = self.nodes[m].mine_step()? {
                let msg = Arc::new(msg);
                for to in 0..self.honest {
                    if to != m {
                        let at = self.now + self.latency();
                        self.push(at, DELIVERY, Action::Gossip { to, msg: msg.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    fn find(&mut self, n: usize) -> Result<()> {
        self.schedule_find(n);
        let miner = &self.nodes[n];
        let Some(task) = miner.current_task() else {
            return Ok(());
        };
        let reference = self.tasks[task as usize]
            .reference
            .clone()
            .expect("lottery tasks carry exact values");
        let parent_time = self.found.get(&miner.chain().tip()).map_or(0, |f| f.time);
        let iterations = (self.now - parent_time) * self.cfg.mining.power;
        let Some(block) = miner.build_block(reference.clone(), reference, iterations)? else {
            return Ok(());
        };
        self.nodes[n].adopt_own(block.clone())?;
        self.record_found(&block, None);
        if Some(n) == self.pool {
            let actions = self
                .selfish
                .as_mut()
                .expect("pool has a strategy")
                .step(AdversaryEvent::Mined(block));
            self.publish(actions, None);
        } else {
            let height = block.height();
            let block = Arc::new(block);
            self.broadcast_block(n, &block);
            if let Some(pool) = self.pool {
                // The pool hears of honest blocks at once and may respond
                // before they propagate.
                self.nodes[pool].receive_block((*block).clone());
                let actions = self
                    .selfish
                    .as_mut()
                    .expect("pool has a strategy")
                    .step(AdversaryEvent::PublicBlock { height });
                self.publish(actions, Some(n));
            }
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.nodes[self.server].chain().height() >= self.tasks.len() as u64
    }

    fn run(&mut self) -> Result<()> {
        match self.cfg.schedule.mode {
            ScheduleMode::Sequential => self.issue(1),
            ScheduleMode::Parallel => self.issue(self.tasks.len() as u64),
        }
        match self.cfg.mining.model {
            MiningModel::Posap => self.push(0, STEP, Action::Tick),
            MiningModel::Lottery => {
                for n in self.miners().collect::<Vec<_>>() {
                    self.schedule_find(n);
                }
            }
        }
        while !self.done() {
            let Some(Reverse(ev)) = self.queue.pop() else {
                return Err(Error::ResourceLimit("event queue ran dry".into()));
            };
            self.now = ev.key.0;
            if self.now > self.cfg.mining.max_ticks {
                return Err(Error::ResourceLimit(format!(
                    "{} of {} tasks settled after {} ticks (mining.max_ticks)",
                    self.nodes[self.server].chain().height(),
                    self.tasks.len(),
                    self.cfg.mining.max_ticks
                )));
            }
            match ev.action {
                Action::Gossip { to, msg } => self.nodes[to].receive_gossip((*msg).clone()),
                Action::Block { to, block } => self.deliver_block(to, (*block).clone()),
                Action::Issue { to, upto } => self.nodes[to].set_issued(upto),
                Action::Tick => {
                    // Convergence checks first, in random order, then one
                    // round of sampling for everyone.
                    let mut order: Vec<usize> = (0..self.honest).collect();
                    order.shuffle(&mut self.sched_rng);
                    for m in order {
                        self.push(self.now, STEP, Action::Finalize(m));
                    }
                    for m in 0..self.honest {
                        self.push(self.now, MINE, Action::Mine(m));
                    }
                    self.push(self.now + 1, STEP, Action::Tick);
                }
                Action::Finalize(m) => self.finalize(m)?,
                Action::Mine(m) => self.mine(m)?,
                Action::Find(n) => self.find(n)?,
            }
        }
        Ok(())
    }
}

/// Run the configured network until the server's chain settles every task.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimMetrics> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

/// As [`run_simulation`], reusing tasks already built by [`prepare`].
pub fn run_prepared(cfg: &SimConfig, prep: &Prepared) -> Result<SimMetrics> {
    let (metrics, _) = run_with_chain(cfg, prep)?;
    Ok(metrics)
}

/// Run and also return the server's main chain, genesis first.
pub fn run_with_chain(cfg: &SimConfig, prep: &Prepared) -> Result<(SimMetrics, Vec<Block>)> {
    let mut sim = Sim::new(cfg, prep)?;
    sim.run()?;
    let server = &sim.nodes[sim.server];
    let chain: Vec<Block> = server.chain().main_chain().iter().map(|b| (**b).clone()).collect();
    let mut verification = server.stats().clone();
    for m in 0..sim.honest {
        verification.merge(sim.nodes[m].stats());
    }
    let metrics = metrics::collect(
        cfg,
        prep,
        &chain,
        server.chain().accounts(),
        &sim.found,
        sim.mined,
        sim.now,
        verification,
    );
    Ok((metrics, chain))
}
