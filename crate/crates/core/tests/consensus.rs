mod common;

use std::sync::Arc;

use common::linf;
use fedcoin::consensus::*;
use fedcoin::ledger::{AccountId, Block, TxKind};
use fedcoin::netsim::{prepare, Prepared, SimConfig, UtilityKind};
use fedcoin::rng::stream_rng;

fn toy_prep(players: usize, rounds: u64) -> Prepared {
    let mut cfg = SimConfig::default();
    cfg.task.utility = UtilityKind::Toy;
    cfg.task.players = players;
    cfg.economy.rounds = rounds;
    prepare(&cfg).unwrap()
}

fn miner(prep: &Prepared, id: usize, stream: u64, batch: u64, quorum: usize, d: f64) -> Miner {
    let cfg = MinerConfig {
        id,
        account: AccountId::miner(id),
        server: AccountId::server(),
        gossip_batch: batch,
        quorum,
        difficulty: DifficultyConfig {
            initial: d,
            ..Default::default()
        },
    };
    let mut m = Miner::new(cfg, prep.tasks.clone(), prep.genesis.clone(), stream_rng(99, stream)).unwrap();
    m.set_issued(prep.tasks.len() as u64);
    m
}

/// Run one miner alone (quorum 0) until it finalizes.
fn solo_block(prep: &Prepared, d: f64) -> (Miner, Block) {
    let mut m = miner(prep, 0, 0, 1, 0, d);
    loop {
        m.mine_step().unwrap();
        if let Some(b) = m.try_finalize().unwrap() {
            return (m, b);
        }
    }
}

#[test]
fn first_step_publishes() {
    let prep = toy_prep(4, 1);
    let mut m = miner(&prep, 0, 0, 1, 1, 1e-2);
    let msg = m.mine_step().unwrap().unwrap();
    assert_eq!(msg.estimate.iterations, 1);
    assert_eq!(msg.sender, 0);
    assert_eq!(msg.task, 0);
}

#[test]
fn gossip_is_batched() {
    let prep = toy_prep(4, 1);
    let mut m = miner(&prep, 0, 0, 5, 1, 1e-2);
    for _ in 0..4 {
        assert!(m.mine_step().unwrap().is_none());
    }
    assert_eq!(m.mine_step().unwrap().unwrap().estimate.iterations, 5);
}

#[test]
fn fl_estimate_after_2000_steps_is_close_to_exact() {
    let mut cfg = SimConfig::default();
    cfg.economy.rounds = 1;
    let prep = prepare(&cfg).unwrap();
    let exact = prep.tasks[0].reference.clone().unwrap();
    let mut m = miner(&prep, 0, 0, 1, 0, 1e-2);
    for _ in 0..2000 {
        m.mine_step().unwrap();
    }
    assert!(linf(&m.estimate().unwrap().values, &exact) < 0.05);
}

#[test]
fn no_peers_means_no_block() {
    let prep = toy_prep(4, 1);
    let mut m = miner(&prep, 0, 0, 1, 1, 1.0);
    for _ in 0..50 {
        m.mine_step().unwrap();
        assert!(m.try_finalize().unwrap().is_none());
    }
}

#[test]
fn single_miner_block_carries_own_estimate() {
    let prep = toy_prep(4, 1);
    let (m, b) = solo_block(&prep, 1e-2);
    assert_eq!(b.header.winner_s, b.header.averaged_s);
    assert_eq!(b.height(), 1);
    assert_eq!(m.chain().tip(), b.hash());
    assert_eq!(b.transactions[0].kind, TxKind::BlockReward);
}

#[test]
fn identical_miners_finalize_together_and_keep_first_received() {
    let prep = toy_prep(4, 1);
    let mut a = miner(&prep, 0, 7, 1, 1, 1e-6);
    let mut b = miner(&prep, 1, 7, 1, 1, 1e-6);
    let ga = a.mine_step().unwrap().unwrap();
    let gb = b.mine_step().unwrap().unwrap();
    assert_eq!(ga.estimate.values, gb.estimate.values);
    a.receive_gossip(gb);
    b.receive_gossip(ga);
    let ba = a.try_finalize().unwrap().expect("a finalizes");
    let bb = b.try_finalize().unwrap().expect("b finalizes");
    assert_eq!(ba.height(), bb.height());
    assert_ne!(ba.hash(), bb.hash());
    // Each already holds its own block; the other's arrives second.
    assert_eq!(a.receive_block(bb.clone()), Reception::Accepted { tip_changed: false });
    assert_eq!(b.receive_block(ba.clone()), Reception::Accepted { tip_changed: false });
    assert_eq!(a.chain().tip(), ba.hash());
    assert_eq!(b.chain().tip(), bb.hash());
}

fn honest_block() -> (Block, Vec<f64>, f64) {
    let prep = toy_prep(5, 2);
    let d = 0.05;
    let (m, b) = solo_block(&prep, d);
    let s_bar = m.local_s_bar(0).unwrap();
    (b, s_bar, d)
}

#[test]
fn honest_block_verifies() {
    let (b, s_bar, d) = honest_block();
    assert_eq!(verify_block(&b, Some(&s_bar), d, 0), Verdict::Valid);
    assert_eq!(verify_block(&b, None, d, 1), Verdict::Valid);
    let same = b.clone();
    let _ = verify_block(&b, Some(&[9.0; 5]), d, 7);
    assert_eq!(b, same);
}

#[test]
fn tampered_payout_is_structural() {
    let (mut b, s_bar, d) = honest_block();
    let i = b
        .transactions
        .iter()
        .position(|t| t.kind == TxKind::TrainPayout)
        .unwrap();
    b.transactions[i].amount += 1;
    let v = verify_block(&b, Some(&s_bar), d, 0);
    assert!(matches!(v, Verdict::Structural(ref m) if m.contains("merkle")), "{v}");
    assert_eq!(v.condition(), None);
}

#[test]
fn tampered_header_is_structural() {
    let (mut b, s_bar, d) = honest_block();
    b.header.merkle_root.0[0] ^= 1;
    assert!(matches!(verify_block(&b, Some(&s_bar), d, 0), Verdict::Structural(_)));
    let (mut b, s_bar, d) = honest_block();
    b.header.averaged_s.pop();
    assert!(matches!(verify_block(&b, Some(&s_bar), d, 0), Verdict::Structural(_)));
}

#[test]
fn winner_far_from_average_fails_condition_one() {
    let (mut b, s_bar, d) = honest_block();
    b.header.winner_s = b.header.averaged_s.clone();
    b.header.winner_s[0] += 2.0 * d;
    assert_eq!(verify_block(&b, Some(&s_bar), d, 0).condition(), Some(1));
}

#[test]
fn local_average_far_from_block_fails_condition_two() {
    let (b, _, d) = honest_block();
    // L2 distance exactly 2D from the block's averaged S.
    let mut s_bar = b.header.averaged_s.clone();
    s_bar[1] += 2.0 * d;
    let v = verify_block(&b, Some(&s_bar), d, 0);
    assert_eq!(v.condition(), Some(2), "{v}");
}

#[test]
fn stale_height_fails_condition_three() {
    let (b, s_bar, d) = honest_block();
    let v = verify_block(&b, Some(&s_bar), d, b.height() + 1);
    assert_eq!(v, Verdict::Stale { height: 1, longest: 2 });
    assert_eq!(v.condition(), Some(3));
}

#[test]
fn rejected_block_leaves_chain_untouched() {
    let prep = toy_prep(5, 2);
    let (_, mut b) = solo_block(&prep, 0.05);
    b.header.winner_s[0] += 1.0;
    let mut other = miner(&prep, 1, 3, 1, 1, 0.05);
    let before = other.chain().tip();
    assert!(matches!(other.receive_block(b), Reception::Rejected(v) if v.condition() == Some(1)));
    assert_eq!(other.chain().tip(), before);
    assert_eq!(other.chain().len(), 1);
}

#[test]
fn retarget_examples() {
    assert_eq!(retarget_difficulty(0.01, &[500, 500], 500), 0.01);
    assert_eq!(retarget_difficulty(0.01, &[1000, 1000], 500), 0.02);
    assert_eq!(retarget_difficulty(0.01, &[50, 50], 500), 0.0025);
    assert_eq!(retarget_difficulty(0.01, &[100_000], 500), 0.04);
    assert_eq!(retarget_difficulty(0.01, &[], 500), 0.01);
}

#[test]
fn tasks_are_shared_not_copied() {
    let prep = toy_prep(4, 3);
    let m = miner(&prep, 0, 0, 1, 1, 1e-2);
    assert!(Arc::ptr_eq(&m.task(2).unwrap().utility, &prep.tasks[2].utility));
}
