use fedcoin::economy::{settle_block, RoundPrice};
use fedcoin::ledger::*;
use fedcoin::Error;
use proptest::prelude::*;

const K: usize = 4;

fn deposits(requesters: usize, amount: Amount) -> Vec<Transaction> {
    (0..requesters)
        .map(|r| Transaction {
            from: AccountId::requester(r),
            to: AccountId::server(),
            amount,
            nonce: 0,
            kind: TxKind::Deposit,
        })
        .collect()
}

fn settle(chain: &ChainState, parent: &Hash32, winner: usize, s_bar: Vec<f64>, price: RoundPrice) -> Block {
    let p = chain.get(parent).unwrap();
    let clients: Vec<AccountId> = (0..K).map(AccountId::client).collect();
    let winner = AccountId::miner(winner);
    let txs = settle_block(
        &winner,
        &s_bar,
        price,
        &clients,
        &AccountId::server(),
        chain.accounts_at(parent).unwrap(),
    )
    .unwrap();
    Block {
        header: BlockHeader {
            height: p.height() + 1,
            winner,
            averaged_s: s_bar.clone(),
            prev_hash: *parent,
            winner_s: s_bar,
            difficulty: 1e-2,
            merkle_root: merkle_root(&txs),
        },
        task: Some(TaskRecord {
            id: p.height(),
            requester: AccountId::requester(0),
            round: p.height() as u32,
            clients,
            train_price: price.train,
            sap_price: price.sap,
            norm_p: 2.0,
            utility: "test".into(),
        }),
        transactions: txs,
        winner_iterations: 1,
    }
}

fn step() -> impl Strategy<Value = (usize, Vec<f64>, u64, u64, bool)> {
    (
        0usize..3,
        prop::collection::vec(-1.0f64..1.0, K),
        0u64..5_000_000,
        0u64..2_000_000,
        any::<bool>(),
    )
}

fn header() -> impl Strategy<Value = BlockHeader> {
    (
        any::<u64>(),
        "[a-z0-9-]{0,12}",
        prop::collection::vec(any::<f64>(), 0..6),
        any::<[u8; 32]>(),
        prop::collection::vec(any::<f64>(), 0..6),
        any::<f64>(),
        any::<[u8; 32]>(),
    )
        .prop_map(|(height, w, a, p, s, d, m)| BlockHeader {
            height,
            winner: AccountId::new(w),
            averaged_s: a,
            prev_hash: Hash32(p),
            winner_s: s,
            difficulty: d,
            merkle_root: Hash32(m),
        })
}

fn same_bits(a: &BlockHeader, b: &BlockHeader) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.height == b.height
        && a.winner == b.winner
        && bits(&a.averaged_s) == bits(&b.averaged_s)
        && a.prev_hash == b.prev_hash
        && bits(&a.winner_s) == bits(&b.winner_s)
        && a.difficulty.to_bits() == b.difficulty.to_bits()
        && a.merkle_root == b.merkle_root
}

proptest! {
    #[test]
    fn codec_round_trips(h in header()) {
        let bytes = canonical_encode(&h);
        let back = decode_header(&bytes).unwrap();
        prop_assert!(same_bits(&h, &back));
        prop_assert_eq!(hash_header(&back), hash_header(&h));
    }

    #[test]
    fn truncated_headers_are_rejected(h in header(), cut in 1usize..64) {
        let bytes = canonical_encode(&h);
        let cut = cut.min(bytes.len());
        let is_decode_error = matches!(decode_header(&bytes[..bytes.len() - cut]), Err(Error::Decode { .. }));
        prop_assert!(is_decode_error);
    }

    /// Random settlements, some on a side branch: supply always equals
    /// deposits, every block's client payouts equal its train price (or
    /// nothing), and the tip state equals a fresh replay of the main chain.
    #[test]
    fn settlement_conserves_supply(steps in prop::collection::vec(step(), 1..25), requesters in 1usize..4) {
        let genesis = Block::genesis(deposits(requesters, 1_000_000_000));
        let mut chain = ChainState::new(genesis).unwrap();
        let mut side: Option<Hash32> = None;
        for (winner, s_bar, train, sap, fork) in steps {
            let parent = match (fork, side) {
                (true, Some(s)) => s,
                _ => chain.tip(),
            };
            let b = settle(&chain, &parent, winner, s_bar.clone(), RoundPrice { train, sap });
            let paid: Amount = b.transactions.iter().filter(|t| t.kind == TxKind::TrainPayout).map(|t| t.amount).sum();
            let positive = s_bar.iter().any(|&s| s > 0.0);
            prop_assert_eq!(paid, if positive { train } else { 0 });
            for t in b.transactions.iter().filter(|t| t.kind == TxKind::TrainPayout) {
                let i: usize = t.to.as_str().trim_start_matches("client-").parse().unwrap();
                prop_assert!(s_bar[i] > 0.0);
            }
            let h = b.hash();
            chain.apply_block(b).unwrap();
            if fork || side.is_none() {
                side = Some(h);
            }
            prop_assert_eq!(total_supply(chain.accounts()), total_deposits(chain.main_chain().iter().map(|b| &**b)));
            let replayed = replay(chain.main_chain().iter().map(|b| &**b)).unwrap();
            prop_assert_eq!(&replayed, chain.accounts());
        }
    }
}

#[test]
fn chain_file_round_trip_and_corruption_offset() {
    let mut chain = ChainState::new(Block::genesis(deposits(2, 1_000_000))).unwrap();
    for i in 0..4 {
        let b = settle(
            &chain,
            &chain.tip(),
            i % 2,
            vec![0.5, -0.1, 0.2, 0.3],
            RoundPrice { train: 7000, sap: 2000 },
        );
        chain.apply_block(b).unwrap();
    }
    let blocks: Vec<Block> = chain.main_chain().iter().map(|b| (**b).clone()).collect();
    let mut buf = Vec::new();
    write_chain(&mut buf, &blocks).unwrap();
    assert_eq!(read_chain(&buf[..]).unwrap(), blocks);

    let mut digests = Vec::new();
    write_digests(&mut digests, &blocks).unwrap();
    let read = read_digests(&digests[..]).unwrap();
    assert_eq!(read, blocks.iter().map(Block::hash).collect::<Vec<_>>());

    let second_line = buf.iter().position(|&c| c == b'\n').unwrap() + 1;
    let third_line = second_line + buf[second_line..].iter().position(|&c| c == b'\n').unwrap() + 1;
    let mut bad = buf.clone();
    bad[second_line] = b'#';
    match read_chain(&bad[..]) {
        Err(Error::Decode { offset, .. }) => assert_eq!(offset, second_line as u64),
        other => panic!("expected a decode error, got {other:?}"),
    }
    // A mangled key is only noticed when the object closes.
    let mut bad = buf.clone();
    bad[second_line + 3] = b'#';
    match read_chain(&bad[..]) {
        Err(Error::Decode { offset, .. }) => assert!((second_line as u64..third_line as u64).contains(&offset)),
        other => panic!("expected a decode error, got {other:?}"),
    }
}

#[test]
fn first_received_wins_equal_height() {
    let mut chain = ChainState::new(Block::genesis(deposits(1, 1_000_000))).unwrap();
    let g = chain.tip();
    let price = RoundPrice { train: 700, sap: 200 };
    let a = settle(&chain, &g, 0, vec![1.0; K], price);
    let b = settle(&chain, &g, 1, vec![1.0; K], price);
    chain.apply_block(a.clone()).unwrap();
    let acc = chain.apply_block(b.clone()).unwrap();
    assert!(!acc.tip_changed);
    assert_eq!(chain.tip(), a.hash());
    let c = settle(&chain, &b.hash(), 2, vec![1.0; K], price);
    assert!(chain.apply_block(c.clone()).unwrap().tip_changed);
    assert_eq!(chain.tip(), c.hash());
    assert_eq!(chain.balance(&AccountId::miner(0)), 0);
    assert_eq!(chain.balance(&AccountId::miner(1)), 200);
}
