//! Budget splitting and Shapley-proportional settlement.
//!
//! All amounts are integer micro-coins. Fractional shares are resolved by
//! largest-remainder rounding, with ties going to the earlier component, so
//! every split sums exactly to its total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{AccountId, Accounts, Amount, Transaction, TxKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PriceSplit {
    pub train: Amount,
    pub com: Amount,
    pub sap: Amount,
}

impl PriceSplit {
    pub fn total(&self) -> Amount {
        self.train + self.com + self.sap
    }
}

/// Per-block prices for one training round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPrice {
    pub train: Amount,
    pub sap: Amount,
}

/// Split `total` proportionally to integer `weights`.
pub fn apportion(total: Amount, weights: &[u64]) -> Result<Vec<Amount>> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return Err(Error::invalid("weights must not all be zero"));
    }
    let mut parts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for &w in weights {
        let num = total as u128 * w as u128;
        parts.push((num / sum) as Amount);
        rems.push(num % sum);
    }
    let given: Amount = parts.iter().sum();
    distribute(&mut parts, total - given, |a, b| rems[b].cmp(&rems[a]));
    Ok(parts)
}

/// Hand out `left` single units in the order given by `cmp` (stable, so
/// equal keys keep index order).
fn distribute<F>(parts: &mut [Amount], left: Amount, cmp: F)
where
    F: Fn(usize, usize) -> std::cmp::Ordering,
{
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| cmp(a, b));
    for &i in order.iter().cycle().take(left as usize) {
        parts[i] += 1;
    }
}

/// Largest-remainder split of `total` in proportion to non-negative real
/// `shares`. Quotas within 1e-9 of an integer snap to it and remainders
/// within 1e-9 of each other tie, so rescaling the shares by a positive
/// constant does not flip a rounding decision through floating-point noise.
pub fn apportion_real(total: Amount, shares: &[f64]) -> Result<Vec<Amount>> {
    if shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("shares must be finite and non-negative"));
    }
    let sum: f64 = shares.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::invalid("shares must not all be zero"));
    }
    const SNAP: f64 = 1e-9;
    let mut parts = Vec::with_capacity(shares.len());
    let mut rems = Vec::with_capacity(shares.len());
    for &s in shares {
        let mut q = total as f64 * (s / sum);
        let n = q.round();
        if (q - n).abs() <= SNAP * q.max(1.0) {
            q = n;
        }
        let floor = q.floor().min(total as f64);
        parts.push(floor as Amount);
        rems.push(q - floor);
    }
    let mut given: Amount = parts.iter().sum();
    // Float quotas can overshoot by a unit; take it back from the smallest
    // remainders.
    while given > total {
        let i = (0..parts.len())
            .filter(|&i| parts[i] > 0)
            .min_by(|&a, &b| rems[a].total_cmp(&rems[b]))
            .expect("positive part");
        parts[i] -= 1;
        given -= 1;
    }
    distribute(&mut parts, total - given, |a, b| {
        if (rems[a] - rems[b]).abs() <= SNAP {
            std::cmp::Ordering::Equal
        } else {
            rems[b].total_cmp(&rems[a])
        }
    });
    Ok(parts)
}

/// Split a budget into TrainPrice, ComPrice and SapPrice.
pub fn split_budget(v: Amount, ratio: [u64; 3]) -> Result<PriceSplit> {
    let p = apportion(v, &ratio)?;
    Ok(PriceSplit {
        train: p[0],
        com: p[1],
        sap: p[2],
    })
}

/// Divide a task's train and sap prices over its rounds in proportion to
/// `weights` (one per round; equal weights give an equal division).
pub fn round_prices(split: &PriceSplit, weights: &[u64]) -> Result<Vec<RoundPrice>> {
    if weights.is_empty() {
        return Err(Error::invalid("at least one round is required"));
    }
    let train = apportion(split.train, weights)?;
    let sap = apportion(split.sap, weights)?;
    Ok(train
        .into_iter()
        .zip(sap)
        .map(|(train, sap)| RoundPrice { train, sap })
        .collect())
}

/// Client payouts for one block: positive entries of `s_bar` share `train`
/// in proportion; the rest receive nothing. `None` when no entry is
/// positive.
pub fn payouts(s_bar: &[f64], train: Amount) -> Result<Option<Vec<Amount>>> {
    let shares: Vec<f64> = s_bar.iter().map(|&s| if s > 0.0 { s } else { 0.0 }).collect();
    if shares.iter().all(|&s| s == 0.0) {
        return Ok(None);
    }
    apportion_real(train, &shares).map(Some)
}

/// Settlement transactions for a block: the server pays train + sap to the
/// winner, then the winner pays each positive-contribution client its share
/// of train. If no client contributed positively the winner keeps train.
/// Nonces continue from `accounts`, the ledger state the block builds on.
pub fn settle_block(
    winner: &AccountId,
    s_bar: &[f64],
    price: RoundPrice,
    clients: &[AccountId],
    server: &AccountId,
    accounts: &Accounts,
) -> Result<Vec<Transaction>> {
    if s_bar.len() != clients.len() {
        return Err(Error::invalid(format!(
            "{} Shapley entries for {} clients",
            s_bar.len(),
            clients.len()
        )));
    }
    let nonce = |id: &AccountId| accounts.get(id).map_or(0, |a| a.nonce);
    let mut txs = vec![Transaction {
        from: server.clone(),
        to: winner.clone(),
        amount: price.train + price.sap,
        nonce: nonce(server),
        kind: TxKind::BlockReward,
    }];
    if let Some(amounts) = payouts(s_bar, price.train)? {
        let mut n = nonce(winner);
        for ((client, amount), s) in clients.iter().zip(amounts).zip(s_bar) {
            if *s > 0.0 {
                txs.push(Transaction {
                    from: winner.clone(),
                    to: client.clone(),
                    amount,
                    nonce: n,
                    kind: TxKind::TrainPayout,
                });
                n += 1;
            }
        }
    }
    Ok(txs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(
            split_budget(100, [7, 1, 2]).unwrap(),
            PriceSplit {
                train: 70,
                com: 10,
                sap: 20
            }
        );
        assert_eq!(split_budget(0, [7, 1, 2]).unwrap(), PriceSplit::default());
        assert_eq!(
            split_budget(10, [1, 1, 1]).unwrap(),
            PriceSplit {
                train: 4,
                com: 3,
                sap: 3
            }
        );
        assert!(split_budget(10, [0, 0, 0]).is_err());
    }

    #[test]
    fn payout_examples() {
        assert_eq!(payouts(&[2.0, -1.0, 2.0], 70).unwrap(), Some(vec![35, 0, 35]));
        assert_eq!(payouts(&[1.0; 4], 100).unwrap(), Some(vec![25; 4]));
        assert_eq!(payouts(&[3.0, 1.0], 70).unwrap(), Some(vec![53, 17]));
        assert_eq!(payouts(&[-1.0, 0.0], 70).unwrap(), None);
    }

    #[test]
    fn settlement_layout() {
        let clients: Vec<_> = (0..3).map(AccountId::client).collect();
        let winner = AccountId::miner(0);
        let server = AccountId::server();
        let price = RoundPrice { train: 70, sap: 20 };
        let txs = settle_block(&winner, &[3.0, -2.0, 1.0], price, &clients, &server, &Accounts::new()).unwrap();
        assert_eq!(txs.len(), 3);
        assert_eq!(txs[0].kind, TxKind::BlockReward);
        assert_eq!((txs[0].from.clone(), txs[0].amount), (server, 90));
        assert_eq!(txs[1].to, clients[0]);
        assert_eq!(txs[1].amount, 53);
        assert_eq!(txs[2].to, clients[2]);
        assert_eq!(txs[2].amount, 17);
        assert_eq!((txs[1].nonce, txs[2].nonce), (0, 1));

        let none = settle_block(
            &winner,
            &[-1.0, 0.0, -3.0],
            price,
            &clients,
            &AccountId::server(),
            &Accounts::new(),
        )
        .unwrap();
        assert_eq!(none.len(), 1);
    }

    #[test]
    fn round_division() {
        let split = split_budget(1000, [7, 1, 2]).unwrap();
        let rounds = round_prices(&split, &[1, 1, 1]).unwrap();
        assert_eq!(rounds.iter().map(|r| r.train).collect::<Vec<_>>(), [234, 233, 233]);
        assert_eq!(rounds.iter().map(|r| r.sap).sum::<Amount>(), 200);
    }

    proptest! {
        #[test]
        fn split_sums_to_total(v in 0u64..1_000_000_000_000, r in proptest::array::uniform3(0u64..50)) {
            prop_assume!(r.iter().any(|&x| x > 0));
            let s = split_budget(v, r).unwrap();
            prop_assert_eq!(s.total(), v);
        }

        #[test]
        fn payouts_conserve_and_skip_negatives(
            s in proptest::collection::vec(-5.0f64..5.0, 1..20),
            train in 0u64..10_000_000,
        ) {
            if let Some(p) = payouts(&s, train).unwrap() {
                prop_assert_eq!(p.iter().sum::<Amount>(), train);
                for (x, amt) in s.iter().zip(&p) {
                    if *x <= 0.0 {
                        prop_assert_eq!(*amt, 0);
                    }
                }
            } else {
                prop_assert!(s.iter().all(|&x| x <= 0.0));
            }
        }

        #[test]
        fn payouts_are_scale_invariant(
            s in proptest::collection::vec(-5.0f64..5.0, 1..12),
            train in 0u64..10_000_000,
            c in 1e-3f64..1e3,
        ) {
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            prop_assert_eq!(payouts(&s, train).unwrap(), payouts(&scaled, train).unwrap());
        }
    }
}
