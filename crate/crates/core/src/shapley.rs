//! Monte-Carlo Shapley estimation by permutation sampling.
//!
//! One PoSap iteration draws a uniformly random arrival order of the `K`
//! clients and credits each client with its marginal contribution to the
//! coalition of clients that arrived before it. Running the iteration
//! repeatedly and averaging yields an unbiased estimate of the Shapley
//! vector; [`exact_shapley`] enumerates all subsets and serves as the
//! reference for small games.
//!
//! The empty coalition is worth zero by convention: the first client of an
//! arrival order is credited with its singleton value.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest client count accepted by [`exact_shapley`].
pub const EXACT_MAX_PLAYERS: usize = 12;

/// A set of client indices, stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(players: usize) -> Self {
        Coalition {
            words: vec![0; players.div_ceil(64).max(1)],
        }
    }

    pub fn from_members(players: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Coalition::empty(players);
        for m in members {
            c.insert(m);
        }
        c
    }

    /// The coalition whose members are the set bits of `mask`.
    pub fn from_mask(players: usize, mask: u64) -> Self {
        let mut c = Coalition::empty(players);
        c.words[0] = mask;
        c
    }

    pub fn insert(&mut self, player: usize) {
        self.words[player / 64] |= 1 << (player % 64);
    }

    pub fn contains(&self, player: usize) -> bool {
        self.words
            .get(player / 64)
            .is_some_and(|w| w & (1 << (player % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Members in increasing order.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.words
            .iter()
            .enumerate()
            .flat_map(|(i, &w)| (0..64).filter(move |b| w & (1 << b) != 0).map(move |b| i * 64 + b))
    }

    /// Canonical key for memoization.
    pub fn key(&self) -> &[u64] {
        &self.words
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

/// Characteristic function of a cooperative game over `players()` clients.
pub trait CoalitionUtility: Send + Sync {
    fn players(&self) -> usize;

    /// Value of a non-empty coalition. Implementations must be deterministic.
    fn value(&self, coalition: &Coalition) -> Result<f64>;

    /// Short human-readable description recorded in task specs.
    fn describe(&self) -> String {
        format!("game/{}", self.players())
    }
}

impl<U: CoalitionUtility + ?Sized> CoalitionUtility for std::sync::Arc<U> {
    fn players(&self) -> usize {
        (**self).players()
    }
    fn value(&self, coalition: &Coalition) -> Result<f64> {
        (**self).value(coalition)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Evaluate `u` with the `v(∅) = 0` convention applied.
pub fn evaluate<U: CoalitionUtility + ?Sized>(u: &U, coalition: &Coalition) -> Result<f64> {
    if coalition.is_empty() {
        return Ok(0.0);
    }
    let v = u.value(coalition)?;
    if !v.is_finite() {
        return Err(Error::Utility {
            coalition: coalition.members().collect(),
            reason: format!("non-finite value {v}"),
        });
    }
    Ok(v)
}

/// Memoizing wrapper. Prefixes of random permutations repeat constantly, so
/// every expensive utility goes through one of these. The cache is shared
/// behind a mutex so several miners can use a single instance.
pub struct Memoized<U> {
    inner: U,
    cache: Mutex<HashMap<Vec<u64>, f64>>,
}

impl<U: CoalitionUtility> Memoized<U> {
    pub fn new(inner: U) -> Self {
        Memoized {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &U {
        &self.inner
    }

    /// Number of distinct coalitions evaluated so far.
    pub fn cached(&self) -> usize {
        self.cache.lock().expect("memo poisoned").len()
    }
}

impl<U: CoalitionUtility> CoalitionUtility for Memoized<U> {
    fn players(&self) -> usize {
        self.inner.players()
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        if let Some(v) = self.cache.lock().expect("memo poisoned").get(coalition.key()) {
            return Ok(*v);
        }
        let v = self.inner.value(coalition)?;
        self.cache
            .lock()
            .expect("memo poisoned")
            .insert(coalition.key().to_vec(), v);
        Ok(v)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// An arrival order of clients: `order()[0]` arrives first. Indices are
/// zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("{order:?} is not a permutation")));
            }
        }
        if order.is_empty() {
            return Err(Error::invalid("empty permutation"));
        }
        Ok(Permutation(order))
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniform random permutation of `0..k` (Fisher–Yates).
pub fn sample_permutation<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<Permutation> {
    if k == 0 {
        return Err(Error::invalid("permutation of zero clients"));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    Ok(Permutation(order))
}

/// Marginal contribution of every client along `perm`.
///
/// The first client gets its singleton value; each later client gets the
/// value of the prefix ending at it minus what was already credited.
pub fn marginal_contributions<U: CoalitionUtility + ?Sized>(u: &U, perm: &Permutation) -> Result<Vec<f64>> {
    let k = u.players();
    if perm.len() != k {
        return Err(Error::invalid(format!(
            "permutation of {} clients for a {k}-client game",
            perm.len()
        )));
    }
    let mut s_t = vec![0.0; k];
    let mut prefix = Coalition::empty(k);
    let mut credited = 0.0;
    for &client in perm.order() {
        prefix.insert(client);
        let v = evaluate(u, &prefix)?;
        s_t[client] = v - credited;
        credited += s_t[client];
    }
    Ok(s_t)
}

/// One sampling round: draw a permutation and return its marginal vector.
pub fn posap_iteration<U, R>(u: &U, rng: &mut R) -> Result<Vec<f64>>
where
    U: CoalitionUtility + ?Sized,
    R: Rng + ?Sized,
{
    let perm = sample_permutation(rng, u.players())?;
    marginal_contributions(u, &perm)
}

/// Running Shapley estimate: the mean of all marginal vectors folded in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub iterations: u64,
}

impl ShapleyEstimate {
    pub fn new(k: usize) -> Self {
        ShapleyEstimate {
            values: vec![0.0; k],
            iterations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fold one more sample into the running mean.
    pub fn update(&self, s_t: &[f64]) -> Result<ShapleyEstimate> {
        if s_t.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "sample of length {} for an estimate of length {}",
                s_t.len(),
                self.values.len()
            )));
        }
        let time = self.iterations as f64;
        let values = self
            .values
            .iter()
            .zip(s_t)
            .map(|(s, x)| (s * time + x) / (time + 1.0))
            .collect();
        Ok(ShapleyEstimate {
            values,
            iterations: self.iterations + 1,
        })
    }
}

/// Free-function form of [`ShapleyEstimate::update`].
pub fn update_running_mean(est: &ShapleyEstimate, s_t: &[f64]) -> Result<ShapleyEstimate> {
    est.update(s_t)
}

/// Iteration-weighted average of several estimates.
///
/// Computed as offsets from the first estimate, so merging identical
/// vectors returns that vector bit for bit.
pub fn merge_estimates<'a, I>(peers: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a ShapleyEstimate>,
{
    let peers: Vec<&ShapleyEstimate> = peers.into_iter().collect();
    let first = peers
        .first()
        .ok_or_else(|| Error::NoData("no estimates to merge".into()))?;
    let k = first.len();
    if let Some(bad) = peers.iter().find(|p| p.len() != k) {
        return Err(Error::invalid(format!(
            "estimate of length {} merged with length {k}",
            bad.len()
        )));
    }
    let total: u64 = peers.iter().map(|p| p.iterations).sum();
    if total == 0 {
        return Err(Error::NoData("estimates carry zero iterations".into()));
    }
    let total = total as f64;
    let base = &first.values;
    let mut merged = base.clone();
    for p in &peers {
        let w = p.iterations as f64 / total;
        for ((m, x), b) in merged.iter_mut().zip(&p.values).zip(base) {
            *m += w * (x - b);
        }
    }
    Ok(merged)
}

/// Exact Shapley values by enumerating all `2^k` coalitions.
pub fn exact_shapley<U: CoalitionUtility + ?Sized>(u: &U) -> Result<Vec<f64>> {
    let k = u.players();
    if k == 0 {
        return Err(Error::invalid("game with zero clients"));
    }
    if k > EXACT_MAX_PLAYERS {
        return Err(Error::ResourceLimit(format!(
            "exact Shapley enumeration is limited to {EXACT_MAX_PLAYERS} clients, got {k}"
        )));
    }
    let n = 1usize << k;
    let mut value = vec![0.0; n];
    for (mask, v) in value.iter_mut().enumerate().skip(1) {
        *v = evaluate(u, &Coalition::from_mask(k, mask as u64))?;
    }
    // weight[s] = s! (k - s - 1)! / k!
    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..k).map(|s| fact[s] * fact[k - s - 1] / fact[k]).collect();

    let mut phi = vec![0.0; k];
    for mask in 0..n {
        let size = (mask as u64).count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask & (1 << i) == 0 {
                *p += weight[size] * (value[mask | (1 << i)] - value[mask]);
            }
        }
    }
    Ok(phi)
}

/// L_p distance between two vectors. `p = ∞` gives the max norm.
pub fn lp_distance(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::invalid(format!("norm order {p} is below 1")));
    }
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    if p.is_infinite() {
        return Ok(diffs.fold(0.0, f64::max));
    }
    if p == 1.0 {
        return Ok(diffs.sum());
    }
    if p == 2.0 {
        return Ok(diffs.map(|d| d * d).sum::<f64>().sqrt());
    }
    Ok(diffs.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p))
}

/// Small closed-form games used by presets and tests.
pub mod games {
    use super::*;

    /// Any deterministic function of the member set.
    pub struct FnGame<F> {
        players: usize,
        name: String,
        f: F,
    }

    impl<F> FnGame<F>
    where
        F: Fn(&Coalition) -> f64 + Send + Sync,
    {
        pub fn new(players: usize, name: impl Into<String>, f: F) -> Self {
            FnGame {
                players,
                name: name.into(),
                f,
            }
        }
    }

    impl<F> CoalitionUtility for FnGame<F>
    where
        F: Fn(&Coalition) -> f64 + Send + Sync,
    {
        fn players(&self) -> usize {
            self.players
        }
        fn value(&self, coalition: &Coalition) -> Result<f64> {
            Ok((self.f)(coalition))
        }
        fn describe(&self) -> String {
            self.name.clone()
        }
    }

    /// `v(S) = Σ_{i∈S} w_i`, optionally plus `bonus` when both members of
    /// `pair` are present.
    ///
    /// With no pair the game is additive and every permutation yields the
    /// same marginal vector. The pair term makes the two partners' marginals
    /// depend on which of them arrives second.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct SynergyGame {
        pub weights: Vec<f64>,
        pub pair: Option<(usize, usize)>,
        pub bonus: f64,
    }

    impl SynergyGame {
        pub fn additive(weights: Vec<f64>) -> Self {
            SynergyGame {
                weights,
                pair: None,
                bonus: 0.0,
            }
        }

        /// `K` unit-weight clients plus a unit bonus for clients 0 and 1.
        pub fn toy(k: usize) -> Self {
            SynergyGame {
                weights: vec![1.0; k],
                pair: (k >= 2).then_some((0, 1)),
                bonus: 1.0,
            }
        }
    }

    impl CoalitionUtility for SynergyGame {
        fn players(&self) -> usize {
            self.weights.len()
        }

        fn value(&self, c: &Coalition) -> Result<f64> {
            let mut v: f64 = c.members().map(|i| self.weights[i]).sum();
            if let Some((a, b)) = self.pair {
                if c.contains(a) && c.contains(b) {
                    v += self.bonus;
                }
            }
            Ok(v)
        }

        fn describe(&self) -> String {
            match self.pair {
                Some((a, b)) => format!("synergy/{}:pair({a},{b})+{}", self.weights.len(), self.bonus),
                None => format!("additive/{}", self.weights.len()),
            }
        }
    }

    /// Three-client glove game: worth 1 when client 0 and at least one of
    /// clients 1, 2 are present.
    pub fn glove() -> FnGame<impl Fn(&Coalition) -> f64 + Send + Sync> {
        FnGame::new(3, "glove/3", |c: &Coalition| {
            if c.contains(0) && (c.contains(1) || c.contains(2)) {
                1.0
            } else {
                0.0
            }
        })
    }
}
