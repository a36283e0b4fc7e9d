//! Blocks, transactions and the account ledger.
//!
//! A block header carries seven fields, in this order: height, winner id,
//! averaged Shapley vector, previous-header hash, winner's Shapley vector,
//! difficulty and the Merkle root of the body's transactions. Headers are
//! hashed with SHA-256 over a canonical big-endian encoding.
//!
//! Balances follow an account model. Every account carries a nonce; a
//! transaction must use the sender's next nonce, which makes `(from, nonce)`
//! unique along any chain. `deposit` transactions mint value (a model
//! requester paying in from outside); every other kind moves existing value.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// FedCoin amounts in micro-coins.
pub type Amount = u64;

pub const MICRO_PER_COIN: Amount = 1_000_000;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Malformed(format!("bad digest `{s}`: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Malformed(format!("digest `{s}` is not 32 bytes")))?;
        Ok(Hash32(arr))
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn sha256(bytes: &[u8]) -> Hash32 {
    Hash32(Sha256::digest(bytes).into())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn new(s: impl Into<String>) -> Self {
        AccountId(s.into())
    }

    pub fn client(i: usize) -> Self {
        AccountId(format!("client-{i}"))
    }

    pub fn miner(i: usize) -> Self {
        AccountId(format!("miner-{i}"))
    }

    pub fn requester(i: usize) -> Self {
        AccountId(format!("requester-{i}"))
    }

    pub fn server() -> Self {
        AccountId("server".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxKind {
    Deposit,
    TrainPayout,
    BlockReward,
    Transfer,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Deposit => 0,
            TxKind::TrainPayout => 1,
            TxKind::BlockReward => 2,
            TxKind::Transfer => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub from: AccountId,
    pub to: AccountId,
    pub amount: Amount,
    pub nonce: u64,
    pub kind: TxKind,
}

impl Transaction {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        put_bytes(&mut out, self.from.0.as_bytes());
        put_bytes(&mut out, self.to.0.as_bytes());
        out.extend_from_slice(&self.amount.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.push(self.kind.tag());
        out
    }

    pub fn hash(&self) -> Hash32 {
        sha256(&self.encode())
    }
}

/// Description of the valuation task settled by a block. The coalition
/// utility itself lives with the miners; the block records what it was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub requester: AccountId,
    pub round: u32,
    pub clients: Vec<AccountId>,
    pub train_price: Amount,
    pub sap_price: Amount,
    pub norm_p: f64,
    pub utility: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub winner: AccountId,
    pub averaged_s: Vec<f64>,
    pub prev_hash: Hash32,
    pub winner_s: Vec<f64>,
    pub difficulty: f64,
    pub merkle_root: Hash32,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_reals(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_be_bytes());
    for x in v {
        out.extend_from_slice(&x.to_bits().to_be_bytes());
    }
}

/// Canonical byte layout of a header: fields in declaration order, integers
/// as 8-byte big-endian, reals as big-endian IEEE-754 doubles, strings and
/// vectors prefixed by their 8-byte length, digests as 32 raw bytes.
pub fn canonical_encode(h: &BlockHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + 16 * h.averaged_s.len());
    out.extend_from_slice(&h.height.to_be_bytes());
    put_bytes(&mut out, h.winner.0.as_bytes());
    put_reals(&mut out, &h.averaged_s);
    out.extend_from_slice(&h.prev_hash.0);
    put_reals(&mut out, &h.winner_s);
    out.extend_from_slice(&h.difficulty.to_bits().to_be_bytes());
    out.extend_from_slice(&h.merkle_root.0);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.pos as u64,
                reason: format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn digest(&mut self) -> Result<Hash32> {
        Ok(Hash32(self.take(32)?.try_into().expect("32 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Decode {
                offset: at as u64,
                reason: format!("length prefix {n} exceeds input"),
            });
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Decode {
            offset: at as u64,
            reason: e.to_string(),
        })
    }

    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<BlockHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = BlockHeader {
        height: r.u64()?,
        winner: AccountId(r.string()?),
        averaged_s: r.reals()?,
        prev_hash: r.digest()?,
        winner_s: r.reals()?,
        difficulty: r.f64()?,
        merkle_root: r.digest()?,
    };
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos as u64,
            reason: "trailing bytes after header".into(),
        });
    }
    Ok(h)
}

pub fn hash_header(h: &BlockHeader) -> Hash32 {
    sha256(&canonical_encode(h))
}

/// Binary Merkle root over the transaction hashes. An odd node is paired
/// with itself; the empty list commits to `sha256("")`.
pub fn merkle_root(txs: &[Transaction]) -> Hash32 {
    if txs.is_empty() {
        return sha256(&[]);
    }
    let mut level: Vec<Hash32> = txs.iter().map(Transaction::hash).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0].0);
                buf[32..].copy_from_slice(&right.0);
                sha256(&buf)
            })
            .collect();
    }
    level[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub task: Option<TaskRecord>,
    pub transactions: Vec<Transaction>,
    /// Sampling iterations the winner ran before finalizing.
    pub winner_iterations: u64,
}

impl Block {
    pub fn hash(&self) -> Hash32 {
        hash_header(&self.header)
    }

    pub fn height(&self) -> u64 {
        self.header.height
    }

    /// Height-0 block holding the initial deposits. Vectors are empty,
    /// difficulty zero and the parent digest all zeros.
    pub fn genesis(deposits: Vec<Transaction>) -> Block {
        let header = BlockHeader {
            height: 0,
            winner: AccountId::new("genesis"),
            averaged_s: Vec::new(),
            prev_hash: Hash32::ZERO,
            winner_s: Vec::new(),
            difficulty: 0.0,
            merkle_root: merkle_root(&deposits),
        };
        Block {
            header,
            task: None,
            transactions: deposits,
            winner_iterations: 0,
        }
    }

    /// Checks that need nothing but the block itself.
    pub fn check_structure(&self) -> Result<()> {
        if merkle_root(&self.transactions) != self.header.merkle_root {
            return Err(Error::Malformed(format!(
                "block {}: merkle root does not match body",
                self.height()
            )));
        }
        match &self.task {
            Some(task) => {
                let k = task.clients.len();
                if self.header.winner_s.len() != k || self.header.averaged_s.len() != k {
                    return Err(Error::Malformed(format!(
                        "block {}: Shapley vectors do not have {k} entries",
                        self.height()
                    )));
                }
                if self.height() == 0 {
                    return Err(Error::Malformed("task block at height 0".into()));
                }
            }
            None if self.height() != 0 => {
                return Err(Error::Malformed(format!("block {} settles no task", self.height())));
            }
            None => {}
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.header.winner_s) || !finite(&self.header.averaged_s) {
            return Err(Error::Malformed(format!(
                "block {}: non-finite Shapley entry",
                self.height()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccountState {
    pub balance: Amount,
    pub nonce: u64,
}

pub type Accounts = BTreeMap<AccountId, AccountState>;

/// Apply `block`'s transactions on top of `accounts`, in order.
pub fn apply_transactions(accounts: &mut Accounts, block: &Block) -> Result<()> {
    let height = block.height();
    for (index, tx) in block.transactions.iter().enumerate() {
        let bad = |reason: String| Error::InvalidTransaction { height, index, reason };
        let sender = accounts.entry(tx.from.clone()).or_default();
        if tx.nonce != sender.nonce {
            return Err(bad(format!(
                "{} uses nonce {}, expected {}",
                tx.from, tx.nonce, sender.nonce
            )));
        }
        if tx.kind != TxKind::Deposit {
            if sender.balance < tx.amount {
                return Err(bad(format!(
                    "{} overdraws: balance {}, amount {}",
                    tx.from, sender.balance, tx.amount
                )));
            }
            sender.balance -= tx.amount;
        }
        sender.nonce += 1;
        let receiver = accounts.entry(tx.to.clone()).or_default();
        receiver.balance = receiver
            .balance
            .checked_add(tx.amount)
            .ok_or_else(|| bad("balance overflow".into()))?;
    }
    Ok(())
}

/// Replay blocks (genesis first) from an empty ledger.
pub fn replay<'a, I>(blocks: I) -> Result<Accounts>
where
    I: IntoIterator<Item = &'a Block>,
{
    let mut accounts = Accounts::new();
    for b in blocks {
        apply_transactions(&mut accounts, b)?;
    }
    Ok(accounts)
}

pub fn total_supply(accounts: &Accounts) -> Amount {
    accounts.values().map(|a| a.balance).sum()
}

pub fn total_deposits<'a, I>(blocks: I) -> Amount
where
    I: IntoIterator<Item = &'a Block>,
{
    blocks
        .into_iter()
        .flat_map(|b| &b.transactions)
        .filter(|t| t.kind == TxKind::Deposit)
        .map(|t| t.amount)
        .sum()
}

struct Stored {
    block: Arc<Block>,
    accounts: Arc<Accounts>,
}

/// What happened when a block was offered to a [`ChainState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accepted {
    /// Blocks stored by this call: the offered one plus any buffered
    /// descendants it unlocked.
    pub stored: Vec<Hash32>,
    pub tip_changed: bool,
    pub already_known: bool,
}

/// One node's view of the block tree.
///
/// Every stored block keeps the ledger state after it, so switching to a
/// fork is a lookup rather than a replay. The tip is the highest stored
/// block; among equal heights the one stored first wins.
pub struct ChainState {
    blocks: HashMap<Hash32, Stored>,
    orphans: HashMap<Hash32, Vec<Block>>,
    genesis: Hash32,
    tip: Hash32,
}

impl ChainState {
    pub fn new(genesis: Block) -> Result<Self> {
        genesis.check_structure()?;
        if genesis.height() != 0 || genesis.header.prev_hash != Hash32::ZERO {
            return Err(Error::Malformed("genesis must be height 0 with a zero parent".into()));
        }
        let mut accounts = Accounts::new();
        apply_transactions(&mut accounts, &genesis)?;
        let hash = genesis.hash();
        let mut blocks = HashMap::new();
        blocks.insert(
            hash,
            Stored {
                block: Arc::new(genesis),
                accounts: Arc::new(accounts),
            },
        );
        Ok(ChainState {
            blocks,
            orphans: HashMap::new(),
            genesis: hash,
            tip: hash,
        })
    }

    pub fn tip(&self) -> Hash32 {
        self.tip
    }

    pub fn genesis(&self) -> Hash32 {
        self.genesis
    }

    pub fn tip_block(&self) -> &Arc<Block> {
        &self.blocks[&self.tip].block
    }

    /// Height of the tip, i.e. the number of blocks after genesis.
    pub fn height(&self) -> u64 {
        self.tip_block().height()
    }

    pub fn contains(&self, hash: &Hash32) -> bool {
        self.blocks.contains_key(hash)
    }

    pub fn get(&self, hash: &Hash32) -> Option<&Arc<Block>> {
        self.blocks.get(hash).map(|s| &s.block)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.values().map(Vec::len).sum()
    }

    /// Ledger state after the tip.
    pub fn accounts(&self) -> &Accounts {
        &self.blocks[&self.tip].accounts
    }

    /// Ledger state after the given block.
    pub fn accounts_at(&self, hash: &Hash32) -> Option<&Accounts> {
        self.blocks.get(hash).map(|s| s.accounts.as_ref())
    }

    pub fn balance(&self, id: &AccountId) -> Amount {
        self.accounts().get(id).map_or(0, |a| a.balance)
    }

    pub fn balances(&self) -> BTreeMap<AccountId, Amount> {
        self.accounts().iter().map(|(k, v)| (k.clone(), v.balance)).collect()
    }

    /// Blocks from genesis to `hash`, inclusive.
    pub fn chain_to(&self, hash: &Hash32) -> Vec<Arc<Block>> {
        let mut out = Vec::new();
        let mut cur = *hash;
        while let Some(s) = self.blocks.get(&cur) {
            out.push(s.block.clone());
            if cur == self.genesis {
                break;
            }
            cur = s.block.header.prev_hash;
        }
        out.reverse();
        out
    }

    pub fn main_chain(&self) -> Vec<Arc<Block>> {
        self.chain_to(&self.tip)
    }

    /// Store a block and run fork choice.
    ///
    /// A block whose parent is unknown is buffered and reported as
    /// [`Error::Orphan`]; it is stored automatically once the parent
    /// arrives. A block whose transactions do not apply on its parent's
    /// ledger is rejected and leaves the state unchanged.
    pub fn apply_block(&mut self, block: Block) -> Result<Accepted> {
        let hash = block.hash();
        if self.blocks.contains_key(&hash) {
            return Ok(Accepted {
                stored: Vec::new(),
                tip_changed: false,
                already_known: true,
            });
        }
        block.check_structure()?;
        let parent = block.header.prev_hash;
        if !self.blocks.contains_key(&parent) {
            let height = block.height();
            let waiting = self.orphans.entry(parent).or_default();
            if !waiting.iter().any(|b| b.hash() == hash) {
                waiting.push(block);
            }
            return Err(Error::Orphan {
                height,
                parent: parent.to_hex(),
            });
        }
        let old_tip = self.tip;
        let mut stored = vec![self.store(block)?];
        // Unlock descendants waiting on anything just stored.
        let mut i = 0;
        while i < stored.len() {
            if let Some(children) = self.orphans.remove(&stored[i]) {
                for child in children {
                    if let Ok(h) = self.store(child) {
                        stored.push(h);
                    }
                }
            }
            i += 1;
        }
        for h in &stored {
            self.choose_tip(h);
        }
        Ok(Accepted {
            stored,
            tip_changed: self.tip != old_tip,
            already_known: false,
        })
    }

    fn store(&mut self, block: Block) -> Result<Hash32> {
        let parent = &self.blocks[&block.header.prev_hash];
        let parent_height = parent.block.height();
        if block.height() != parent_height + 1 {
            return Err(Error::Malformed(format!(
                "block at height {} extends parent at height {parent_height}",
                block.height()
            )));
        }
        if let Some(task) = &block.task {
            if task.id != parent_height {
                return Err(Error::Malformed(format!(
                    "block at height {} settles task {}, expected task {parent_height}",
                    block.height(),
                    task.id
                )));
            }
        }
        let mut accounts = (*parent.accounts).clone();
        apply_transactions(&mut accounts, &block)?;
        let hash = block.hash();
        self.blocks.insert(
            hash,
            Stored {
                block: Arc::new(block),
                accounts: Arc::new(accounts),
            },
        );
        Ok(hash)
    }

    /// Longest-chain rule: adopt `candidate` only if it is strictly higher
    /// than the current tip. Returns the tip after the decision.
    pub fn choose_tip(&mut self, candidate: &Hash32) -> Hash32 {
        if let Some(c) = self.blocks.get(candidate) {
            if c.block.height() > self.height() {
                self.tip = *candidate;
            }
        }
        self.tip
    }
}

/// Write blocks as JSON lines, one block per line.
pub fn write_chain<'a, W, I>(mut out: W, blocks: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Block>,
{
    for b in blocks {
        serde_json::to_writer(&mut out, b)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Header digests, one lowercase hex digest per line.
pub fn write_digests<'a, W, I>(mut out: W, blocks: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Block>,
{
    for b in blocks {
        writeln!(out, "{}", b.hash())?;
    }
    Ok(())
}

/// Parse a JSON-lines chain file. Errors carry the byte offset of the
/// offending line.
pub fn read_chain<R: BufRead>(input: R) -> Result<Vec<Block>> {
    let mut blocks = Vec::new();
    let mut offset = 0u64;
    for line in input.split(b'\n') {
        let line = line?;
        if !line.iter().all(u8::is_ascii_whitespace) {
            let block = serde_json::from_slice(&line).map_err(|e| Error::Decode {
                offset: offset + e.column().saturating_sub(1) as u64,
                reason: e.to_string(),
            })?;
            blocks.push(block);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(blocks)
}

pub fn read_digests<R: BufRead>(input: R) -> Result<Vec<Hash32>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Hash32::from_hex(l?.trim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(from: &str, to: &str, amount: Amount, nonce: u64, kind: TxKind) -> Transaction {
        Transaction {
            from: AccountId::new(from),
            to: AccountId::new(to),
            amount,
            nonce,
            kind,
        }
    }

    fn task(id: u64) -> TaskRecord {
        TaskRecord {
            id,
            requester: AccountId::requester(0),
            round: id as u32,
            clients: vec![AccountId::client(0), AccountId::client(1)],
            train_price: 0,
            sap_price: 0,
            norm_p: 2.0,
            utility: "test".into(),
        }
    }

    fn child(parent: &Block, winner: &str, txs: Vec<Transaction>) -> Block {
        let height = parent.height() + 1;
        Block {
            header: BlockHeader {
                height,
                winner: AccountId::new(winner),
                averaged_s: vec![0.5, 0.5],
                prev_hash: parent.hash(),
                winner_s: vec![0.5, 0.5],
                difficulty: 0.1,
                merkle_root: merkle_root(&txs),
            },
            task: Some(task(height - 1)),
            transactions: txs,
            winner_iterations: 10,
        }
    }

    fn sample_header() -> BlockHeader {
        BlockHeader {
            height: 42,
            winner: AccountId::miner(3),
            averaged_s: vec![0.25, -0.125, 0.5],
            prev_hash: sha256(b"parent"),
            winner_s: vec![0.25, -0.1, 0.5],
            difficulty: 1e-3,
            merkle_root: sha256(b"root"),
        }
    }

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(
            sha256(&[]).to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn header_codec() {
        let h = sample_header();
        let bytes = canonical_encode(&h);
        assert_eq!(bytes, canonical_encode(&h));
        assert_eq!(decode_header(&bytes).unwrap(), h);
        // 8 + (8+7) + (8+24) + 32 + (8+24) + 8 + 32
        assert_eq!(bytes.len(), 159);
        assert!(decode_header(&bytes[..100]).is_err());
    }

    #[test]
    fn every_field_changes_the_encoding() {
        let h = sample_header();
        let base = canonical_encode(&h);
        let mut variants = Vec::new();
        variants.push(BlockHeader {
            height: 43,
            ..h.clone()
        });
        variants.push(BlockHeader {
            winner: AccountId::miner(4),
            ..h.clone()
        });
        variants.push(BlockHeader {
            averaged_s: vec![0.25, -0.125, 0.6],
            ..h.clone()
        });
        variants.push(BlockHeader {
            prev_hash: sha256(b"other"),
            ..h.clone()
        });
        variants.push(BlockHeader {
            winner_s: vec![0.25, -0.1],
            ..h.clone()
        });
        variants.push(BlockHeader {
            difficulty: 2e-3,
            ..h.clone()
        });
        variants.push(BlockHeader {
            merkle_root: sha256(b"x"),
            ..h.clone()
        });
        for v in variants {
            assert_ne!(canonical_encode(&v), base);
            assert_ne!(hash_header(&v), hash_header(&h));
        }
    }

    #[test]
    fn single_bit_flip_changes_digest() {
        let h = sample_header();
        let d = hash_header(&h);
        let flipped = BlockHeader {
            difficulty: f64::from_bits(h.difficulty.to_bits() ^ 1),
            ..h
        };
        assert_ne!(hash_header(&flipped), d);
    }

    #[test]
    fn golden_header_digest() {
        // Frozen fixture: any change to the canonical layout shows up here.
        assert_eq!(
            hash_header(&sample_header()).to_hex(),
            include_str!("../tests/fixtures/sample_header.digest").trim()
        );
    }

    #[test]
    fn merkle_examples() {
        assert_eq!(merkle_root(&[]), sha256(&[]));
        let a = tx("a", "b", 1, 0, TxKind::Transfer);
        let b = tx("b", "a", 2, 0, TxKind::Transfer);
        let c = tx("a", "c", 3, 1, TxKind::Transfer);
        assert_eq!(merkle_root(std::slice::from_ref(&a)), a.hash());
        assert_ne!(
            merkle_root(&[a.clone(), b.clone()]),
            merkle_root(&[b.clone(), a.clone()])
        );
        // Odd count: the last leaf is paired with itself.
        let ab = merkle_root(&[a.clone(), b.clone()]);
        let cc = merkle_root(&[c.clone(), c.clone()]);
        let mut buf = [0u8; 64];
        buf[..32].copy_from_slice(&ab.0);
        buf[32..].copy_from_slice(&cc.0);
        assert_eq!(merkle_root(&[a, b, c]), sha256(&buf));
    }

    #[test]
    fn transfer_and_overdraft() {
        let genesis = Block::genesis(vec![tx("requester-0", "a", 10, 0, TxKind::Deposit)]);
        let mut chain = ChainState::new(genesis.clone()).unwrap();
        let b1 = child(&genesis, "m", vec![tx("a", "b", 10, 0, TxKind::Transfer)]);
        chain.apply_block(b1.clone()).unwrap();
        assert_eq!(chain.balance(&AccountId::new("a")), 0);
        assert_eq!(chain.balance(&AccountId::new("b")), 10);

        let before = chain.balances();
        let bad = child(&b1, "m", vec![tx("b", "a", 11, 0, TxKind::Transfer)]);
        assert!(matches!(
            chain.apply_block(bad),
            Err(Error::InvalidTransaction { index: 0, .. })
        ));
        assert_eq!(chain.balances(), before);
        assert_eq!(chain.tip(), b1.hash());
    }

    #[test]
    fn nonce_reuse_is_rejected() {
        let genesis = Block::genesis(vec![tx("r", "a", 10, 0, TxKind::Deposit)]);
        let mut chain = ChainState::new(genesis.clone()).unwrap();
        let b1 = child(
            &genesis,
            "m",
            vec![
                tx("a", "b", 1, 0, TxKind::Transfer),
                tx("a", "b", 1, 0, TxKind::Transfer),
            ],
        );
        assert!(chain.apply_block(b1).is_err());
    }

    #[test]
    fn five_block_replay_matches_hand_totals() {
        // r deposits 100 to s; s pays 30 to m1; m1 pays 10 to c0 and 15 to
        // c1; r deposits 50 more; s pays 20 to m2; m2 pays 20 to c0.
        let g = Block::genesis(vec![tx("r", "s", 100, 0, TxKind::Deposit)]);
        let b1 = child(&g, "m1", vec![tx("s", "m1", 30, 0, TxKind::BlockReward)]);
        let b2 = child(
            &b1,
            "m1",
            vec![
                tx("m1", "c0", 10, 0, TxKind::TrainPayout),
                tx("m1", "c1", 15, 1, TxKind::TrainPayout),
            ],
        );
        let b3 = child(&b2, "m1", vec![tx("r", "s", 50, 1, TxKind::Deposit)]);
        let b4 = child(&b3, "m2", vec![tx("s", "m2", 20, 1, TxKind::BlockReward)]);
        let b5 = child(&b4, "m2", vec![tx("m2", "c0", 20, 0, TxKind::TrainPayout)]);
        let blocks = [g.clone(), b1, b2, b3, b4, b5];

        let mut chain = ChainState::new(g).unwrap();
        for b in &blocks[1..] {
            chain.apply_block(b.clone()).unwrap();
        }
        let expect: BTreeMap<AccountId, Amount> = [("c0", 30), ("c1", 15), ("m1", 5), ("m2", 0), ("r", 0), ("s", 100)]
            .into_iter()
            .map(|(k, v)| (AccountId::new(k), v))
            .collect();
        assert_eq!(chain.balances(), expect);
        let replayed = replay(&blocks).unwrap();
        assert_eq!(replayed, *chain.accounts());
        assert_eq!(total_supply(&replayed), total_deposits(&blocks));
        assert_eq!(total_supply(&replayed), 150);
    }

    #[test]
    fn fork_choice() {
        let g = Block::genesis(vec![tx("r", "s", 100, 0, TxKind::Deposit)]);
        let mut chain = ChainState::new(g.clone()).unwrap();
        let a1 = child(&g, "ma", vec![tx("s", "ma", 10, 0, TxKind::BlockReward)]);
        let b1 = child(&g, "mb", vec![tx("s", "mb", 20, 0, TxKind::BlockReward)]);
        let b2 = child(&b1, "mb", vec![tx("s", "mb", 5, 1, TxKind::BlockReward)]);

        assert!(chain.apply_block(a1.clone()).unwrap().tip_changed);
        assert_eq!(chain.tip(), a1.hash());
        // Equal height: first received stays.
        assert!(!chain.apply_block(b1.clone()).unwrap().tip_changed);
        assert_eq!(chain.tip(), a1.hash());
        assert_eq!(chain.balance(&AccountId::new("ma")), 10);
        // Longer fork: reorg, balances follow the new branch.
        assert!(chain.apply_block(b2.clone()).unwrap().tip_changed);
        assert_eq!(chain.tip(), b2.hash());
        assert_eq!(chain.balance(&AccountId::new("ma")), 0);
        assert_eq!(chain.balance(&AccountId::new("mb")), 25);
        assert_eq!(chain.balance(&AccountId::new("s")), 75);
        assert_eq!(*chain.accounts(), replay(&[g, b1, b2]).unwrap());
    }

    #[test]
    fn orphans_wait_for_parent() {
        let g = Block::genesis(vec![]);
        let b1 = child(&g, "m", vec![]);
        let b2 = child(&b1, "m", vec![]);
        let mut chain = ChainState::new(g).unwrap();
        assert!(matches!(chain.apply_block(b2.clone()), Err(Error::Orphan { .. })));
        assert_eq!(chain.orphan_count(), 1);
        let acc = chain.apply_block(b1).unwrap();
        assert_eq!(acc.stored.len(), 2);
        assert_eq!(chain.tip(), b2.hash());
        assert_eq!(chain.orphan_count(), 0);
    }

    #[test]
    fn tampered_body_fails_structure() {
        let g = Block::genesis(vec![tx("r", "s", 100, 0, TxKind::Deposit)]);
        let mut b1 = child(&g, "m", vec![tx("s", "m", 10, 0, TxKind::BlockReward)]);
        b1.transactions[0].amount = 11;
        assert!(matches!(b1.check_structure(), Err(Error::Malformed(_))));
        let mut chain = ChainState::new(g).unwrap();
        assert!(chain.apply_block(b1).is_err());
    }

    #[test]
    fn header_change_breaks_link() {
        let g = Block::genesis(vec![]);
        let b1 = child(&g, "m", vec![]);
        let b2 = child(&b1, "m", vec![]);
        let mut altered = b1.clone();
        altered.header.winner_s[0] += 1e-9;
        assert_ne!(b2.header.prev_hash, altered.hash());
    }

    #[test]
    fn persistence_round_trip() {
        let g = Block::genesis(vec![tx("r", "s", 100, 0, TxKind::Deposit)]);
        let mut b1 = child(&g, "m", vec![tx("s", "m", 10, 0, TxKind::BlockReward)]);
        b1.header.averaged_s = vec![0.1 + 0.2, 1.0 / 3.0];
        b1.header.winner_s = vec![std::f64::consts::PI, -1e-300];
        b1.header.merkle_root = merkle_root(&b1.transactions);
        let blocks = vec![g.clone(), b1.clone()];
        let mut buf = Vec::new();
        write_chain(&mut buf, &blocks).unwrap();
        let back = read_chain(&buf[..]).unwrap();
        assert_eq!(back, blocks);
        assert_eq!(back[1].hash(), b1.hash());

        let mut digests = Vec::new();
        write_digests(&mut digests, &blocks).unwrap();
        assert_eq!(read_digests(&digests[..]).unwrap(), vec![g.hash(), b1.hash()]);

        let mut corrupt = buf.clone();
        let second_line = buf.iter().position(|&c| c == b'\n').unwrap() + 1;
        corrupt[second_line + 3] = b'#';
        match read_chain(&corrupt[..]) {
            Err(Error::Decode { offset, .. }) => assert!(offset >= second_line as u64),
            other => panic!("unexpected {other:?}"),
        }
    }
}
