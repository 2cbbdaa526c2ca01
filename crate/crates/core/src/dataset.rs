//! Interaction data: ingestion, k-core filtering, per-user splitting and
//! mini-batching of positive pairs.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub mod synthetic;

/// One line of a raw interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: Option<i64>,
}

/// Field separator of interaction files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
    Other(char),
}

impl Delimiter {
    pub fn as_char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Other(c) => c,
        }
    }

    /// Parses `tab`, `comma`, `\t`, `,` or any single character.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
            "comma" | "," => Ok(Delimiter::Comma),
            _ => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(Delimiter::Other(c)),
                    _ => Err(Error::Config(format!("invalid delimiter {s:?}"))),
                }
            }
        }
    }
}

/// A user-item pair with contiguous integer IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Interaction { user, item }
    }
}

/// Deduplicated interactions with popularity tables.
///
/// Sets produced by [`preprocess`] cover every ID in `[0, n)`. The training
/// view of a [`DatasetSplit`] shares the ID space of its source and may hold
/// users or items with zero popularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    pairs: Vec<Interaction>,
    user_pop: Vec<u32>,
    item_pop: Vec<u32>,
}

impl InteractionSet {
    /// Builds a set from already-remapped pairs. Duplicates are rejected.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: Vec<Interaction>) -> Result<Self> {
        let mut user_pop = vec![0u32; n_users];
        let mut item_pop = vec![0u32; n_items];
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            let (u, i) = (p.user as usize, p.item as usize);
            if u >= n_users {
                return Err(Error::IdOutOfRange { kind: "user", id: u, bound: n_users });
            }
            if i >= n_items {
                return Err(Error::IdOutOfRange { kind: "item", id: i, bound: n_items });
            }
            if !seen.insert(*p) {
                return Err(Error::ShapeMismatch(format!("duplicate interaction ({u}, {i})")));
            }
            user_pop[u] += 1;
            item_pop[i] += 1;
        }
        Ok(InteractionSet { n_users, n_items, pairs, user_pop, item_pop })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Interaction] {
        &self.pairs
    }

    pub fn user_pop(&self) -> &[u32] {
        &self.user_pop
    }

    pub fn item_pop(&self) -> &[u32] {
        &self.item_pop
    }

    pub fn density(&self) -> f64 {
        if self.n_users == 0 || self.n_items == 0 {
            return 0.0;
        }
        self.pairs.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    /// Sorted item lists per user.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut by_user = vec![Vec::new(); self.n_users];
        for p in &self.pairs {
            by_user[p.user as usize].push(p.item);
        }
        by_user.iter_mut().for_each(|v| v.sort_unstable());
        by_user
    }

    /// True when every user and item appears in at least one pair.
    pub fn is_covering(&self) -> bool {
        self.user_pop.iter().chain(&self.item_pop).all(|&p| p > 0)
    }

    /// Writes one `user<delim>item` line per pair, in stored order.
    pub fn write_to(&self, path: &Path, delim: Delimiter) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let d = delim.as_char();
        for p in &self.pairs {
            writeln!(w, "{}{d}{}", p.user, p.item).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file of already-remapped integer IDs (as written by
    /// [`InteractionSet::write_to`]). Counts are `max id + 1`.
    pub fn read_remapped(path: &Path, delim: Delimiter) -> Result<Self> {
        let raw = load_interactions(path, delim)?;
        let mut pairs = Vec::with_capacity(raw.len());
        let (mut n_users, mut n_items) = (0usize, 0usize);
        for (idx, r) in raw.iter().enumerate() {
            let parse = |s: &str, what: &str| -> Result<u32> {
                s.parse::<u32>().map_err(|_| Error::MalformedLine {
                    line: idx + 1,
                    reason: format!("{what} id {s:?} is not a non-negative integer"),
                })
            };
            let p = Interaction::new(parse(&r.user_key, "user")?, parse(&r.item_key, "item")?);
            n_users = n_users.max(p.user as usize + 1);
            n_items = n_items.max(p.item as usize + 1);
            pairs.push(p);
        }
        InteractionSet::from_pairs(n_users, n_items, pairs)
    }
}

/// Parses interaction lines from any reader.
pub fn parse_interactions<R: BufRead>(reader: R, delim: Delimiter) -> Result<Vec<RawInteraction>> {
    let d = delim.as_char();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedLine { line: line_no, reason: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(d).map(str::trim);
        let user = fields.next().unwrap_or_default();
        let item = fields.next().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            reason: format!("expected at least 2 fields separated by {d:?}"),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedLine { line: line_no, reason: "empty user or item key".into() });
        }
        // A third column may be a timestamp or (for rating dumps) a rating; it is never modeled.
        let timestamp = fields.next().and_then(|t| t.parse::<i64>().ok());
        out.push(RawInteraction { user_key: user.to_owned(), item_key: item.to_owned(), timestamp });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, delim: Delimiter) -> Result<Vec<RawInteraction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file), delim)
}

/// Original keys of remapped users and items, indexed by new ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMap {
    /// Two-column `key<TAB>id` file for one side.
    pub fn write_side(keys: &[String], path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, key) in keys.iter().enumerate() {
            writeln!(w, "{key}\t{id}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub set: InteractionSet,
    pub ids: IdMap,
}

/// Deduplicates, k-core filters to a fixpoint and remaps keys to
/// contiguous IDs in first-seen order.
pub fn preprocess(raw: &[RawInteraction], k_core: usize) -> Result<Preprocessed> {
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut user_ix: HashMap<&str, u32> = HashMap::new();
    let mut item_ix: HashMap<&str, u32> = HashMap::new();
    let mut user_keys: Vec<&str> = Vec::new();
    let mut item_keys: Vec<&str> = Vec::new();
    let mut seen = HashSet::with_capacity(raw.len());
    let mut pairs = Vec::with_capacity(raw.len());
    for r in raw {
        let u = *user_ix.entry(&r.user_key).or_insert_with(|| {
            user_keys.push(&r.user_key);
            (user_keys.len() - 1) as u32
        });
        let i = *item_ix.entry(&r.item_key).or_insert_with(|| {
            item_keys.push(&r.item_key);
            (item_keys.len() - 1) as u32
        });
        if seen.insert((u, i)) {
            pairs.push(Interaction::new(u, i));
        }
    }

    let mut user_deg = vec![0usize; user_keys.len()];
    let mut item_deg = vec![0usize; item_keys.len()];
    for p in &pairs {
        user_deg[p.user as usize] += 1;
        item_deg[p.item as usize] += 1;
    }
    let mut alive = vec![true; pairs.len()];
    loop {
        let mut changed = false;
        for (k, p) in pairs.iter().enumerate() {
            if alive[k] && (user_deg[p.user as usize] < k_core || item_deg[p.item as usize] < k_core) {
                alive[k] = false;
                user_deg[p.user as usize] -= 1;
                item_deg[p.item as usize] -= 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut user_new = vec![u32::MAX; user_keys.len()];
    let mut item_new = vec![u32::MAX; item_keys.len()];
    let mut ids = IdMap { users: Vec::new(), items: Vec::new() };
    let mut kept = Vec::new();
    for (p, _) in pairs.iter().zip(&alive).filter(|(_, &a)| a) {
        let (u, i) = (p.user as usize, p.item as usize);
        if user_new[u] == u32::MAX {
            user_new[u] = ids.users.len() as u32;
            ids.users.push(user_keys[u].to_owned());
        }
        if item_new[i] == u32::MAX {
            item_new[i] = ids.items.len() as u32;
            ids.items.push(item_keys[i].to_owned());
        }
        kept.push(Interaction::new(user_new[u], item_new[i]));
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterFiltering { k_core });
    }
    let set = InteractionSet::from_pairs(ids.users.len(), ids.items.len(), kept)?;
    Ok(Preprocessed { set, ids })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios((self.train, self.validation, self.test)));
        }
        Ok(())
    }
}

/// Per-user train/validation/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: InteractionSet,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
    train_items: Vec<Vec<u32>>,
}

/// Which held-out part to evaluate against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

impl DatasetSplit {
    /// Assembles a split from explicit parts; held-out pairs must be in range.
    pub fn from_parts(
        train: InteractionSet,
        validation: Vec<Interaction>,
        test: Vec<Interaction>,
        seed: u64,
    ) -> Result<Self> {
        for p in validation.iter().chain(&test) {
            if p.user as usize >= train.n_users() {
                return Err(Error::IdOutOfRange { kind: "user", id: p.user as usize, bound: train.n_users() });
            }
            if p.item as usize >= train.n_items() {
                return Err(Error::IdOutOfRange { kind: "item", id: p.item as usize, bound: train.n_items() });
            }
        }
        let train_items = train.items_by_user();
        Ok(DatasetSplit { train, validation, test, seed, train_items })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    /// Sorted training items of `user`.
    pub fn train_items(&self, user: usize) -> &[u32] {
        &self.train_items[user]
    }

    pub fn is_train_pair(&self, user: usize, item: u32) -> bool {
        self.train_items[user].binary_search(&item).is_ok()
    }

    pub fn target(&self, which: Target) -> &[Interaction] {
        match which {
            Target::Validation => &self.validation,
            Target::Test => &self.test,
        }
    }

    /// All interactions (train, validation and test) as one set.
    pub fn all_interactions(&self) -> InteractionSet {
        let mut pairs = self.train.pairs().to_vec();
        pairs.extend_from_slice(&self.validation);
        pairs.extend_from_slice(&self.test);
        InteractionSet::from_pairs(self.n_users(), self.n_items(), pairs)
            .expect("split parts are disjoint and in range")
    }
}

/// Splits each user's interactions independently: `floor(r·p(u))` go to
/// validation and to test, the rest to training.
pub fn split(data: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut rng = substream(seed, Stream::Split, 0);
    let mut by_user: Vec<Vec<u32>> = vec![Vec::new(); data.n_users()];
    for p in data.pairs() {
        by_user[p.user as usize].push(p.item);
    }
    let mut train = Vec::with_capacity(data.len());
    let (mut validation, mut test) = (Vec::new(), Vec::new());
    for (user, items) in by_user.iter_mut().enumerate() {
        items.shuffle(&mut rng);
        let n = items.len();
        let n_val = (ratios.validation * n as f64 + 1e-9).floor() as usize;
        let n_test = (ratios.test * n as f64 + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        if n > 0 && n_train == 0 {
            return Err(Error::InvalidRatios((ratios.train, ratios.validation, ratios.test)));
        }
        let user = user as u32;
        train.extend(items[..n_train].iter().map(|&i| Interaction::new(user, i)));
        validation.extend(items[n_train..n_train + n_val].iter().map(|&i| Interaction::new(user, i)));
        test.extend(items[n_train + n_val..].iter().map(|&i| Interaction::new(user, i)));
    }
    let train = InteractionSet::from_pairs(data.n_users(), data.n_items(), train)?;
    DatasetSplit::from_parts(train, validation, test, seed)
}

/// Paired user/item IDs of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveBatch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

impl PositiveBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Shuffles training pairs from `(seed, epoch)` and cuts them into batches;
/// the last batch may be short.
pub fn iter_batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    epoch: u32,
) -> impl Iterator<Item = PositiveBatch> + '_ {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Shuffle, epoch));
    let pairs = split.train.pairs();
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |chunk| PositiveBatch {
        users: chunk.iter().map(|&k| pairs[k].user as usize).collect(),
        items: chunk.iter().map(|&k| pairs[k].item as usize).collect(),
    })
}
