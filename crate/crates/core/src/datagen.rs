//! Synthetic catalogs, cluster-structured user sequences and user-level splits.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{bail, Result};
use crate::kvfile::KvMap;
use crate::numkit::Rng;
use crate::tokenspace::{build_vocab, encode_stream, ItemTuple, Template, TokenId, TokenStream, Vocabulary};

pub const TARGET_LEN: usize = 10;
pub const DEFAULT_STAY: f64 = 0.8;

/// Items that may not be redrawn until this many later draws have passed, so
/// any ten consecutive items are distinct.
const NO_REPEAT: usize = TARGET_LEN - 1;

/// Item semantic IDs; the cluster of an item is its level-1 code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    items: Vec<ItemTuple>,
    by_cluster: Vec<Vec<usize>>,
    index: HashMap<ItemTuple, usize>,
}

impl Catalog {
    pub fn from_items(items: Vec<ItemTuple>, vocab: &Vocabulary) -> Result<Self> {
        let mut by_cluster = vec![Vec::new(); vocab.codebook()];
        let mut index = HashMap::with_capacity(items.len());
        for (i, t) in items.iter().enumerate() {
            if t.codes().len() != vocab.levels() {
                bail!(Parse, "catalog item {i} has {} codes", t.codes().len());
            }
            by_cluster[t.codes()[0] as usize].push(i);
            if index.insert(t.clone(), i).is_some() {
                bail!(Invariant, "catalog item {i} duplicates an earlier semantic ID");
            }
        }
        Ok(Self { items, by_cluster, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: usize) -> &ItemTuple {
        &self.items[id]
    }

    pub fn items(&self) -> &[ItemTuple] {
        &self.items
    }

    pub fn cluster_of(&self, id: usize) -> usize {
        self.items[id].codes()[0] as usize
    }

    pub fn n_clusters(&self) -> usize {
        self.by_cluster.len()
    }

    pub fn cluster(&self, c: usize) -> &[usize] {
        &self.by_cluster[c]
    }

    /// Item id carrying this semantic ID, if any.
    pub fn lookup(&self, t: &ItemTuple) -> Option<usize> {
        self.index.get(t).copied()
    }
}

/// Builds `n_items` distinct semantic IDs. Item `i` lands in cluster `i mod C`;
/// the remaining levels are uniform, redrawn on collision.
pub fn gen_catalog(seed: u64, n_items: usize, vocab: &Vocabulary) -> Result<Catalog> {
    let c = vocab.codebook();
    let k = vocab.levels();
    let per_cluster = (c as u128).checked_pow(k as u32 - 1);
    let capacity = per_cluster.map(|p| p * c as u128);
    if capacity.is_some_and(|cap| (n_items as u128) > cap) {
        bail!(Config, "{n_items} items exceed the {c}^{k} semantic-ID capacity");
    }
    if n_items < c {
        bail!(Config, "{n_items} items cannot cover all {c} level-1 codes");
    }
    let mut rng = Rng::new(seed);
    let mut taken: HashSet<Vec<u32>> = HashSet::with_capacity(n_items);
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let first = (i % c) as u32;
        let mut codes = None;
        for _ in 0..64 {
            let cand: Vec<u32> = std::iter::once(first).chain((1..k).map(|_| rng.below(c) as u32)).collect();
            if !taken.contains(&cand) {
                codes = Some(cand);
                break;
            }
        }
        // dense cluster: pick uniformly among the tuples still free
        let codes = match codes {
            Some(cs) => cs,
            None => {
                let free: Vec<Vec<u32>> = (0..per_cluster.expect("dense only when small") as usize)
                    .map(|mut r| {
                        let mut cs = vec![first; k];
                        for slot in cs.iter_mut().skip(1).rev() {
                            *slot = (r % c) as u32;
                            r /= c;
                        }
                        cs
                    })
                    .filter(|cs| !taken.contains(cs))
                    .collect();
                free[rng.below(free.len())].clone()
            }
        };
        taken.insert(codes.clone());
        items.push(ItemTuple::new(codes, vocab)?);
    }
    Catalog::from_items(items, vocab)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: usize,
    pub history: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying in the current cluster between draws.
    pub stay: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { min_len: 15, max_len: 40, stay: DEFAULT_STAY }
    }
}

/// One interaction sequence per user from a cluster-level Markov chain.
/// The last ten draws become the target list.
pub fn gen_user_sequences(seed: u64, n_users: usize, catalog: &Catalog, cfg: &SequenceConfig) -> Result<Vec<UserRecord>> {
    if cfg.min_len < TARGET_LEN + 1 || cfg.max_len < cfg.min_len {
        bail!(Config, "sequence lengths [{}, {}] must start at {} or more", cfg.min_len, cfg.max_len, TARGET_LEN + 1);
    }
    if !(0.0..=1.0).contains(&cfg.stay) {
        bail!(Config, "stay probability {} outside [0, 1]", cfg.stay);
    }
    let root = Rng::new(seed);
    let n_clusters = catalog.n_clusters();
    let mut users = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut rng = root.fork(u as u64);
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        let mut cluster = rng.below(n_clusters);
        for t in 0..len {
            if t > 0 && n_clusters > 1 && rng.uniform() >= cfg.stay {
                cluster = jump(cluster, n_clusters, &mut rng);
            }
            let recent = &seq[seq.len().saturating_sub(NO_REPEAT)..];
            let mut eligible: Vec<usize> = catalog.cluster(cluster).iter().copied().filter(|i| !recent.contains(i)).collect();
            while eligible.is_empty() {
                cluster = jump(cluster, n_clusters, &mut rng);
                eligible = catalog.cluster(cluster).iter().copied().filter(|i| !recent.contains(i)).collect();
            }
            seq.push(eligible[rng.below(eligible.len())]);
        }
        let target = seq.split_off(len - TARGET_LEN);
        users.push(UserRecord { user_id: u, history: seq, target });
    }
    Ok(users)
}

fn jump(from: usize, n: usize, rng: &mut Rng) -> usize {
    let r = rng.below(n - 1);
    if r >= from { r + 1 } else { r }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of user ids, then an 8:1:1 partition.
pub fn build_splits(seed: u64, user_ids: &[usize]) -> Result<SplitSet> {
    if user_ids.len() < 10 {
        bail!(Config, "need at least 10 users to split, got {}", user_ids.len());
    }
    let mut ids = user_ids.to_vec();
    Rng::new(seed).shuffle(&mut ids);
    let n = ids.len();
    let tenth = (n + 5) / 10;
    let test = ids.split_off(n - tenth);
    let valid = ids.split_off(n - 2 * tenth);
    Ok(SplitSet { train: ids, valid, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_users: usize,
    pub levels: usize,
    pub codebook: usize,
    pub n_ctx: usize,
    pub sequences: SequenceConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { seed: 0, n_items: 500, n_users: 2000, levels: 4, codebook: 32, n_ctx: 16, sequences: SequenceConfig::default() }
    }
}

/// Everything the trainers and benchmarks read.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub template: Template,
    pub catalog: Catalog,
    pub users: Vec<UserRecord>,
    pub streams: Vec<TokenStream>,
    pub splits: SplitSet,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        let vocab = build_vocab(cfg.levels, cfg.codebook, cfg.n_ctx)?;
        let template = Template::standard(&vocab);
        let catalog = gen_catalog(cfg.seed, cfg.n_items, &vocab)?;
        let users = gen_user_sequences(cfg.seed.wrapping_add(1), cfg.n_users, &catalog, &cfg.sequences)?;
        let streams = users
            .iter()
            .map(|u| {
                let h: Vec<ItemTuple> = u.history.iter().map(|&i| catalog.item(i).clone()).collect();
                let t: Vec<ItemTuple> = u.target.iter().map(|&i| catalog.item(i).clone()).collect();
                encode_stream(&h, &t, &vocab, &template)
            })
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<usize> = users.iter().map(|u| u.user_id).collect();
        let splits = build_splits(cfg.seed.wrapping_add(2), &ids)?;
        Ok(Self { vocab, template, catalog, users, streams, splits })
    }

    pub fn stream(&self, user: usize) -> &TokenStream {
        &self.streams[user]
    }

    pub fn max_stream_len(&self) -> usize {
        self.streams.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    /// Writes `vocab.txt`, `catalog.tsv`, `data.tsv`, `template.txt` and the
    /// three split files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.vocab.write_manifest(&dir.join("vocab.txt"))?;
        let mut cat = String::new();
        for (i, t) in self.catalog.items().iter().enumerate() {
            writeln!(cat, "{i}\t{}\t{}", self.catalog.cluster_of(i), join(t.codes())).unwrap();
        }
        fs::write(dir.join("catalog.tsv"), cat)?;
        let mut data = String::new();
        for (u, s) in self.users.iter().zip(&self.streams) {
            let toks: Vec<u32> = s.tokens.iter().map(|t| t.0).collect();
            writeln!(data, "{}\t{}\t{}", u.user_id, s.t0, join(&toks)).unwrap();
        }
        fs::write(dir.join("data.tsv"), data)?;
        let mut tpl = KvMap::new();
        tpl.set("prefix", join(&self.template.prefix.iter().map(|t| t.0).collect::<Vec<_>>()));
        tpl.set("suffix", join(&self.template.suffix.iter().map(|t| t.0).collect::<Vec<_>>()));
        tpl.write(&dir.join("template.txt"))?;
        for (name, ids) in [("train.txt", &self.splits.train), ("valid.txt", &self.splits.valid), ("test.txt", &self.splits.test)] {
            let body: String = ids.iter().map(|i| format!("{i}\n")).collect();
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::read_manifest(&dir.join("vocab.txt"))?;
        let mut items = Vec::new();
        for (n, line) in fs::read_to_string(dir.join("catalog.tsv"))?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(n) {
                bail!(Parse, "catalog.tsv line {}: malformed", n + 1);
            }
            items.push(ItemTuple::new(parse_list(f[2], "catalog.tsv")?, &vocab)?);
        }
        let catalog = Catalog::from_items(items, &vocab)?;
        let tpl = KvMap::read(&dir.join("template.txt"))?;
        let ids = |key: &str| -> Result<Vec<TokenId>> {
            Ok(parse_list::<u32>(tpl.get_str(key)?, "template.txt")?.into_iter().map(TokenId).collect())
        };
        let template = Template { prefix: ids("prefix")?, suffix: ids("suffix")? };
        let mut users = Vec::new();
        let mut streams = Vec::new();
        for (n, line) in fs::read_to_string(dir.join("data.tsv"))?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                bail!(Parse, "data.tsv line {}: expected 3 fields", n + 1);
            }
            let user_id: usize = f[0].parse().map_err(|_| crate::Error::Parse(format!("data.tsv line {}: user id", n + 1)))?;
            if user_id != n {
                bail!(Parse, "data.tsv line {}: user ids must be dense and ordered", n + 1);
            }
            let t0: usize = f[1].parse().map_err(|_| crate::Error::Parse(format!("data.tsv line {}: t0", n + 1)))?;
            let toks: Vec<TokenId> = parse_list::<u32>(f[2], "data.tsv")?.into_iter().map(TokenId).collect();
            let stream = TokenStream::from_tokens(toks, t0, &vocab)?;
            let to_ids = |tokens: &[TokenId]| -> Result<Vec<usize>> {
                let parsed = crate::tokenspace::parse_response(tokens, &vocab);
                parsed
                    .items
                    .iter()
                    .map(|t| catalog.lookup(t).ok_or_else(|| crate::Error::Parse(format!("data.tsv line {}: unknown item", n + 1))))
                    .collect()
            };
            let target = to_ids(stream.response())?;
            let hist_start = 1 + template.prefix.len();
            let hist_end = t0 - template.suffix.len();
            let mut hist_tokens = stream.tokens[hist_start..hist_end].to_vec();
            hist_tokens.push(TokenId::EOS);
            let history = if hist_end > hist_start { to_ids(&hist_tokens)? } else { Vec::new() };
            users.push(UserRecord { user_id, history, target });
            streams.push(stream);
        }
        let read_ids = |name: &str| -> Result<Vec<usize>> { parse_list(&fs::read_to_string(dir.join(name))?, name) };
        let splits = SplitSet { train: read_ids("train.txt")?, valid: read_ids("valid.txt")?, test: read_ids("test.txt")? };
        if splits.train.iter().chain(&splits.valid).chain(&splits.test).any(|&u| u >= users.len()) {
            bail!(Parse, "split files name unknown users");
        }
        Ok(Self { vocab, template, catalog, users, streams, splits })
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: std::str::FromStr>(s: &str, file: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|x| x.parse().map_err(|_| crate::Error::Parse(format!("{file}: bad number `{x}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        build_vocab(4, 32, 16).unwrap()
    }

    #[test]
    fn catalog_exhaustive_single_level() {
        let v = build_vocab(1, 8, 0).unwrap();
        let cat = gen_catalog(3, 8, &v).unwrap();
        let mut firsts: Vec<u32> = cat.items().iter().map(|t| t.codes()[0]).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..8).collect::<Vec<_>>());
        assert!(gen_catalog(3, 9, &v).is_err());
        assert!(gen_catalog(3, 7, &v).is_err());
    }

    #[test]
    fn catalog_deterministic_and_distinct() {
        let a = gen_catalog(11, 500, &vocab()).unwrap();
        let b = gen_catalog(11, 500, &vocab()).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<&ItemTuple> = a.items().iter().collect();
        assert_eq!(distinct.len(), 500);
        assert!((0..a.n_clusters()).all(|c| !a.cluster(c).is_empty()));
    }

    #[test]
    fn dense_catalog_fills_capacity() {
        let v = build_vocab(2, 4, 0).unwrap();
        let cat = gen_catalog(1, 16, &v).unwrap();
        assert_eq!(cat.len(), 16);
    }

    #[test]
    fn user_lengths_split_rule() {
        let cat = gen_catalog(1, 500, &vocab()).unwrap();
        let cfg = SequenceConfig { min_len: 15, max_len: 15, stay: 0.8 };
        let users = gen_user_sequences(2, 20, &cat, &cfg).unwrap();
        for u in &users {
            assert_eq!(u.history.len(), 5);
            assert_eq!(u.target.len(), 10);
            let distinct: HashSet<_> = u.target.iter().collect();
            assert_eq!(distinct.len(), 10);
        }
        let bad = SequenceConfig { min_len: 10, ..cfg };
        assert!(gen_user_sequences(2, 20, &cat, &bad).is_err());
    }

    #[test]
    fn full_stay_keeps_one_cluster() {
        let cat = gen_catalog(1, 500, &vocab()).unwrap();
        let cfg = SequenceConfig { stay: 1.0, ..SequenceConfig::default() };
        for u in gen_user_sequences(5, 50, &cat, &cfg).unwrap() {
            let c = cat.cluster_of(u.target[0]);
            assert!(u.history.iter().chain(&u.target).all(|&i| cat.cluster_of(i) == c));
        }
    }

    #[test]
    fn adjacency_rate_matches_stay() {
        let cat = gen_catalog(1, 500, &vocab()).unwrap();
        let users = gen_user_sequences(9, 400, &cat, &SequenceConfig::default()).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for u in &users {
            let seq: Vec<usize> = u.history.iter().chain(&u.target).copied().collect();
            for w in seq.windows(2) {
                total += 1;
                same += (cat.cluster_of(w[0]) == cat.cluster_of(w[1])) as usize;
            }
        }
        assert!(total >= 10_000);
        let rate = same as f64 / total as f64;
        assert!((rate - 0.8).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn split_sizes_and_membership() {
        let s = build_splits(0, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let ids: Vec<usize> = (0..100).collect();
        let s = build_splits(4, &ids).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert!(build_splits(0, &[1, 2, 3]).is_err());
    }

    #[test]
    fn bigram_beats_uniform() {
        let cfg = GenConfig { n_users: 300, ..GenConfig::default() };
        let ds = Dataset::generate(&cfg).unwrap();
        let c = ds.catalog.n_clusters();
        let mut counts = vec![vec![0usize; c]; c];
        let seqs: Vec<Vec<usize>> =
            ds.users.iter().map(|u| u.history.iter().chain(&u.target).map(|&i| ds.catalog.cluster_of(i)).collect()).collect();
        let (fit, held) = seqs.split_at(200);
        for s in fit {
            for w in s.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
        }
        let (mut hit, mut n) = (0usize, 0usize);
        for s in held {
            for w in s.windows(2) {
                let row = &counts[w[0]];
                let pred = (0..c).max_by_key(|&j| (row[j], std::cmp::Reverse(j))).unwrap();
                hit += (pred == w[1]) as usize;
                n += 1;
            }
        }
        assert!(hit as f64 / n as f64 > 1.0 / c as f64 * 5.0);
    }

    #[test]
    fn files_round_trip_and_repeat_identically() {
        let cfg = GenConfig { n_users: 30, n_items: 64, ..GenConfig::default() };
        let ds = Dataset::generate(&cfg).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        ds.write(d1.path()).unwrap();
        Dataset::generate(&cfg).unwrap().write(d2.path()).unwrap();
        for f in ["vocab.txt", "catalog.tsv", "data.tsv", "template.txt", "train.txt", "valid.txt", "test.txt"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let back = Dataset::read(d1.path()).unwrap();
        assert_eq!(back.users, ds.users);
        assert_eq!(back.streams, ds.streams);
        assert_eq!(back.splits, ds.splits);
    }
}
