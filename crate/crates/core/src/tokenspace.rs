//! Token-id layout, flattened prompt/response streams and slot labels.

use std::fmt;
use std::path::Path;

use crate::error::{bail, Result};
use crate::kvfile::KvMap;

pub const MANIFEST_VERSION: u32 = 1;

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    pub const SEP: TokenId = TokenId(3);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

const SPECIALS: usize = 4;

/// Token-id layout: specials, then context words, then `levels × codebook`
/// semantic codes, level-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    levels: usize,
    codebook: usize,
    n_ctx: usize,
}

/// Per-position marker feeding the item position embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotLabel {
    /// Level within an item, starting at 1.
    Slot(usize),
    Sep,
    Ctx,
}

impl SlotLabel {
    /// Row of the label in a `(levels + 2)`-row table: slots first, then
    /// `Sep`, then `Ctx`.
    pub fn row(self, levels: usize) -> usize {
        match self {
            SlotLabel::Slot(k) => k - 1,
            SlotLabel::Sep => levels,
            SlotLabel::Ctx => levels + 1,
        }
    }

    /// All labels in row order.
    pub fn all(levels: usize) -> Vec<SlotLabel> {
        (1..=levels).map(SlotLabel::Slot).chain([SlotLabel::Sep, SlotLabel::Ctx]).collect()
    }
}

/// Semantic ID of one item: one code per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemTuple(Vec<u32>);

impl ItemTuple {
    pub fn new(codes: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        if codes.len() != vocab.levels {
            bail!(Argument, "item has {} codes, vocabulary has {} levels", codes.len(), vocab.levels);
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= vocab.codebook) {
            bail!(Range, "code {c} outside codebook of {}", vocab.codebook);
        }
        Ok(Self(codes))
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }
}

/// Builds the layout. Errors when the id space does not fit `u32`.
pub fn build_vocab(levels: usize, codebook: usize, n_ctx: usize) -> Result<Vocabulary> {
    if levels < 1 || codebook < 2 {
        bail!(Config, "need at least 1 level and 2 codes per level, got k={levels} c={codebook}");
    }
    let size = levels
        .checked_mul(codebook)
        .and_then(|s| s.checked_add(SPECIALS + n_ctx));
    match size {
        Some(s) if s <= u32::MAX as usize => Ok(Vocabulary { levels, codebook, n_ctx }),
        _ => bail!(Config, "vocabulary k={levels} c={codebook} n_ctx={n_ctx} overflows the id space"),
    }
}

impl Vocabulary {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook(&self) -> usize {
        self.codebook
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.n_ctx + self.levels * self.codebook
    }

    fn code_base(&self) -> usize {
        SPECIALS + self.n_ctx
    }

    /// Id of context word `i`.
    pub fn ctx_word(&self, i: usize) -> Result<TokenId> {
        if i >= self.n_ctx {
            bail!(Range, "context word {i} of {}", self.n_ctx);
        }
        Ok(TokenId::from(SPECIALS + i))
    }

    /// Id of code `code` at `level` (1-based).
    pub fn semantic(&self, level: usize, code: u32) -> Result<TokenId> {
        if level < 1 || level > self.levels || code as usize >= self.codebook {
            bail!(Range, "(level {level}, code {code}) outside k={} c={}", self.levels, self.codebook);
        }
        Ok(TokenId::from(self.code_base() + (level - 1) * self.codebook + code as usize))
    }

    /// `(level, code)` of a semantic id; `None` for every other id.
    pub fn decode(&self, id: TokenId) -> Option<(usize, u32)> {
        let i = id.index();
        if i < self.code_base() || i >= self.size() {
            return None;
        }
        let off = i - self.code_base();
        Some((off / self.codebook + 1, (off % self.codebook) as u32))
    }

    pub fn slot_of(&self, id: TokenId) -> Result<SlotLabel> {
        if id.index() >= self.size() {
            bail!(Range, "token {id} outside vocabulary of {}", self.size());
        }
        Ok(match self.decode(id) {
            Some((level, _)) => SlotLabel::Slot(level),
            None if id == TokenId::SEP => SlotLabel::Sep,
            None => SlotLabel::Ctx,
        })
    }

    /// Slot label of every id, indexed by id.
    pub fn slot_table(&self) -> Vec<SlotLabel> {
        (0..self.size()).map(|i| self.slot_of(TokenId::from(i)).expect("in range")).collect()
    }

    pub fn item_tokens(&self, item: &ItemTuple) -> Result<Vec<TokenId>> {
        if item.0.len() != self.levels {
            bail!(Argument, "item has {} codes, vocabulary has {} levels", item.0.len(), self.levels);
        }
        item.0.iter().enumerate().map(|(l, &c)| self.semantic(l + 1, c)).collect()
    }

    pub fn to_manifest(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("k", self.levels);
        m.set("c", self.codebook);
        m.set("n_ctx", self.n_ctx);
        m.set("version", MANIFEST_VERSION);
        m
    }

    pub fn from_manifest(m: &KvMap) -> Result<Self> {
        let version: u32 = m.get("version")?;
        if version != MANIFEST_VERSION {
            bail!(Parse, "unsupported vocabulary manifest version {version}");
        }
        build_vocab(m.get("k")?, m.get("c")?, m.get("n_ctx")?)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        self.to_manifest().write(path)
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        Self::from_manifest(&KvMap::read(path)?)
    }
}

/// Fixed instruction wrapped around the history: `prefix` follows BOS and
/// `suffix` precedes the response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Template {
    pub prefix: Vec<TokenId>,
    pub suffix: Vec<TokenId>,
}

impl Template {
    /// Five prefix and three suffix context words, cycling through the
    /// available ones (empty when the vocabulary has none).
    pub fn standard(vocab: &Vocabulary) -> Self {
        if vocab.n_ctx == 0 {
            return Self::default();
        }
        let word = |i: usize| vocab.ctx_word(i % vocab.n_ctx).expect("cycled into range");
        Self { prefix: (0..5).map(word).collect(), suffix: (5..8).map(word).collect() }
    }
}

/// Flattened prompt + response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<TokenId>,
    /// Index of the first response token.
    pub t0: usize,
    pub labels: Vec<SlotLabel>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.t0]
    }

    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.t0..]
    }

    /// Rebuilds a stream from stored tokens, recomputing labels.
    pub fn from_tokens(tokens: Vec<TokenId>, t0: usize, vocab: &Vocabulary) -> Result<Self> {
        if tokens.first() != Some(&TokenId::BOS) {
            bail!(Structure, "stream must start with BOS");
        }
        if t0 == 0 || t0 >= tokens.len() {
            bail!(Structure, "response start {t0} outside stream of {}", tokens.len());
        }
        let labels = tokens.iter().map(|&t| vocab.slot_of(t)).collect::<Result<_>>()?;
        Ok(Self { tokens, t0, labels })
    }
}

fn push_items(out: &mut Vec<TokenId>, items: &[ItemTuple], vocab: &Vocabulary) -> Result<()> {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(TokenId::SEP);
        }
        out.extend(vocab.item_tokens(item)?);
    }
    Ok(())
}

/// `BOS · prefix · history · suffix · target · EOS`, items `SEP`-separated.
pub fn encode_stream(
    history: &[ItemTuple],
    target: &[ItemTuple],
    vocab: &Vocabulary,
    template: &Template,
) -> Result<TokenStream> {
    if target.is_empty() {
        bail!(Argument, "target list is empty");
    }
    let mut tokens = vec![TokenId::BOS];
    tokens.extend(&template.prefix);
    push_items(&mut tokens, history, vocab)?;
    tokens.extend(&template.suffix);
    let t0 = tokens.len();
    push_items(&mut tokens, target, vocab)?;
    tokens.push(TokenId::EOS);
    TokenStream::from_tokens(tokens, t0, vocab)
}

/// Items recovered from generated tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub items: Vec<ItemTuple>,
    /// True when the tokens were a non-empty list of items ended by EOS.
    pub well_formed: bool,
}

/// Tolerant parse of generated response tokens. Stops at EOS or at the first
/// structural violation, keeping the complete items read so far.
pub fn parse_response(tokens: &[TokenId], vocab: &Vocabulary) -> ParsedResponse {
    let mut items = Vec::new();
    let mut codes = Vec::with_capacity(vocab.levels);
    let mut after_sep = false;
    for &t in tokens {
        let level_ok = vocab.decode(t).filter(|&(level, _)| level == codes.len() + 1);
        if let Some((_, code)) = level_ok {
            codes.push(code);
            if codes.len() == vocab.levels {
                items.push(ItemTuple(std::mem::take(&mut codes)));
                after_sep = false;
            }
            continue;
        }
        let at_boundary = codes.is_empty() && !after_sep && !items.is_empty();
        if t == TokenId::SEP && at_boundary {
            after_sep = true;
            continue;
        }
        let well_formed = t == TokenId::EOS && at_boundary;
        return ParsedResponse { items, well_formed };
    }
    ParsedResponse { items, well_formed: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_vocab() -> Vocabulary {
        build_vocab(4, 32, 16).unwrap()
    }

    fn item(codes: &[u32], v: &Vocabulary) -> ItemTuple {
        ItemTuple::new(codes.to_vec(), v).unwrap()
    }

    #[test]
    fn layout_examples() {
        let v = default_vocab();
        assert_eq!(v.size(), 148);
        assert_eq!(v.semantic(2, 0).unwrap(), TokenId(52));
        let small = build_vocab(1, 2, 0).unwrap();
        assert_eq!(small.size(), 6);
        assert_eq!(small.semantic(1, 0).unwrap(), TokenId(4));
        assert_eq!(small.semantic(1, 1).unwrap(), TokenId(5));
        assert!(build_vocab(1 << 20, 1 << 20, 0).is_err());
        assert!(build_vocab(0, 4, 0).is_err());
    }

    #[test]
    fn slot_examples() {
        let v = default_vocab();
        assert_eq!(v.slot_of(TokenId::SEP).unwrap(), SlotLabel::Sep);
        assert_eq!(v.slot_of(TokenId::BOS).unwrap(), SlotLabel::Ctx);
        assert_eq!(v.slot_of(TokenId(52)).unwrap(), SlotLabel::Slot(2));
        assert!(v.slot_of(TokenId(148)).is_err());
        assert_eq!(SlotLabel::all(4).len(), 6);
    }

    #[test]
    fn minimal_stream() {
        let v = default_vocab();
        let s = encode_stream(&[], &[item(&[0, 0, 0, 0], &v)], &v, &Template::default()).unwrap();
        let ids: Vec<u32> = s.tokens.iter().map(|t| t.0).collect();
        assert_eq!(ids, vec![1, 20, 52, 84, 116, 2]);
        assert_eq!(s.t0, 1);
        assert!(encode_stream(&[], &[], &v, &Template::default()).is_err());
    }

    #[test]
    fn separators_only_between_items() {
        let v = default_vocab();
        let t = [item(&[1, 2, 3, 4], &v), item(&[5, 6, 7, 8], &v)];
        let s = encode_stream(&[], &t, &v, &Template::standard(&v)).unwrap();
        let resp = s.response();
        assert_eq!(resp.iter().filter(|&&x| x == TokenId::SEP).count(), 1);
        assert_ne!(resp[resp.len() - 2], TokenId::SEP);
        assert_eq!(resp.len(), 2 * 5 - 1 + 1);
    }

    #[test]
    fn parse_stops_at_level_violation() {
        let v = default_vocab();
        let mut toks = Vec::new();
        for i in 0..2 {
            toks.extend(v.item_tokens(&item(&[i, i, i, i], &v)).unwrap());
            toks.push(TokenId::SEP);
        }
        toks.extend([v.semantic(1, 0).unwrap(), v.semantic(2, 0).unwrap(), v.semantic(2, 1).unwrap()]);
        let p = parse_response(&toks, &v);
        assert_eq!(p.items.len(), 2);
        assert!(!p.well_formed);
    }

    #[test]
    fn parse_ten_items() {
        let v = default_vocab();
        let items: Vec<ItemTuple> = (0..10).map(|i| item(&[i, 1, 2, 3], &v)).collect();
        let s = encode_stream(&items[..3], &items, &v, &Template::standard(&v)).unwrap();
        let p = parse_response(s.response(), &v);
        assert!(p.well_formed);
        assert_eq!(p.items, items);
    }

    #[test]
    fn parse_rejects_trailing_sep_and_truncation() {
        let v = default_vocab();
        let mut toks = v.item_tokens(&item(&[0, 0, 0, 0], &v)).unwrap();
        toks.push(TokenId::SEP);
        let mut with_eos = toks.clone();
        with_eos.push(TokenId::EOS);
        assert!(!parse_response(&with_eos, &v).well_formed);
        assert_eq!(parse_response(&toks, &v).items.len(), 1);
        assert!(!parse_response(&[TokenId::EOS], &v).well_formed);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = default_vocab();
        v.write_manifest(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in ["k=4", "c=32", "n_ctx=16", "version=1"] {
            assert!(text.lines().any(|l| l == line), "{text}");
        }
        assert_eq!(Vocabulary::read_manifest(&path).unwrap(), v);
    }

    fn arb_case() -> impl Strategy<Value = (Vocabulary, Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        (1usize..5, 2usize..9, 0usize..6).prop_flat_map(|(k, c, n)| {
            let v = build_vocab(k, c, n).unwrap();
            let tuple = proptest::collection::vec(0..c as u32, k);
            (
                Just(v),
                proptest::collection::vec(tuple.clone(), 0..4),
                proptest::collection::vec(tuple, 1..6),
            )
        })
    }

    proptest! {
        #[test]
        fn id_round_trip((v, _, _) in arb_case()) {
            for level in 1..=v.levels() {
                for code in 0..v.codebook() as u32 {
                    let id = v.semantic(level, code).unwrap();
                    prop_assert_eq!(v.decode(id), Some((level, code)));
                }
            }
        }

        #[test]
        fn labels_and_parse((v, hist, target) in arb_case()) {
            let hist: Vec<ItemTuple> = hist.into_iter().map(|c| ItemTuple::new(c, &v).unwrap()).collect();
            let target: Vec<ItemTuple> = target.into_iter().map(|c| ItemTuple::new(c, &v).unwrap()).collect();
            let s = encode_stream(&hist, &target, &v, &Template::standard(&v)).unwrap();
            prop_assert_eq!(s.tokens[0], TokenId::BOS);
            for (t, l) in s.tokens.iter().zip(&s.labels) {
                prop_assert_eq!(v.slot_of(*t).unwrap(), *l);
            }
            let resp = &s.labels[s.t0..s.len() - 1];
            prop_assert_ne!(resp[0], SlotLabel::Sep);
            prop_assert_ne!(resp[resp.len() - 1], SlotLabel::Sep);
            for chunk in resp.split(|l| *l == SlotLabel::Sep) {
                let want: Vec<SlotLabel> = (1..=v.levels()).map(SlotLabel::Slot).collect();
                prop_assert_eq!(chunk, &want[..]);
            }
            let p = parse_response(s.response(), &v);
            prop_assert!(p.well_formed);
            prop_assert_eq!(p.items, target);
        }
    }
}
