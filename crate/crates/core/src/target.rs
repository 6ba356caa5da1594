//! Decoder-only target model: training forward, cached decoding and batched
//! tree verification.

use std::path::Path;
use std::time::{Duration, Instant};

use crate::block::{Block, BlockVars};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{bail, Result};
use crate::kvfile::KvMap;
use crate::numkit::kernels;
use crate::numkit::{KeyLists, Rng, Tape, Tensor, Var};
use crate::tokenspace::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TargetConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self { d_model: 64, n_layers: 4, n_heads: 4, d_ff: 256, max_len: 512, vocab_size }
    }

    /// Heavier target used for the efficiency study.
    pub fn large(vocab_size: usize) -> Self {
        Self { d_model: 128, n_layers: 8, n_heads: 4, d_ff: 512, max_len: 512, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { d_model, n_layers, n_heads, d_ff, max_len, vocab_size } = *self;
        if d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_len == 0 || vocab_size == 0 {
            bail!(Config, "target config has a zero dimension: {self:?}");
        }
        if d_model % n_heads != 0 || d_model / n_heads > kernels::MAX_HEAD_DIM {
            bail!(Config, "d_model {d_model} does not split into {n_heads} heads");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("model", "target");
        m.set("d_model", self.d_model);
        m.set("n_layers", self.n_layers);
        m.set("n_heads", self.n_heads);
        m.set("d_ff", self.d_ff);
        m.set("max_len", self.max_len);
        m.set("vocab_size", self.vocab_size);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let cfg = Self {
            d_model: m.get("d_model")?,
            n_layers: m.get("n_layers")?,
            n_heads: m.get("n_heads")?,
            d_ff: m.get("d_ff")?,
            max_len: m.get("max_len")?,
            vocab_size: m.get("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Target parameters. The output head is the token embedding, transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub config: TargetConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
}

/// Output for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOut {
    pub logits: Tensor,
    /// Final-norm hidden state feeding the head.
    pub feature: Tensor,
}

/// Per-position outputs of a full forward pass.
#[derive(Debug, Clone)]
pub struct SequenceOut {
    pub logits: Tensor,
    pub features: Tensor,
}

/// Keys and values per layer for committed positions.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
    len: usize,
    d: usize,
    capacity: usize,
}

impl KvCache {
    pub fn new(config: &TargetConfig) -> Self {
        Self {
            layers: vec![(Vec::new(), Vec::new()); config.n_layers],
            len: 0,
            d: config.d_model,
            capacity: config.max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends the listed rows of a verification pass, in order.
    pub fn commit(&mut self, pass: &NodeKv, rows: &[usize]) -> Result<()> {
        if pass.layers.len() != self.layers.len() {
            bail!(Shape, "kv pass has {} layers, cache has {}", pass.layers.len(), self.layers.len());
        }
        if self.len + rows.len() > self.capacity {
            bail!(Range, "cache full: {} + {} > {}", self.len, rows.len(), self.capacity);
        }
        let d = self.d;
        if let Some(&bad) = rows.iter().find(|&&r| (r + 1) * d > pass.layers[0].0.len()) {
            bail!(Range, "row {bad} not in kv pass");
        }
        for ((ck, cv), (pk, pv)) in self.layers.iter_mut().zip(&pass.layers) {
            for &r in rows {
                ck.extend_from_slice(&pk[r * d..(r + 1) * d]);
                cv.extend_from_slice(&pv[r * d..(r + 1) * d]);
            }
        }
        self.len += rows.len();
        Ok(())
    }
}

/// Keys and values produced by a forward pass over new rows, by layer.
#[derive(Debug, Clone)]
pub struct NodeKv {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Result of [`TargetModel::verify_batch`].
#[derive(Debug, Clone)]
pub struct Verified {
    pub outs: Vec<StepOut>,
    pub kv: NodeKv,
}

struct RowsForward {
    logits: Vec<f32>,
    features: Vec<f32>,
    kv: NodeKv,
}

/// Output of [`TargetModel::generate_ar`].
#[derive(Debug, Clone)]
pub struct ArOutput {
    pub tokens: Vec<TokenId>,
    pub wall: Duration,
    pub calls: usize,
}

const EMB_STD: f64 = 0.05;

fn normal(dims: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| (rng.normal() * std) as f32).collect()).expect("positive dims")
}

impl TargetModel {
    pub fn init(config: TargetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let tok_emb = normal(&[config.vocab_size, d], EMB_STD, &mut rng);
        let pos_emb = normal(&[config.max_len, d], EMB_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::init(d, config.d_ff, config.n_layers, &mut rng))
            .collect();
        Ok(Self { config, tok_emb, pos_emb, blocks, final_norm: Tensor::full(&[d], 1.0) })
    }

    pub fn param_count(&self) -> usize {
        self.tok_emb.numel()
            + self.pos_emb.numel()
            + self.final_norm.numel()
            + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    /// All tensors in a fixed order shared with [`TargetVars::all`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("target.tok_emb", self.tok_emb.clone());
        c.push("target.pos_emb", self.pos_emb.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            b.save(&format!("target.layer{i}"), &mut c);
        }
        c.push("target.final_norm", self.final_norm.clone());
        c
    }

    pub fn from_checkpoint(config: TargetConfig, c: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            tok_emb: c.expect("target.tok_emb", &[config.vocab_size, d])?,
            pos_emb: c.expect("target.pos_emb", &[config.max_len, d])?,
            blocks: (0..config.n_layers)
                .map(|i| Block::load(&format!("target.layer{i}"), c, d, config.d_ff))
                .collect::<Result<_>>()?,
            final_norm: c.expect("target.final_norm", &[d])?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint(), &self.config.to_kv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, kv) = checkpoint::load(path)?;
        Self::from_checkpoint(TargetConfig::from_kv(&kv)?, &c)
    }

    /// Shared f32 forward over new rows against a cache.
    fn forward_rows(
        &self,
        cache: &KvCache,
        tokens: &[TokenId],
        positions: &[usize],
        attend: &[Vec<usize>],
    ) -> Result<RowsForward> {
        let cfg = &self.config;
        let (d, s, n) = (cfg.d_model, cfg.vocab_size, tokens.len());
        if cache.d != d || cache.layers.len() != cfg.n_layers {
            bail!(Shape, "cache does not match the model");
        }
        let mut x = Vec::with_capacity(n * d);
        for (&t, &p) in tokens.iter().zip(positions) {
            if t.index() >= s {
                bail!(Range, "token {t} outside vocabulary of {s}");
            }
            if p >= cfg.max_len {
                bail!(Range, "position {p} beyond max_len {}", cfg.max_len);
            }
            x.extend(self.tok_emb.row(t.index()).iter().zip(self.pos_emb.row(p)).map(|(a, b)| a + b));
        }
        let all: Vec<usize> = (0..n).collect();
        let mut kv = Vec::with_capacity(cfg.n_layers);
        for (b, (ck, cv)) in self.blocks.iter().zip(&cache.layers) {
            let out = b.forward_rows(cfg.n_heads, ck, cv, &x, n, attend, &all)?;
            x = out.x;
            kv.push((out.k, out.v));
        }
        let mut features = vec![0.0; n * d];
        for (src, dst) in x.chunks(d).zip(features.chunks_mut(d)) {
            kernels::rmsnorm_row(src, self.final_norm.data(), dst);
        }
        let logits = self.head(&features, n);
        Ok(RowsForward { logits, features, kv: NodeKv { layers: kv } })
    }

    /// `features · tok_embᵀ`, accumulated like [`kernels::matmul`].
    fn head(&self, features: &[f32], n: usize) -> Vec<f32> {
        let (d, s) = (self.config.d_model, self.config.vocab_size);
        let emb = self.tok_emb.data();
        let mut out = Vec::with_capacity(n * s);
        for f in features.chunks(d) {
            for e in emb.chunks(d) {
                let mut acc = 0.0f64;
                for c in 0..d {
                    acc += f[c] as f64 * e[c] as f64;
                }
                out.push(acc as f32);
            }
        }
        out
    }

    fn step_outs(&self, r: &RowsForward) -> Vec<StepOut> {
        let (d, s) = (self.config.d_model, self.config.vocab_size);
        r.features
            .chunks(d)
            .zip(r.logits.chunks(s))
            .map(|(f, l)| StepOut { logits: Tensor::vector(l.to_vec()), feature: Tensor::vector(f.to_vec()) })
            .collect()
    }

    /// Causal forward over whole streams, one at a time.
    pub fn forward_train(&self, streams: &[&[TokenId]]) -> Result<Vec<SequenceOut>> {
        streams
            .iter()
            .map(|toks| {
                let n = toks.len();
                if n == 0 {
                    bail!(Shape, "empty stream");
                }
                if n > self.config.max_len {
                    bail!(Range, "stream of {n} exceeds max_len {}", self.config.max_len);
                }
                let positions: Vec<usize> = (0..n).collect();
                let attend: Vec<Vec<usize>> = (0..n).map(|i| (0..i).collect()).collect();
                let r = self.forward_rows(&KvCache::new(&self.config), toks, &positions, &attend)?;
                Ok(SequenceOut {
                    logits: Tensor::new(&[n, self.config.vocab_size], r.logits)?,
                    features: Tensor::new(&[n, self.config.d_model], r.features)?,
                })
            })
            .collect()
    }

    pub fn decode_step(&self, token: TokenId, cache: &mut KvCache) -> Result<StepOut> {
        if cache.len >= cache.capacity {
            bail!(Range, "cache full at {}", cache.len);
        }
        let r = self.forward_rows(cache, &[token], &[cache.len], &[vec![]])?;
        cache.commit(&r.kv, &[0])?;
        Ok(self.step_outs(&r).pop().expect("one row"))
    }

    /// Appends `tokens` to the cache in one causal pass and returns the output
    /// at every one of them.
    pub fn prefill(&self, tokens: &[TokenId], cache: &mut KvCache) -> Result<Vec<StepOut>> {
        let n = tokens.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if cache.len + n > cache.capacity {
            bail!(Range, "prefill of {n} overflows cache at {}", cache.len);
        }
        let positions: Vec<usize> = (cache.len..cache.len + n).collect();
        let attend: Vec<Vec<usize>> = (0..n).map(|i| (0..i).collect()).collect();
        let r = self.forward_rows(cache, tokens, &positions, &attend)?;
        cache.commit(&r.kv, &(0..n).collect::<Vec<_>>())?;
        Ok(self.step_outs(&r))
    }

    /// Scores a token tree in one read-only pass. `parents[i]` must precede
    /// `i`; roots sit at the next cache position and each node one position
    /// past its parent.
    pub fn verify_batch(&self, tokens: &[TokenId], parents: &[Option<usize>], cache: &KvCache) -> Result<Verified> {
        if tokens.len() != parents.len() || tokens.is_empty() {
            bail!(Shape, "{} tokens for {} parent entries", tokens.len(), parents.len());
        }
        let mut attend: Vec<Vec<usize>> = Vec::with_capacity(tokens.len());
        let mut positions = Vec::with_capacity(tokens.len());
        for (i, p) in parents.iter().enumerate() {
            match *p {
                None => {
                    attend.push(vec![]);
                    positions.push(cache.len);
                }
                Some(p) if p < i => {
                    let mut a = attend[p].clone();
                    a.push(p);
                    attend.push(a);
                    positions.push(positions[p] + 1);
                }
                Some(p) => bail!(Structure, "node {i} has parent {p} that does not precede it"),
            }
        }
        let r = self.forward_rows(cache, tokens, &positions, &attend)?;
        Ok(Verified { outs: self.step_outs(&r), kv: r.kv })
    }

    /// Plain autoregressive decoding: the prompt minus its last token is
    /// prefilled, then every emitted token costs one decode step.
    pub fn generate_ar(&self, prompt: &[TokenId], max_new: usize, temperature: f32, rng: &mut Rng) -> Result<ArOutput> {
        let Some((&last, head)) = prompt.split_last() else {
            bail!(Argument, "empty prompt");
        };
        let start = Instant::now();
        let mut cache = KvCache::new(&self.config);
        self.prefill(head, &mut cache)?;
        let mut cur = last;
        let mut tokens = Vec::new();
        let mut calls = 0;
        while tokens.len() < max_new && cache.len < cache.capacity {
            let out = self.decode_step(cur, &mut cache)?;
            calls += 1;
            cur = sample_token(out.logits.data(), temperature, rng);
            tokens.push(cur);
            if cur == TokenId::EOS {
                break;
            }
        }
        Ok(ArOutput { tokens, wall: start.elapsed(), calls })
    }
}

/// Draws a token: argmax at temperature 0, otherwise one inverse-CDF draw.
pub fn sample_token(logits: &[f32], temperature: f32, rng: &mut Rng) -> TokenId {
    if temperature == 0.0 {
        return TokenId::from(kernels::argmax(logits));
    }
    let mut p = vec![0.0; logits.len()];
    kernels::softmax_row(logits, temperature, &mut p);
    TokenId::from(sample_index(&p, rng.uniform()))
}

/// Inverse-CDF lookup of `u ∈ [0, 1)` over `probs` in ascending index order.
pub fn sample_index(probs: &[f32], u: f64) -> usize {
    let mut cum = 0.0f64;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p as f64;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// A [`TargetModel`] registered on a tape.
#[derive(Debug, Clone)]
pub struct TargetVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
}

impl TargetVars {
    pub fn register(tape: &mut Tape, m: &TargetModel, trainable: bool) -> Self {
        Self {
            tok_emb: tape.leaf(&m.tok_emb, trainable),
            pos_emb: tape.leaf(&m.pos_emb, trainable),
            blocks: m.blocks.iter().map(|b| BlockVars::register(tape, b, trainable)).collect(),
            final_norm: tape.leaf(&m.final_norm, trainable),
        }
    }

    /// Same order as [`TargetModel::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend(b.vars);
        }
        out.push(self.final_norm);
        out
    }

    /// Differentiable causal forward over several streams packed row-wise.
    /// Returns `(logits, features)`, each with one row per token.
    pub fn forward(&self, tape: &mut Tape, cfg: &TargetConfig, streams: &[&[TokenId]]) -> Result<(Var, Var)> {
        let f = self.features(tape, cfg, streams)?;
        Ok((self.head(tape, f)?, f))
    }

    /// Tied head applied to feature rows.
    pub fn head(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let head = tape.transpose(self.tok_emb)?;
        tape.matmul(features, head)
    }

    /// Final-norm features for every token of the packed streams.
    pub fn features(&self, tape: &mut Tape, cfg: &TargetConfig, streams: &[&[TokenId]]) -> Result<Var> {
        let mut toks = Vec::new();
        let mut pos = Vec::new();
        let mut lists = KeyLists::new();
        for s in streams {
            if s.len() > cfg.max_len {
                bail!(Range, "stream of {} exceeds max_len {}", s.len(), cfg.max_len);
            }
            let base = toks.len();
            for (i, t) in s.iter().enumerate() {
                if t.index() >= cfg.vocab_size {
                    bail!(Range, "token {t} outside vocabulary");
                }
                toks.push(t.index());
                pos.push(i);
                lists.push(base..=base + i);
            }
        }
        if toks.is_empty() {
            bail!(Shape, "no tokens to forward");
        }
        let e = tape.gather(self.tok_emb, toks)?;
        let p = tape.gather(self.pos_emb, pos)?;
        let mut x = tape.add(e, p)?;
        for b in &self.blocks {
            x = b.forward(tape, x, cfg.n_heads, None, lists.clone())?;
        }
        tape.rmsnorm(x, self.final_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matmul;

    fn tiny() -> TargetModel {
        let cfg = TargetConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_len: 40, vocab_size: 12 };
        TargetModel::init(cfg, 3).unwrap()
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn single_bos_gives_one_row() {
        let m = tiny();
        let out = m.forward_train(&[&[TokenId::BOS]]).unwrap();
        assert_eq!(out[0].logits.dims(), &[1, 12]);
    }

    #[test]
    fn logits_are_feature_times_embedding() {
        let m = tiny();
        let s = toks(&[1, 5, 6, 7, 3, 9]);
        let out = &m.forward_train(&[&s]).unwrap()[0];
        let expect = matmul(&out.features, &m.tok_emb.transpose().unwrap()).unwrap();
        assert!(expect.bit_eq(&out.logits));
    }

    #[test]
    fn decode_steps_match_full_forward() {
        let m = tiny();
        let s = toks(&[1, 4, 5, 6, 7, 8, 9, 10, 11, 3]);
        let full = &m.forward_train(&[&s]).unwrap()[0];
        let mut cache = KvCache::new(&m.config);
        for (i, &t) in s.iter().enumerate() {
            let out = m.decode_step(t, &mut cache).unwrap();
            assert_eq!(cache.len(), i + 1);
            assert!(out.logits.data().iter().zip(full.logits.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(out.feature.data().iter().zip(full.features.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn batched_forward_matches_one_by_one() {
        let m = tiny();
        let a = toks(&[1, 4, 5]);
        let b = toks(&[1, 7, 8, 9, 2]);
        let both = m.forward_train(&[&a, &b]).unwrap();
        let solo = m.forward_train(&[&b]).unwrap();
        assert!(both[1].logits.bit_eq(&solo[0].logits));
    }

    #[test]
    fn prefill_equals_steps() {
        let m = tiny();
        let s = toks(&[1, 4, 5, 6]);
        let mut c1 = KvCache::new(&m.config);
        let last = m.prefill(&s, &mut c1).unwrap().pop().unwrap();
        let mut c2 = KvCache::new(&m.config);
        let mut out = None;
        for &t in &s {
            out = Some(m.decode_step(t, &mut c2).unwrap());
        }
        assert_eq!(last, out.unwrap());
        assert_eq!(c1.len(), 4);
    }

    #[test]
    fn cache_full_is_range_error() {
        let m = tiny();
        let mut c = KvCache::new(&m.config);
        for _ in 0..40 {
            m.decode_step(TokenId(4), &mut c).unwrap();
        }
        assert!(matches!(m.decode_step(TokenId(4), &mut c), Err(crate::Error::Range(_))));
        let long = vec![TokenId(4); 41];
        assert!(matches!(m.forward_train(&[&long]), Err(crate::Error::Range(_))));
    }

    #[test]
    fn random_tree_matches_path_decoding() {
        let m = tiny();
        let mut rng = Rng::new(11);
        let prefix = toks(&[1, 4, 5, 6, 7]);
        for _ in 0..5 {
            let n = 12;
            let mut parents = vec![None];
            let mut depth = vec![0usize];
            for i in 1..n {
                // keep depth ≤ 3
                let p = loop {
                    let p = rng.below(i);
                    if depth[p] < 3 {
                        break p;
                    }
                };
                parents.push(Some(p));
                depth.push(depth[p] + 1);
            }
            let tokens: Vec<TokenId> = (0..n).map(|_| TokenId(4 + rng.below(8) as u32)).collect();
            let mut cache = KvCache::new(&m.config);
            m.prefill(&prefix, &mut cache).unwrap();
            let v = m.verify_batch(&tokens, &parents, &cache).unwrap();
            assert_eq!(cache.len(), prefix.len());
            for i in 0..n {
                let mut path = vec![i];
                while let Some(p) = parents[*path.last().unwrap()] {
                    path.push(p);
                }
                path.reverse();
                let mut c = cache.clone();
                let mut out = None;
                for &j in &path {
                    out = Some(m.decode_step(tokens[j], &mut c).unwrap());
                }
                assert_eq!(out.unwrap(), v.outs[i], "node {i}");
            }
        }
    }

    #[test]
    fn commit_after_verify_matches_sequential_cache() {
        let m = tiny();
        let mut cache = KvCache::new(&m.config);
        m.prefill(&toks(&[1, 4]), &mut cache).unwrap();
        let tree = toks(&[5, 6, 7, 8]);
        let parents = [None, Some(0), Some(0), Some(2)];
        let v = m.verify_batch(&tree, &parents, &cache).unwrap();
        let mut committed = cache.clone();
        committed.commit(&v.kv, &[0, 2, 3]).unwrap();
        let a = m.decode_step(TokenId(9), &mut committed).unwrap();
        let mut seq = cache.clone();
        for t in toks(&[5, 7, 8]) {
            m.decode_step(t, &mut seq).unwrap();
        }
        let b = m.decode_step(TokenId(9), &mut seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn siblings_share_context() {
        let m = tiny();
        let mut cache = KvCache::new(&m.config);
        m.prefill(&toks(&[1, 4]), &mut cache).unwrap();
        let v = m.verify_batch(&toks(&[5, 6, 6]), &[None, Some(0), Some(0)], &cache).unwrap();
        assert_eq!(v.outs[1], v.outs[2]);
        let one = m.verify_batch(&toks(&[5]), &[None], &cache).unwrap();
        let mut c = cache.clone();
        assert_eq!(one.outs[0], m.decode_step(TokenId(5), &mut c).unwrap());
    }

    #[test]
    fn child_before_parent_is_structure_error() {
        let m = tiny();
        let cache = KvCache::new(&m.config);
        let r = m.verify_batch(&toks(&[5, 6]), &[Some(1), None], &cache);
        assert!(matches!(r, Err(crate::Error::Structure(_))));
    }

    #[test]
    fn sampling_rules() {
        let mut rng = Rng::new(0);
        let mut l = vec![0.0f32; 12];
        l[7] = 50.0;
        assert_eq!(sample_token(&l, 0.0, &mut rng), TokenId(7));
        assert_eq!(sample_index(&[0.25; 4], 0.6), 2);
        assert_eq!(sample_token(&[1.0, 3.0, 3.0], 0.0, &mut rng), TokenId(1));
        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..20).map(|_| sample_token(&[0.1, 0.5, 0.2, 0.9], 1.0, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn ar_accounting() {
        let m = tiny();
        let prompt = toks(&[1, 4, 5]);
        let mut rng = Rng::new(1);
        let one = m.generate_ar(&prompt, 1, 0.0, &mut rng).unwrap();
        assert_eq!((one.tokens.len(), one.calls), (1, 1));
        let a = m.generate_ar(&prompt, 20, 0.0, &mut rng).unwrap();
        let b = m.generate_ar(&prompt, 20, 0.0, &mut rng).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.calls, a.tokens.len());
        let s = m.generate_ar(&prompt, 20, 1.0, &mut rng).unwrap();
        assert_eq!(s.calls, s.tokens.len());
    }

    #[test]
    fn tape_forward_matches_inference() {
        let m = tiny();
        let a = toks(&[1, 4, 5, 6]);
        let b = toks(&[1, 7, 8]);
        let mut tape = Tape::new();
        let vars = TargetVars::register(&mut tape, &m, false);
        let (logits, _) = vars.forward(&mut tape, &m.config, &[&a, &b]).unwrap();
        let inf = m.forward_train(&[&a, &b]).unwrap();
        let mut rows = inf[0].logits.data().to_vec();
        rows.extend_from_slice(inf[1].logits.data());
        for (x, y) in tape.values(logits).iter().zip(&rows) {
            assert!((*x as f32 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny();
        let p = dir.path().join("t.ckpt");
        m.save(&p).unwrap();
        assert_eq!(TargetModel::load(&p).unwrap(), m);
    }
}
