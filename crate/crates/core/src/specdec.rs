//! Draft–verify decoding loop with exact greedy and rejection-sampling
//! acceptance.

use std::time::{Duration, Instant};

use crate::draft::{CandidateTree, DraftModel, DraftState, Sampling};
use crate::error::{bail, Result};
use crate::numkit::kernels;
use crate::numkit::Rng;
use crate::target::{sample_index, KvCache, StepOut, TargetModel, Verified};
use crate::tokenspace::TokenId;

/// Outcome of verifying one tree: accepted node indices in root-to-leaf
/// order and the token the target contributes after them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acceptance {
    pub path: Vec<usize>,
    pub bonus: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundStats {
    pub accepted: usize,
    pub committed: usize,
    pub target_calls: usize,
    pub draft_calls: usize,
    pub tree_size: usize,
    pub draft_time: Duration,
    pub verify_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionReport {
    pub tokens: Vec<TokenId>,
    pub rounds: Vec<RoundStats>,
    pub wall: Duration,
}

impl SessionReport {
    /// Mean tokens committed per verification round, bonus included.
    pub fn tau(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.committed() as f64 / self.rounds.len() as f64
    }

    pub fn committed(&self) -> usize {
        self.rounds.iter().map(|r| r.committed).sum()
    }

    pub fn accepted(&self) -> usize {
        self.rounds.iter().map(|r| r.accepted).sum()
    }

    pub fn target_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.target_calls).sum()
    }

    pub fn draft_calls(&self) -> usize {
        self.rounds.iter().map(|r| r.draft_calls).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub depth: usize,
    pub width: usize,
    pub temperature: f32,
    pub max_new: usize,
}

fn check_siblings(tree: &CandidateTree, n: usize) -> Result<Vec<usize>> {
    let kids: Vec<usize> = tree.children(n).collect();
    for (i, &a) in kids.iter().enumerate() {
        if kids[..i].iter().any(|&b| tree.nodes[b].token == tree.nodes[a].token) {
            bail!(Structure, "node {n} has two children with token {}", tree.nodes[a].token);
        }
    }
    Ok(kids)
}

/// Follows the children matching the target's argmax from the root.
pub fn verify_greedy(tree: &CandidateTree, outs: &[StepOut]) -> Result<Acceptance> {
    if outs.len() != tree.len() {
        bail!(Shape, "{} target outputs for {} tree nodes", outs.len(), tree.len());
    }
    let mut cur = 0;
    let mut path = Vec::new();
    loop {
        let best = TokenId::from(kernels::argmax(outs[cur].logits.data()));
        let kids = check_siblings(tree, cur)?;
        match kids.into_iter().find(|&c| tree.nodes[c].token == best) {
            Some(c) => {
                path.push(c);
                cur = c;
            }
            None => return Ok(Acceptance { path, bonus: best }),
        }
    }
}

fn softmax_f64(logits: &[f32], temperature: f32) -> Vec<f64> {
    let t = temperature as f64;
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Multi-branch rejection sampling over each node's children in the order
/// they were drawn (without replacement) from the draft distribution.
///
/// A child `x` is accepted with probability `min(1, p(x)/q'(x))`, where `q'`
/// is the draft distribution renormalized over the children not yet tried.
/// After a rejection `p` becomes `normalize(max(p − q', 0))`. When every
/// child is rejected the token is drawn from the remaining `p`.
pub fn verify_stochastic(tree: &CandidateTree, outs: &[StepOut], temperature: f32, rng: &mut Rng) -> Result<Acceptance> {
    if outs.len() != tree.len() {
        bail!(Shape, "{} target outputs for {} tree nodes", outs.len(), tree.len());
    }
    if temperature <= 0.0 {
        bail!(Argument, "stochastic verification needs a positive temperature");
    }
    let mut cur = 0;
    let mut path = Vec::new();
    'descend: loop {
        let mut p = softmax_f64(outs[cur].logits.data(), temperature);
        let kids = check_siblings(tree, cur)?;
        if !kids.is_empty() {
            let Some(q) = tree.nodes[cur].q.as_ref() else {
                bail!(Internal, "expanded node {cur} has no draft distribution");
            };
            let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            let tokens: Vec<usize> = kids.iter().map(|&c| tree.nodes[c].token.index()).collect();
            if let Some(i) = accept_among(&mut p, &q, &tokens, rng)? {
                path.push(kids[i]);
                cur = kids[i];
                continue 'descend;
            }
        }
        let pf: Vec<f32> = p.iter().map(|&x| x as f32).collect();
        let bonus = TokenId::from(sample_index(&pf, rng.uniform()));
        return Ok(Acceptance { path, bonus });
    }
}

/// Tries `candidates` in order against target `p`; returns the accepted
/// position, leaving `p` as the residual when all are rejected.
pub fn accept_among(p: &mut [f64], q: &[f64], candidates: &[usize], rng: &mut Rng) -> Result<Option<usize>> {
    let mut tried = vec![false; q.len()];
    for (i, &x) in candidates.iter().enumerate() {
        // summed directly: 1 - tried mass cancels to zero when one token holds nearly all of q
        let rest: f64 = q.iter().zip(&tried).filter(|(_, &t)| !t).map(|(&v, _)| v).sum();
        if q[x] <= 0.0 || rest <= 0.0 {
            bail!(Internal, "candidate {x} has zero draft probability");
        }
        let qx = q[x] / rest;
        let u = rng.uniform();
        if u < p[x] / qx {
            return Ok(Some(i));
        }
        let mut sum = 0.0;
        for (y, py) in p.iter_mut().enumerate() {
            let qy = if tried[y] { 0.0 } else { q[y] / rest };
            *py = (*py - qy).max(0.0);
            sum += *py;
        }
        if sum > 0.0 {
            p.iter_mut().for_each(|x| *x /= sum);
        }
        tried[x] = true;
    }
    Ok(None)
}

/// Decoding state shared by the target and draft for one session.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    pub target: &'a TargetModel,
    pub draft: &'a DraftModel,
    pub cache: KvCache,
    pub draft_state: DraftState,
    /// Last committed token, not yet run through the target.
    pub root: TokenId,
    /// Target feature at the position before the root.
    pub root_feature: Vec<f32>,
}

impl<'a> Session<'a> {
    /// Prefills both caches with `prompt` minus its last token, which
    /// becomes the first root.
    pub fn start(target: &'a TargetModel, draft: &'a DraftModel, prompt: &[TokenId]) -> Result<Self> {
        let Some((&root, head)) = prompt.split_last() else {
            bail!(Argument, "empty prompt");
        };
        let d = target.config.d_model;
        if draft.config.d_model != d || draft.config.vocab_size != target.config.vocab_size {
            bail!(Config, "draft and target dimensions differ");
        }
        let mut cache = KvCache::new(&target.config);
        let outs = target.prefill(head, &mut cache)?;
        let mut draft_state = DraftState::new(&draft.config);
        let zero = vec![0.0f32; d];
        let rows: Vec<(TokenId, &[f32])> = head
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, if i == 0 { zero.as_slice() } else { outs[i - 1].feature.data() }))
            .collect();
        draft.push_context(&target.tok_emb, &mut draft_state, &rows)?;
        let root_feature = outs.last().map_or(zero, |o| o.feature.data().to_vec());
        Ok(Self { target, draft, cache, draft_state, root, root_feature })
    }

    /// Commits the accepted path and bonus to both caches and returns the
    /// committed tokens.
    pub fn commit(&mut self, tree: &CandidateTree, verified: &Verified, acc: &Acceptance) -> Result<Vec<TokenId>> {
        let mut prev = 0;
        for &n in &acc.path {
            if n >= tree.len() || tree.nodes[n].parent != Some(prev) {
                bail!(Structure, "accepted path is not connected to the root");
            }
            prev = n;
        }
        let rows: Vec<usize> = std::iter::once(0).chain(acc.path.iter().copied()).collect();
        self.cache.commit(&verified.kv, &rows)?;
        let mut ctx: Vec<(TokenId, &[f32])> = vec![(self.root, &self.root_feature)];
        for w in rows.windows(2) {
            ctx.push((tree.nodes[w[1]].token, verified.outs[w[0]].feature.data()));
        }
        self.draft.push_context(&self.target.tok_emb, &mut self.draft_state, &ctx)?;
        self.draft_state.reset_depth();
        let mut tokens: Vec<TokenId> = acc.path.iter().map(|&n| tree.nodes[n].token).collect();
        tokens.push(acc.bonus);
        self.root = acc.bonus;
        self.root_feature = verified.outs[*rows.last().expect("root")].feature.data().to_vec();
        Ok(tokens)
    }

    /// One draft–verify round. Returns the committed tokens and counters.
    pub fn round(&mut self, depth: usize, width: usize, temperature: f32, rng: &mut Rng) -> Result<(Vec<TokenId>, RoundStats)> {
        let room = self.cache.capacity().saturating_sub(self.cache.len());
        if room == 0 {
            bail!(Range, "target cache is full");
        }
        let depth = depth.min(room - 1);
        let t0 = Instant::now();
        let tree = if depth == 0 {
            CandidateTree::new(self.root)
        } else {
            let sampling = if temperature > 0.0 { Sampling::Stochastic { temperature, rng: &mut *rng } } else { Sampling::Greedy };
            self.draft.propose_tree(&self.target.tok_emb, self.root, &self.root_feature, depth, width, sampling, &self.draft_state)?
        };
        let t1 = Instant::now();
        let verified = self.target.verify_batch(&tree.tokens(), &tree.parents(), &self.cache)?;
        let acc = if temperature > 0.0 {
            verify_stochastic(&tree, &verified.outs, temperature, rng)?
        } else {
            verify_greedy(&tree, &verified.outs)?
        };
        let t2 = Instant::now();
        let tokens = self.commit(&tree, &verified, &acc)?;
        let stats = RoundStats {
            accepted: acc.path.len(),
            committed: tokens.len(),
            target_calls: 1,
            draft_calls: tree.draft_calls,
            tree_size: tree.len(),
            draft_time: t1 - t0,
            verify_time: t2 - t1,
        };
        Ok((tokens, stats))
    }
}

/// Speculative generation until EOS or `max_new` tokens.
pub fn run_session(
    target: &TargetModel,
    draft: &DraftModel,
    prompt: &[TokenId],
    cfg: &SessionConfig,
    rng: &mut Rng,
) -> Result<SessionReport> {
    if cfg.depth == 0 || cfg.width == 0 {
        bail!(Argument, "depth and width must be positive");
    }
    if cfg.depth > draft.config.depth_rows {
        bail!(Config, "depth {} exceeds the draft's {} depth embeddings", cfg.depth, draft.config.depth_rows);
    }
    let start = Instant::now();
    let mut s = Session::start(target, draft, prompt)?;
    let mut report = SessionReport::default();
    'outer: while report.tokens.len() < cfg.max_new && s.cache.len() < s.cache.capacity() {
        let (tokens, mut stats) = s.round(cfg.depth, cfg.width, cfg.temperature, rng)?;
        if tokens.is_empty() {
            bail!(Invariant, "a round committed nothing");
        }
        let mut emitted = 0;
        for t in tokens {
            report.tokens.push(t);
            emitted += 1;
            if t == TokenId::EOS || report.tokens.len() == cfg.max_new {
                stats.committed = emitted;
                stats.accepted = stats.accepted.min(emitted - 1);
                report.rounds.push(stats);
                break 'outer;
            }
        }
        report.rounds.push(stats);
    }
    report.wall = start.elapsed();
    Ok(report)
}
