//! Position-aware draft: gated fusion of token embedding, slot and depth
//! embeddings with the previous feature, one transformer layer, and the
//! target's frozen head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::block::{Block, BlockVars};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{bail, Error, Result};
use crate::kvfile::KvMap;
use crate::numkit::kernels;
use crate::numkit::tape::top_k_indices;
use crate::numkit::{Rng, Tape, Tensor, Var};
use crate::tokenspace::{SlotLabel, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Full,
    NoIpe,
    NoSpe,
    NoBothGates,
    NoIpeGate,
    NoSpeGate,
    Baseline,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        Self::Full,
        Self::NoIpe,
        Self::NoSpe,
        Self::NoBothGates,
        Self::NoIpeGate,
        Self::NoSpeGate,
        Self::Baseline,
    ];

    pub fn uses_ipe(self) -> bool {
        !matches!(self, Self::NoIpe | Self::Baseline)
    }

    pub fn uses_spe(self) -> bool {
        !matches!(self, Self::NoSpe | Self::Baseline)
    }

    pub fn item_gate(self) -> bool {
        !matches!(self, Self::NoBothGates | Self::NoIpeGate)
    }

    pub fn step_gate(self) -> bool {
        !matches!(self, Self::NoBothGates | Self::NoSpeGate)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoIpe => "no-ipe",
            Self::NoSpe => "no-spe",
            Self::NoBothGates => "no-both-gates",
            Self::NoIpeGate => "no-ipe-gate",
            Self::NoSpeGate => "no-spe-gate",
            Self::Baseline => "baseline",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|m| m.name() == s) {
            Some(m) => Ok(m),
            None => bail!(Argument, "unknown ablation `{s}`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of depth embeddings, i.e. the deepest trainable draft step.
    pub depth_rows: usize,
    /// Item slots per item; the slot table has two more rows.
    pub levels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl DraftConfig {
    pub fn validate(&self) -> Result<()> {
        let Self { d_model, n_heads, d_ff, depth_rows, vocab_size, max_len, .. } = *self;
        if d_model == 0 || n_heads == 0 || d_ff == 0 || depth_rows == 0 || vocab_size == 0 || max_len == 0 {
            bail!(Config, "draft config has a zero dimension: {self:?}");
        }
        if d_model % n_heads != 0 || d_model / n_heads > kernels::MAX_HEAD_DIM {
            bail!(Config, "d_model {d_model} does not split into {n_heads} heads");
        }
        Ok(())
    }

    fn to_kv(self, mode: AblationMode) -> KvMap {
        let mut m = KvMap::new();
        m.set("model", "draft");
        m.set("d_model", self.d_model);
        m.set("n_heads", self.n_heads);
        m.set("d_ff", self.d_ff);
        m.set("depth_rows", self.depth_rows);
        m.set("levels", self.levels);
        m.set("vocab_size", self.vocab_size);
        m.set("max_len", self.max_len);
        m.set("ablation", mode);
        m
    }

    fn from_kv(m: &KvMap) -> Result<Self> {
        let cfg = Self {
            d_model: m.get("d_model")?,
            n_heads: m.get("n_heads")?,
            d_ff: m.get("d_ff")?,
            depth_rows: m.get("depth_rows")?,
            levels: m.get("levels")?,
            vocab_size: m.get("vocab_size")?,
            max_len: m.get("max_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftModel {
    pub config: DraftConfig,
    pub mode: AblationMode,
    /// Slot-table row for every token id.
    slot_rows: Vec<usize>,
    /// Slot embeddings `[(levels + 2) × d]`.
    pub ipe: Tensor,
    /// Depth embeddings; row `j − 1` serves draft depth `j`.
    pub spe: Tensor,
    pub g_item_raw: Tensor,
    /// Step-gate direction `[d]`.
    pub step_w: Tensor,
    /// `[2d × d]`.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub block: Block,
}

/// Fusion result for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub fused: Vec<f32>,
    /// Projection before the depth term is added.
    pub z: Vec<f32>,
    pub g_step: f32,
}

/// One row of draft input.
#[derive(Debug, Clone, Copy)]
pub struct FuseIn<'a> {
    pub token: TokenId,
    pub f_prev: &'a [f32],
    /// Draft depth for queries and their replaced window; `None` for
    /// committed context built from target features.
    pub depth: Option<usize>,
}

fn normal(dims: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| (rng.normal() * std) as f32).collect()).expect("positive dims")
}

const EMB_STD: f64 = 0.02;

pub fn slot_rows(vocab: &Vocabulary) -> Vec<usize> {
    vocab.slot_table().into_iter().map(|s| s.row(vocab.levels())).collect()
}

impl DraftModel {
    pub fn init(config: DraftConfig, slot_rows: Vec<usize>, mode: AblationMode, seed: u64) -> Result<Self> {
        config.validate()?;
        check_slot_rows(&config, &slot_rows)?;
        let d = config.d_model;
        let mut rng = Rng::new(seed);
        Ok(Self {
            config,
            mode,
            slot_rows,
            ipe: normal(&[config.levels + 2, d], EMB_STD, &mut rng),
            spe: normal(&[config.depth_rows, d], EMB_STD, &mut rng),
            g_item_raw: Tensor::zeros(&[1]),
            step_w: Tensor::zeros(&[d]),
            fc_weight: normal(&[2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), &mut rng),
            fc_bias: Tensor::zeros(&[d]),
            block: Block::init(d, config.d_ff, 1, &mut rng),
        })
    }

    /// Draft sized like `target` with `depth_rows` depth embeddings.
    pub fn for_target(
        target: &crate::target::TargetConfig,
        vocab: &Vocabulary,
        depth_rows: usize,
        mode: AblationMode,
        seed: u64,
    ) -> Result<Self> {
        let cfg = DraftConfig {
            d_model: target.d_model,
            n_heads: target.n_heads,
            d_ff: target.d_ff,
            depth_rows,
            levels: vocab.levels(),
            vocab_size: target.vocab_size,
            max_len: target.max_len,
        };
        Self::init(cfg, slot_rows(vocab), mode, seed)
    }

    pub fn slot_row(&self, token: TokenId) -> Result<usize> {
        match self.slot_rows.get(token.index()) {
            Some(&r) => Ok(r),
            None => bail!(Range, "token {token} outside draft vocabulary"),
        }
    }

    pub fn g_item(&self) -> f64 {
        kernels::sigmoid(self.g_item_raw.data()[0] as f64)
    }

    /// Trainable tensors in the order used by [`DraftVars::all`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.ipe,
            &mut self.spe,
            &mut self.g_item_raw,
            &mut self.step_w,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ];
        out.extend(self.block.tensors_mut());
        out
    }

    /// Names matching [`DraftModel::params_mut`].
    pub fn param_names() -> Vec<String> {
        let mut out: Vec<String> =
            ["ipe", "spe", "g_item_raw", "w", "fc_cat.weight", "fc_cat.bias"].iter().map(|s| s.to_string()).collect();
        out.extend(crate::block::Block::tensor_names().iter().map(|n| format!("layer.{n}")));
        out
    }

    /// Parameters of the slot/depth embeddings and gates.
    pub fn position_param_count(&self) -> usize {
        self.ipe.numel() + self.spe.numel() + self.g_item_raw.numel() + self.step_w.numel()
    }

    /// Parameters of the fusion projection and the transformer layer.
    pub fn layer_param_count(&self) -> usize {
        self.fc_weight.numel() + self.fc_bias.numel() + self.block.param_count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("draft.ipe", self.ipe.clone());
        c.push("draft.spe", self.spe.clone());
        c.push("draft.g_item_raw", self.g_item_raw.clone());
        c.push("draft.w", self.step_w.clone());
        c.push("draft.fc_cat.weight", self.fc_weight.clone());
        c.push("draft.fc_cat.bias", self.fc_bias.clone());
        self.block.save("draft.layer", &mut c);
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint(), &self.config.to_kv(self.mode))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let (c, kv) = checkpoint::load(path)?;
        let config = DraftConfig::from_kv(&kv)?;
        let mode: AblationMode = kv.get_str("ablation")?.parse()?;
        if config.levels != vocab.levels() || config.vocab_size != vocab.size() {
            bail!(Config, "draft checkpoint does not match the vocabulary");
        }
        let slot_rows = slot_rows(vocab);
        check_slot_rows(&config, &slot_rows)?;
        let d = config.d_model;
        Ok(Self {
            config,
            mode,
            slot_rows,
            ipe: c.expect("draft.ipe", &[config.levels + 2, d])?,
            spe: c.expect("draft.spe", &[config.depth_rows, d])?,
            g_item_raw: c.expect("draft.g_item_raw", &[1])?,
            step_w: c.expect("draft.w", &[d])?,
            fc_weight: c.expect("draft.fc_cat.weight", &[2 * d, d])?,
            fc_bias: c.expect("draft.fc_cat.bias", &[d])?,
            block: Block::load("draft.layer", &c, d, config.d_ff)?,
        })
    }

    fn check_emb(&self, emb: &Tensor) -> Result<()> {
        if emb.dims() != [self.config.vocab_size, self.config.d_model] {
            bail!(Config, "embedding {:?} does not fit the draft", emb.dims());
        }
        Ok(())
    }

    /// Fuses one position: `z = FC([e + g_item·v, f_prev])`,
    /// `fused = z + σ(w·z)·s[depth]`.
    pub fn fuse_input(&self, e: &[f32], f_prev: &[f32], slot: SlotLabel, depth: Option<usize>) -> Result<Fused> {
        let d = self.config.d_model;
        if e.len() != d || f_prev.len() != d {
            bail!(Shape, "fuse_input expects rows of {d}");
        }
        let row = slot.row(self.config.levels);
        if row >= self.ipe.rows() {
            bail!(Range, "slot {slot:?} outside the slot table");
        }
        self.fuse_one(e, f_prev, row, depth)
    }

    fn fuse_one(&self, e: &[f32], f_prev: &[f32], slot_row: usize, depth: Option<usize>) -> Result<Fused> {
        let d = self.config.d_model;
        if let Some(j) = depth {
            if j == 0 || j > self.config.depth_rows {
                bail!(Range, "draft depth {j} outside 1..={}", self.config.depth_rows);
            }
        }
        let mut cat = Vec::with_capacity(2 * d);
        if self.mode.uses_ipe() {
            let g = if self.mode.item_gate() { self.g_item() } else { 1.0 };
            let v = self.ipe.row(slot_row);
            cat.extend(e.iter().zip(v).map(|(&e, &v)| (e as f64 + g * v as f64) as f32));
        } else {
            cat.extend_from_slice(e);
        }
        cat.extend_from_slice(f_prev);
        let mut z = vec![0.0f32; d];
        kernels::matmul(&cat, self.fc_weight.data(), 1, 2 * d, d, &mut z);
        z.iter_mut().zip(self.fc_bias.data()).for_each(|(z, b)| *z += b);
        let g_step = if self.mode.step_gate() {
            let s: f64 = z.iter().zip(self.step_w.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            kernels::sigmoid(s)
        } else {
            1.0
        };
        let fused = match depth {
            Some(j) if self.mode.uses_spe() => {
                z.iter().zip(self.spe.row(j - 1)).map(|(&z, &s)| (z as f64 + g_step * s as f64) as f32).collect()
            }
            _ => z.clone(),
        };
        Ok(Fused { fused, z, g_step: g_step as f32 })
    }

    fn fuse_rows(&self, emb: &Tensor, rows: &[FuseIn]) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let e = match r.token.index() {
                i if i < emb.rows() => emb.row(i),
                _ => bail!(Range, "token {} outside vocabulary", r.token),
            };
            if r.f_prev.len() != d {
                bail!(Shape, "feature of {} values for width {d}", r.f_prev.len());
            }
            out.extend(self.fuse_one(e, r.f_prev, self.slot_row(r.token)?, r.depth)?.fused);
        }
        Ok(out)
    }

    /// Frozen tied head: `feature · embᵀ`.
    pub fn head(&self, emb: &Tensor, feature: &[f32]) -> Vec<f32> {
        let d = self.config.d_model;
        emb.data()
            .chunks(d)
            .map(|e| {
                let mut acc = 0.0f64;
                for c in 0..d {
                    acc += feature[c] as f64 * e[c] as f64;
                }
                acc as f32
            })
            .collect()
    }

    /// Appends committed context positions built from target features.
    pub fn push_context(&self, emb: &Tensor, state: &mut DraftState, rows: &[(TokenId, &[f32])]) -> Result<()> {
        self.check_emb(emb)?;
        if state.len + rows.len() > state.capacity {
            bail!(Range, "draft cache full at {}", state.len);
        }
        let inputs: Vec<FuseIn> = rows.iter().map(|&(token, f_prev)| FuseIn { token, f_prev, depth: None }).collect();
        let x = self.fuse_rows(emb, &inputs)?;
        let (k, v) = self.block.key_values(&x, rows.len());
        state.k.extend(k);
        state.v.extend(v);
        state.len += rows.len();
        Ok(())
    }

    /// One cached draft step: the fused input at `depth` joins the context
    /// and the layer output becomes the new feature.
    pub fn draft_forward_step(
        &self,
        emb: &Tensor,
        token: TokenId,
        f_prev: &[f32],
        depth: usize,
        state: &mut DraftState,
    ) -> Result<(Tensor, Tensor)> {
        self.check_emb(emb)?;
        if state.len >= state.capacity {
            bail!(Range, "draft cache full at {}", state.len);
        }
        let x = self.fuse_rows(emb, &[FuseIn { token, f_prev, depth: Some(depth) }])?;
        let out = self.block.forward_rows(self.config.n_heads, &state.k, &state.v, &x, 1, &[vec![]], &[0])?;
        state.k.extend(out.k);
        state.v.extend(out.v);
        state.len += 1;
        state.depth = depth;
        let logits = self.head(emb, &out.x);
        state.last_feature = out.x.clone();
        Ok((Tensor::vector(logits), Tensor::vector(out.x)))
    }

    /// Grows a candidate tree level by level from the root.
    ///
    /// Step `j` expands the current frontier in one batched call. Each query
    /// carries depth embedding `j`; so do its drafted ancestors, whose keys
    /// are recomputed for the step. Committed context (including the root's
    /// own context entry) carries none. Greedy mode keeps the global top
    /// `width` children by cumulative log-probability; sampling mode gives
    /// each frontier node as many children as it holds top-`width` rank slots
    /// and draws them without replacement from its tempered distribution.
    #[allow(clippy::too_many_arguments)]
    pub fn propose_tree(
        &self,
        emb: &Tensor,
        root_token: TokenId,
        root_feature: &[f32],
        depth: usize,
        width: usize,
        mut sampling: Sampling,
        state: &DraftState,
    ) -> Result<CandidateTree> {
        self.check_emb(emb)?;
        if depth == 0 || width == 0 {
            bail!(Argument, "tree depth and width must be positive");
        }
        if depth > self.config.depth_rows {
            bail!(Config, "depth {depth} exceeds the {} depth embeddings", self.config.depth_rows);
        }
        if state.len + 1 + depth > state.capacity {
            bail!(Range, "draft cache cannot hold another {} positions", depth + 1);
        }
        let d = self.config.d_model;
        let s = self.config.vocab_size;
        let mut tree = CandidateTree::new(root_token);
        let mut frontier = vec![0usize];
        for j in 1..=depth {
            // rows: [root context entry,] then per frontier node its drafted
            // ancestors followed by the node itself as the query
            let mut plan: Vec<(usize, Option<usize>)> = Vec::new();
            let mut attend: Vec<Vec<usize>> = Vec::new();
            let mut queries = Vec::with_capacity(frontier.len());
            if j > 1 {
                plan.push((0, None));
                attend.push(vec![]);
            }
            for &n in &frontier {
                let mut seen: Vec<usize> = if j > 1 { vec![0] } else { vec![] };
                for a in tree.path_to(n) {
                    if a == 0 && n != 0 {
                        continue;
                    }
                    plan.push((a, Some(j)));
                    attend.push(seen.clone());
                    seen.push(plan.len() - 1);
                }
                queries.push(plan.len() - 1);
            }
            let inputs: Vec<FuseIn> = plan
                .iter()
                .map(|&(a, depth)| {
                    let node = &tree.nodes[a];
                    let f_prev = match node.parent {
                        None => root_feature,
                        Some(p) => tree.nodes[p].feature.as_deref().expect("parents are expanded"),
                    };
                    FuseIn { token: node.token, f_prev, depth }
                })
                .collect();
            let x = self.fuse_rows(emb, &inputs)?;
            let out = self.block.forward_rows(self.config.n_heads, &state.k, &state.v, &x, inputs.len(), &attend, &queries)?;
            tree.draft_calls += 1;

            // per-frontier distributions
            let mut dists: Vec<Vec<f32>> = Vec::with_capacity(frontier.len());
            for (qi, &n) in frontier.iter().enumerate() {
                let feature = out.x[qi * d..(qi + 1) * d].to_vec();
                let logits = self.head(emb, &feature);
                let q = match sampling {
                    Sampling::Greedy => {
                        let mut ls = vec![0.0f64; s];
                        kernels::log_softmax_f64(&logits, &mut ls);
                        ls.iter().map(|&x| x.exp() as f32).collect()
                    }
                    Sampling::Stochastic { temperature, .. } => {
                        let mut p = vec![0.0f32; s];
                        kernels::softmax_row(&logits, temperature, &mut p);
                        p
                    }
                };
                tree.nodes[n].feature = Some(feature);
                tree.nodes[n].logits = Some(logits);
                dists.push(q);
            }
            // rank slots: (score, frontier index, rank, token for greedy)
            let mut slots: Vec<(f64, usize, usize, usize)> = Vec::new();
            for (fi, &n) in frontier.iter().enumerate() {
                let order = match sampling {
                    Sampling::Greedy => top_k_indices(tree.nodes[n].logits.as_ref().expect("set"), width.min(s)),
                    Sampling::Stochastic { .. } => top_k_indices(&dists[fi], width.min(s)),
                };
                for (r, &tok) in order.iter().enumerate() {
                    let q = dists[fi][tok];
                    if q <= 0.0 {
                        break;
                    }
                    let lq = match sampling {
                        Sampling::Greedy => log_prob(tree.nodes[n].logits.as_ref().expect("set"), tok),
                        Sampling::Stochastic { .. } => (q as f64).ln(),
                    };
                    slots.push((tree.nodes[n].cum_log_q + lq, fi, r, tok));
                }
            }
            slots.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            slots.truncate(width);
            slots.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(slots.len());
            match &mut sampling {
                Sampling::Greedy => {
                    for &(score, fi, _, tok) in &slots {
                        let parent = frontier[fi];
                        let lq = score - tree.nodes[parent].cum_log_q;
                        next.push(tree.push_child(parent, TokenId::from(tok), lq, score));
                    }
                }
                Sampling::Stochastic { rng, .. } => {
                    for (fi, &parent) in frontier.iter().enumerate() {
                        let k = slots.iter().filter(|s| s.1 == fi).count();
                        for tok in draw_without_replacement(&dists[fi], k, rng) {
                            let lq = (dists[fi][tok] as f64).ln();
                            let cum = tree.nodes[parent].cum_log_q + lq;
                            next.push(tree.push_child(parent, TokenId::from(tok), lq, cum));
                        }
                    }
                }
            }
            for (fi, &n) in frontier.iter().enumerate() {
                tree.nodes[n].q = Some(std::mem::take(&mut dists[fi]));
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(tree)
    }
}

fn check_slot_rows(cfg: &DraftConfig, rows: &[usize]) -> Result<()> {
    if rows.len() != cfg.vocab_size || rows.iter().any(|&r| r >= cfg.levels + 2) {
        bail!(Config, "slot table does not fit the draft config");
    }
    Ok(())
}

fn log_prob(logits: &[f32], tok: usize) -> f64 {
    let mut ls = vec![0.0f64; logits.len()];
    kernels::log_softmax_f64(logits, &mut ls);
    ls[tok]
}

/// Sequential draws without replacement, each from the remaining mass.
fn draw_without_replacement(q: &[f32], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut taken = vec![false; q.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mass: f64 = q.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&p, _)| p as f64).sum();
        if mass <= 0.0 {
            break;
        }
        let u = rng.uniform() * mass;
        let mut cum = 0.0;
        let mut pick = None;
        for (i, (&p, &t)) in q.iter().zip(&taken).enumerate() {
            if t || p <= 0.0 {
                continue;
            }
            cum += p as f64;
            pick = Some(i);
            if u < cum {
                break;
            }
        }
        let i = pick.expect("positive mass has a support");
        taken[i] = true;
        out.push(i);
    }
    out
}

/// How [`DraftModel::propose_tree`] picks children.
#[derive(Debug)]
pub enum Sampling<'a> {
    Greedy,
    Stochastic { temperature: f32, rng: &'a mut Rng },
}

/// Draft-side cache of committed context keys and values.
#[derive(Debug, Clone)]
pub struct DraftState {
    k: Vec<f32>,
    v: Vec<f32>,
    len: usize,
    capacity: usize,
    pub last_feature: Vec<f32>,
    pub depth: usize,
}

impl DraftState {
    pub fn new(config: &DraftConfig) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
            capacity: config.max_len,
            last_feature: vec![0.0; config.d_model],
            depth: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Starts a new speculation round.
    pub fn reset_depth(&mut self) {
        self.depth = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Log-probability of `token` under the parent's draft distribution.
    pub log_q: f64,
    pub cum_log_q: f64,
    /// Draft feature produced when this node was expanded.
    pub feature: Option<Vec<f32>>,
    pub logits: Option<Vec<f32>>,
    /// Distribution this node's children were drawn from.
    pub q: Option<Vec<f32>>,
}

/// Candidate tree. Node 0 is the root: the last committed token, not yet
/// scored by the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTree {
    pub nodes: Vec<TreeNode>,
    pub draft_calls: usize,
}

impl CandidateTree {
    pub fn new(root: TokenId) -> Self {
        let node = TreeNode {
            token: root,
            parent: None,
            depth: 0,
            log_q: 0.0,
            cum_log_q: 0.0,
            feature: None,
            logits: None,
            q: None,
        };
        Self { nodes: vec![node], draft_calls: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_child(&mut self, parent: usize, token: TokenId, log_q: f64, cum_log_q: f64) -> usize {
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(TreeNode { token, parent: Some(parent), depth, log_q, cum_log_q, feature: None, logits: None, q: None });
        self.nodes.len() - 1
    }

    /// Node indices from the root to `n`, inclusive.
    pub fn path_to(&self, n: usize) -> Vec<usize> {
        let mut path = vec![n];
        while let Some(p) = self.nodes[*path.last().expect("nonempty")].parent {
            path.push(p);
        }
        path.reverse();
        path
    }

    /// Children of `n` in insertion order.
    pub fn children(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, x)| x.parent == Some(n)).map(|(i, _)| i)
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// A [`DraftModel`] registered on a tape.
#[derive(Debug, Clone)]
pub struct DraftVars {
    pub ipe: Var,
    pub spe: Var,
    pub g_item_raw: Var,
    /// Step-gate direction as a `[d × 1]` column.
    pub step_w: Var,
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub block: BlockVars,
}

impl DraftVars {
    pub fn register(tape: &mut Tape, m: &DraftModel, trainable: bool) -> Self {
        let d = m.config.d_model;
        let w = m.step_w.clone().reshape(&[d, 1]).expect("d values");
        Self {
            ipe: tape.leaf(&m.ipe, trainable),
            spe: tape.leaf(&m.spe, trainable),
            g_item_raw: tape.leaf(&m.g_item_raw, trainable),
            step_w: tape.leaf(&w, trainable),
            fc_weight: tape.leaf(&m.fc_weight, trainable),
            fc_bias: tape.leaf(&m.fc_bias, trainable),
            block: BlockVars::register(tape, &m.block, trainable),
        }
    }

    /// Same order as [`DraftModel::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.ipe, self.spe, self.g_item_raw, self.step_w, self.fc_weight, self.fc_bias];
        out.extend(self.block.vars);
        out
    }

    /// Gradients shaped like the model tensors.
    pub fn grads(&self, tape: &Tape, m: &DraftModel) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = self.all().into_iter().map(|v| tape.grad_tensor(v)).collect();
        out[3] = std::mem::replace(&mut out[3], Tensor::scalar(0.0)).reshape(&[m.config.d_model])?;
        Ok(out)
    }

    /// Differentiable fusion of `tokens` with the feature rows `f_prev`,
    /// all at the same `depth`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        m: &DraftModel,
        emb: Var,
        tokens: &[TokenId],
        f_prev: Var,
        depth: Option<usize>,
    ) -> Result<Var> {
        let mode = m.mode;
        if let Some(j) = depth {
            if j == 0 || j > m.config.depth_rows {
                bail!(Config, "draft depth {j} outside 1..={}", m.config.depth_rows);
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let mut a = tape.gather(emb, ids)?;
        if mode.uses_ipe() {
            let rows = tokens.iter().map(|&t| m.slot_row(t)).collect::<Result<Vec<_>>>()?;
            let mut v = tape.gather(self.ipe, rows)?;
            if mode.item_gate() {
                let g = tape.sigmoid(self.g_item_raw);
                v = tape.scale_by(v, g)?;
            }
            a = tape.add(a, v)?;
        }
        let cat = tape.concat_cols(a, f_prev)?;
        let z = tape.matmul(cat, self.fc_weight)?;
        let z = tape.add_bias(z, self.fc_bias)?;
        match depth {
            Some(j) if mode.uses_spe() => {
                let mut s = tape.gather(self.spe, vec![j - 1; tokens.len()])?;
                if mode.step_gate() {
                    let logit = tape.matmul(z, self.step_w)?;
                    let g = tape.sigmoid(logit);
                    s = tape.scale_rows(s, g)?;
                }
                tape.add(z, s)
            }
            _ => Ok(z),
        }
    }
}
