//! Multi-depth unrolled draft loss with progressive feature replacement.
//!
//! Pass `j` runs one draft query per position `p`. The query's input feature
//! and the inputs of the `j − 2` positions before it are replaced by draft
//! features: the feature at offset `o` back from `p` (offset 1 is the
//! query's own input) comes from pass `j − o`. Older positions keep their
//! teacher features and serve as shared context without depth embeddings.
//! The replaced window and the query carry depth embedding `j`.

use crate::draft::{DraftModel, DraftVars};
use crate::error::{bail, Result};
use crate::numkit::{KeyLists, Tape, Tensor, Var};
use crate::tokenspace::{TokenId, TokenStream};

use super::features::BankEntry;

/// Where an input feature `f_r` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Teacher { position: usize },
    /// Output of the query at `position` in pass `pass`.
    Draft { pass: usize, position: usize },
    /// Stand-in for the feature before the first position.
    Zero,
}

impl Provenance {
    pub fn is_draft(self) -> bool {
        matches!(self, Provenance::Draft { .. })
    }
}

/// One fused input row: token at `position` with its preceding feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowPlan {
    pub position: usize,
    pub feature: Provenance,
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    pub position: usize,
    /// Whether this query predicts a response token.
    pub lossed: bool,
    /// The query attends to teacher context rows `0..teacher_keys`.
    pub teacher_keys: usize,
    /// Replaced context rows, oldest first.
    pub window: Vec<RowPlan>,
    pub query: RowPlan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassPlan {
    pub depth: usize,
    /// Queries in position order, starting at `start`.
    pub start: usize,
    pub queries: Vec<QueryPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnrollPlan {
    pub len: usize,
    pub t0: usize,
    pub passes: Vec<PassPlan>,
}

fn provenance(pass: usize, query: usize, row: usize) -> Provenance {
    // the row at `row` takes feature f_{row-1}, at offset query - row + 1
    if row == 0 {
        return Provenance::Zero;
    }
    let offset = query - row + 1;
    if offset < pass {
        Provenance::Draft { pass: pass - offset, position: row - 1 }
    } else {
        Provenance::Teacher { position: row - 1 }
    }
}

/// Plans every pass for a stream of `len` tokens whose response starts at
/// `t0`. Earlier passes run extra unlossed queries before `t0 − 1` so that
/// later passes have the draft features they need.
pub fn plan_unroll(len: usize, t0: usize, depth_train: usize) -> Result<UnrollPlan> {
    if depth_train == 0 {
        bail!(Config, "depth_train must be at least 1");
    }
    if t0 == 0 || t0 >= len {
        bail!(Argument, "stream of {len} tokens has no response after t0={t0}");
    }
    let last = len - 2;
    let mut passes = Vec::with_capacity(depth_train);
    for j in 1..=depth_train {
        let start = (t0 - 1).saturating_sub(depth_train - j);
        let queries = (start..=last)
            .map(|p| {
                let ws = if j == 1 { p } else { (p + 2).saturating_sub(j).max(1).min(p) };
                let window =
                    (ws..p).map(|q| RowPlan { position: q, feature: provenance(j, p, q), depth: Some(j) }).collect();
                QueryPlan {
                    position: p,
                    lossed: p + 1 >= t0,
                    teacher_keys: ws,
                    window,
                    query: RowPlan { position: p, feature: provenance(j, p, p), depth: Some(j) },
                }
            })
            .collect();
        passes.push(PassPlan { depth: j, start, queries });
    }
    Ok(UnrollPlan { len, t0, passes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollConfig {
    pub depth_train: usize,
    pub topk_aux: usize,
    pub aux_weight: f64,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self { depth_train: 6, topk_aux: 8, aux_weight: 1.0 }
    }
}

/// One per-position loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub stream: usize,
    pub pass: usize,
    pub position: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct UnrolledLoss {
    /// Sum over streams, passes and response positions.
    pub loss: Var,
    /// Per-pass sums over all streams.
    pub per_depth: Vec<f64>,
    pub terms: Vec<LossTerm>,
}

/// Builds the unrolled loss for a batch of streams on `tape`. `emb` is the
/// frozen token embedding, which is also the head.
pub fn draft_unrolled_loss(
    tape: &mut Tape,
    draft: &DraftModel,
    vars: &DraftVars,
    emb: Var,
    batch: &[(&TokenStream, &BankEntry)],
    cfg: &UnrollConfig,
) -> Result<UnrolledLoss> {
    if cfg.depth_train > draft.config.depth_rows {
        bail!(Config, "depth_train {} exceeds the {} depth embeddings", cfg.depth_train, draft.config.depth_rows);
    }
    if batch.is_empty() {
        bail!(Argument, "empty batch");
    }
    let d = draft.config.d_model;
    let heads = draft.config.n_heads;
    let mut plans = Vec::with_capacity(batch.len());
    let mut base = Vec::with_capacity(batch.len());
    let mut n_all = 0;
    for (s, bank) in batch {
        if bank.len() != s.len() || bank.t0 != s.t0 || bank.features.cols() != d {
            bail!(Shape, "feature bank does not match its stream");
        }
        plans.push(plan_unroll(s.len(), s.t0, cfg.depth_train)?);
        base.push(n_all);
        n_all += s.len();
    }
    let zero_row = n_all;

    // teacher features (plus a zero row) and the shared teacher context
    let mut feat = Vec::with_capacity((n_all + 1) * d);
    for (_, bank) in batch {
        feat.extend_from_slice(bank.features.data());
    }
    feat.extend(std::iter::repeat_n(0.0, d));
    let teacher_feat = tape.constant(&Tensor::new(&[n_all + 1, d], feat)?);
    let mut ctx_tokens = Vec::with_capacity(n_all);
    let mut ctx_src = Vec::with_capacity(n_all);
    for (si, (s, _)) in batch.iter().enumerate() {
        for (r, &t) in s.tokens.iter().enumerate() {
            ctx_tokens.push(t);
            ctx_src.push(if r == 0 { zero_row } else { base[si] + r - 1 });
        }
    }
    let ctx_prev = tape.gather(teacher_feat, ctx_src)?;
    let ctx_x = vars.fuse(tape, draft, emb, &ctx_tokens, ctx_prev, None)?;
    let ctx_kv = vars.block.keys(tape, ctx_x)?;
    let head = tape.transpose(emb)?;

    let probs: Vec<Tensor> = batch.iter().map(|(_, b)| b.teacher_probs()).collect();
    // outs[m - 1]: query outputs of pass m; offsets[m - 1][si]: first row of stream si
    let mut outs: Vec<Var> = Vec::new();
    let mut offsets: Vec<Vec<usize>> = Vec::new();
    let mut per_depth = Vec::with_capacity(cfg.depth_train);
    let mut terms = Vec::new();
    let mut total: Option<Var> = None;
    for j in 1..=cfg.depth_train {
        let mut parts = vec![teacher_feat];
        parts.extend(outs.iter().copied());
        let src = if parts.len() == 1 { teacher_feat } else { tape.concat_rows(&parts)? };
        let mut src_base = vec![n_all + 1];
        for &o in &outs {
            let prev = *src_base.last().expect("nonempty");
            src_base.push(prev + tape.dims(o)[0]);
        }
        let locate = |si: usize, prov: Provenance| -> usize {
            match prov {
                Provenance::Zero => zero_row,
                Provenance::Teacher { position } => base[si] + position,
                Provenance::Draft { pass, position } => {
                    src_base[pass - 1] + offsets[pass - 1][si] + position - plans[si].passes[pass - 1].start
                }
            }
        };
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut src_idx = Vec::new();
        let mut query_rows = Vec::new();
        let mut lists = KeyLists::new();
        let mut lossed = Vec::new();
        let mut targets: Vec<&[f32]> = Vec::new();
        let mut term_keys = Vec::new();
        let mut off_j = Vec::with_capacity(batch.len());
        let mut n_queries = 0;
        for (si, (s, _)) in batch.iter().enumerate() {
            off_j.push(n_queries);
            let pass = &plans[si].passes[j - 1];
            for qp in &pass.queries {
                let first = tokens.len();
                for row in qp.window.iter().chain(std::iter::once(&qp.query)) {
                    tokens.push(s.tokens[row.position]);
                    src_idx.push(locate(si, row.feature));
                }
                let qrow = tokens.len() - 1;
                query_rows.push(qrow);
                lists.push((base[si]..base[si] + qp.teacher_keys).chain((first..=qrow).map(|r| n_all + r)));
                if qp.lossed {
                    lossed.push(n_queries);
                    targets.push(probs[si].row(qp.position + 1 - s.t0));
                    term_keys.push((si, qp.position));
                }
                n_queries += 1;
            }
        }
        let prev = tape.gather(src, src_idx)?;
        let x = vars.fuse(tape, draft, emb, &tokens, prev, Some(j))?;
        let kv = vars.block.keys(tape, x)?;
        let k_all = tape.concat_rows(&[ctx_kv.k, kv.k])?;
        let v_all = tape.concat_rows(&[ctx_kv.v, kv.v])?;
        let xq = tape.gather(x, query_rows.clone())?;
        let hq = tape.gather(kv.h, query_rows)?;
        let out = vars.block.queries(tape, xq, hq, k_all, v_all, heads, lists)?;
        outs.push(out);
        offsets.push(off_j);

        let out_l = tape.gather(out, lossed)?;
        let logits = tape.matmul(out_l, head)?;
        let target = Tensor::from_rows(&targets);
        let ce = tape.soft_cross_entropy(logits, &target)?;
        let aux = tape.topk_cross_entropy(logits, &target, cfg.topk_aux)?;
        let aux = tape.scale(aux, cfg.aux_weight);
        let term = tape.add(ce, aux)?;
        for (&(stream, position), &value) in term_keys.iter().zip(tape.values(term)) {
            terms.push(LossTerm { stream, pass: j, position, value });
        }
        let depth_loss = tape.sum(term);
        per_depth.push(tape.scalar(depth_loss));
        total = Some(match total {
            None => depth_loss,
            Some(t) => tape.add(t, depth_loss)?,
        });
    }
    Ok(UnrolledLoss { loss: total.expect("at least one pass"), per_depth, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::tests::micro;
    use crate::draft::{AblationMode, DraftState};
    use crate::numkit::{finite_diff_check, CheckConfig, Rng};
    use crate::tokenspace::SlotLabel;
    use proptest::prelude::*;

    fn stream() -> TokenStream {
        let tokens: Vec<TokenId> = [1, 4, 5, 3, 6, 7, 3, 4, 7, 2].into_iter().map(TokenId).collect();
        let labels = vec![SlotLabel::Ctx; tokens.len()];
        TokenStream { tokens, t0: 4, labels }
    }

    fn bank(s: &TokenStream, seed: u64) -> BankEntry {
        let mut rng = Rng::new(seed);
        let mut rand = |n: usize| (0..n).map(|_| rng.normal() as f32).collect::<Vec<_>>();
        let rows = s.len() - s.t0;
        BankEntry {
            features: Tensor::new(&[s.len(), 8], rand(s.len() * 8)).unwrap(),
            logits: Tensor::new(&[rows, 8], rand(rows * 8)).unwrap(),
            t0: s.t0,
        }
    }

    fn loss_of(m: &DraftModel, emb: &Tensor, batch: &[(&TokenStream, &BankEntry)], cfg: &UnrollConfig) -> (f64, Vec<f64>, Vec<LossTerm>) {
        let mut tape = Tape::new();
        let e = tape.constant(emb);
        let vars = DraftVars::register(&mut tape, m, true);
        let out = draft_unrolled_loss(&mut tape, m, &vars, e, batch, cfg).unwrap();
        (tape.scalar(out.loss), out.per_depth, out.terms)
    }

    fn cfg(depth_train: usize) -> UnrollConfig {
        UnrollConfig { depth_train, topk_aux: 3, aux_weight: 1.0 }
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
    }

    fn softmax64(x: &[f32]) -> Vec<f64> {
        let m = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = x.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    fn topk_renorm(p: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        idx.truncate(k);
        let z: f64 = idx.iter().map(|&i| p[i]).sum();
        idx.into_iter().map(|i| (i, p[i] / z)).collect()
    }

    // Single-step draft logits at query p through the inference cache: teacher
    // context rows without depth embedding, then the query at depth 1.
    fn inference_logits(m: &DraftModel, emb: &Tensor, s: &TokenStream, b: &BankEntry, p: usize) -> Vec<f32> {
        let zero = [0.0f32; 8];
        let ctx: Vec<(TokenId, &[f32])> =
            (0..p).map(|r| (s.tokens[r], if r == 0 { &zero[..] } else { b.features.row(r - 1) })).collect();
        let mut st = DraftState::new(&m.config);
        m.push_context(emb, &mut st, &ctx).unwrap();
        m.draft_forward_step(emb, s.tokens[p], b.features.row(p - 1), 1, &mut st).unwrap().0.into_data()
    }

    #[test]
    fn provenance_audit_three_passes() {
        let plan = plan_unroll(10, 4, 3).unwrap();
        assert_eq!(plan.passes.len(), 3);
        for pass in &plan.passes {
            let j = pass.depth;
            assert_eq!(pass.start, 3 - (3 - j));
            for q in &pass.queries {
                let rows: Vec<&RowPlan> = q.window.iter().chain(std::iter::once(&q.query)).collect();
                let drafted: Vec<usize> =
                    rows.iter().filter(|r| r.feature.is_draft()).map(|r| r.position).collect();
                assert_eq!(drafted.len(), (j - 1).min(q.position), "pass {j} query {}", q.position);
                // the replaced inputs are the most recent ones
                let want: Vec<usize> = (q.position + 1 - drafted.len()..=q.position).collect();
                assert_eq!(drafted, want);
                for r in &rows {
                    assert_eq!(r.depth, Some(j));
                    if let Provenance::Draft { pass: m, position } = r.feature {
                        assert_eq!(m, j - (q.position - r.position + 1));
                        assert_eq!(position, r.position - 1);
                    }
                }
                assert_eq!(q.teacher_keys + q.window.len(), q.position);
                assert_eq!(q.lossed, q.position >= 3);
            }
        }
        let last = &plan.passes[2].queries[4];
        assert_eq!(last.position, 7);
        assert_eq!(last.teacher_keys, 6);
        assert_eq!(last.window[0].feature, Provenance::Draft { pass: 1, position: 5 });
        assert_eq!(last.query.feature, Provenance::Draft { pass: 2, position: 6 });
    }

    proptest! {
        #[test]
        fn plan_references_exist(len in 3usize..40, t0f in 0.0f64..1.0, b in 1usize..8) {
            let t0 = 1 + ((len - 2) as f64 * t0f) as usize;
            let plan = plan_unroll(len, t0, b).unwrap();
            prop_assert_eq!(plan.passes.len(), b);
            for pass in &plan.passes {
                prop_assert_eq!(pass.queries.last().unwrap().position, len - 2);
                prop_assert_eq!(pass.queries.iter().filter(|q| q.lossed).count(), len - t0);
                for q in &pass.queries {
                    for r in q.window.iter().chain(std::iter::once(&q.query)) {
                        if let Provenance::Draft { pass: m, position } = r.feature {
                            prop_assert!(m < pass.depth);
                            prop_assert!(position >= plan.passes[m - 1].start);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_pass_matches_cached_inference() {
        let (m, emb) = micro(AblationMode::Full, 4);
        let s = stream();
        let b = bank(&s, 5);
        let (_, _, terms) = loss_of(&m, &emb, &[(&s, &b)], &cfg(1));
        let teacher = b.teacher_probs();
        assert_eq!(terms.len(), s.len() - s.t0);
        for t in &terms {
            assert_eq!(t.pass, 1);
            let q = softmax64(&inference_logits(&m, &emb, &s, &b, t.position));
            let p: Vec<f64> = teacher.row(t.position + 1 - s.t0).iter().map(|&x| x as f64).collect();
            let ce: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
            let top = topk_renorm(&p, 3);
            let zq: f64 = top.iter().map(|&(i, _)| q[i]).sum();
            let aux: f64 = -top.iter().map(|&(i, w)| w * (q[i] / zq).ln()).sum::<f64>();
            assert!((t.value - (ce + aux)).abs() < 1e-4, "{} vs {}", t.value, ce + aux);
        }
    }

    #[test]
    fn matching_teacher_gives_entropy() {
        let (m, emb) = micro(AblationMode::Full, 6);
        let s = stream();
        let mut b = bank(&s, 7);
        let rows: Vec<Vec<f32>> = (s.t0 - 1..s.len() - 1).map(|p| inference_logits(&m, &emb, &s, &b, p)).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        b.logits = Tensor::from_rows(&refs);
        let (_, _, terms) = loss_of(&m, &emb, &[(&s, &b)], &cfg(1));
        let teacher = b.teacher_probs();
        for t in &terms {
            let p: Vec<f64> = teacher.row(t.position + 1 - s.t0).iter().map(|&x| x as f64).collect();
            let top: Vec<f64> = topk_renorm(&p, 3).into_iter().map(|x| x.1).collect();
            let want = entropy(&p) + entropy(&top);
            assert!((t.value - want).abs() < 1e-5, "{} vs {want}", t.value);
        }
    }

    #[test]
    fn future_positions_do_not_move_earlier_terms() {
        let (m, emb) = micro(AblationMode::Full, 8);
        let s = stream();
        let b = bank(&s, 9);
        let (_, _, base) = loss_of(&m, &emb, &[(&s, &b)], &cfg(3));
        for cut in s.t0..s.len() - 1 {
            let mut s2 = s.clone();
            let mut b2 = b.clone();
            for r in cut..s.len() {
                s2.tokens[r] = TokenId(if s.tokens[r].0 == 4 { 5 } else { 4 });
                b2.features.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
            }
            let (_, _, probe) = loss_of(&m, &emb, &[(&s2, &b2)], &cfg(3));
            let mut moved = false;
            for (a, c) in base.iter().zip(&probe) {
                assert_eq!((a.pass, a.position), (c.pass, c.position));
                if a.position < cut {
                    assert_eq!(a.value.to_bits(), c.value.to_bits(), "pass {} position {}", a.pass, a.position);
                } else {
                    moved |= a.value != c.value;
                }
            }
            assert!(moved, "perturbing from {cut} changed nothing");
        }
    }

    #[test]
    fn first_pass_ignores_deeper_depth_rows() {
        let (mut m, emb) = micro(AblationMode::Full, 10);
        let s = stream();
        let b = bank(&s, 11);
        let (_, before, _) = loss_of(&m, &emb, &[(&s, &b)], &cfg(3));
        for r in 1..3 {
            m.spe.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
        }
        let (_, after, _) = loss_of(&m, &emb, &[(&s, &b)], &cfg(3));
        assert_eq!(before[0].to_bits(), after[0].to_bits());
        assert_ne!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
    }

    #[test]
    fn batching_streams_sums_their_losses() {
        let (m, emb) = micro(AblationMode::Full, 12);
        let s = stream();
        let mut s2 = stream();
        s2.tokens.insert(4, TokenId(5));
        s2.tokens.insert(4, TokenId(6));
        s2.t0 = 6;
        let b = bank(&s, 13);
        let b2 = bank(&s2, 14);
        let (l1, ..) = loss_of(&m, &emb, &[(&s, &b)], &cfg(3));
        let (l2, ..) = loss_of(&m, &emb, &[(&s2, &b2)], &cfg(3));
        let (both, ..) = loss_of(&m, &emb, &[(&s, &b), (&s2, &b2)], &cfg(3));
        assert!((both - l1 - l2).abs() < 1e-9 * both.abs());
    }

    #[test]
    fn depth_beyond_table_is_config_error() {
        let (m, emb) = micro(AblationMode::Full, 1);
        let s = stream();
        let b = bank(&s, 1);
        let mut tape = Tape::new();
        let e = tape.constant(&emb);
        let vars = DraftVars::register(&mut tape, &m, true);
        let err = draft_unrolled_loss(&mut tape, &m, &vars, e, &[(&s, &b)], &cfg(4)).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut m, emb) = micro(AblationMode::Full, 15);
        m.g_item_raw = Tensor::vector(vec![0.3]);
        let s = stream();
        let b = bank(&s, 16);
        let batch = [(&s, &b)];
        let mut tape = Tape::new();
        let e = tape.constant(&emb);
        let vars = DraftVars::register(&mut tape, &m, true);
        let out = draft_unrolled_loss(&mut tape, &m, &vars, e, &batch, &cfg(3)).unwrap();
        tape.backward(out.loss).unwrap();
        let grads = vars.grads(&tape, &m).unwrap();
        let names = DraftModel::param_names();
        let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let mut params: Vec<Tensor> = m.params_mut().into_iter().map(|t| t.clone()).collect();
        let report = finite_diff_check(
            &names,
            &mut params,
            &grads,
            |ps| {
                let mut probe = m.clone();
                for (dst, src) in probe.params_mut().into_iter().zip(ps) {
                    *dst = src.clone();
                }
                Ok(loss_of(&probe, &emb, &batch, &cfg(3)).0)
            },
            &CheckConfig { samples: 24, ..CheckConfig::default() },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.groups);
    }
}
