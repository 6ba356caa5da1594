//! Reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and backward is a single reverse sweep. Values and
//! gradients are held in `f64`; parameters enter and leave as `f32` tensors.

use crate::error::{bail, Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-query key lists for [`Tape::attention`], in compressed row form.
#[derive(Debug, Clone)]
pub struct KeyLists {
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl Default for KeyLists {
    fn default() -> Self {
        Self::new()
    }
}

impl KeyLists {
    pub fn new() -> Self {
        Self { offsets: vec![0], keys: Vec::new() }
    }

    /// Appends the key list of the next query.
    pub fn push(&mut self, keys: impl IntoIterator<Item = usize>) {
        self.keys.extend(keys.into_iter().map(|k| k as u32));
        self.offsets.push(self.keys.len());
    }

    /// Full causal lists over `n` positions.
    pub fn causal(n: usize) -> Self {
        let mut lists = Self::new();
        for i in 0..n {
            lists.push(0..=i);
        }
        lists
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.keys[self.offsets[query]..self.offsets[query + 1]].iter().map(|&k| k as usize)
    }

    fn span(&self, query: usize) -> (usize, usize) {
        (self.offsets[query], self.offsets[query + 1])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    ScaleScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, lists: KeyLists, probs: Vec<f64> },
    SoftCe { logits: Var, target: Vec<f64>, lse: Vec<f64> },
    TopKCe { logits: Var, support: Vec<u32>, weights: Vec<f64>, k: usize },
    HardCe { logits: Var, rows: Vec<usize>, labels: Vec<usize>, lse: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn cols(&self) -> usize {
        *self.dims.last().expect("node has dims")
    }

    fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.value[i * c..(i + 1) * c]
    }
}

/// Autodiff tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn as_2d(dims: &[usize], what: &str) -> Result<(usize, usize)> {
    match dims {
        [r, c] => Ok((*r, *c)),
        d => bail!(Shape, "{what} expects a 2-D value, got {:?}", d),
    }
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node { dims, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: &Tensor, requires_grad: bool) -> Var {
        self.push(value.dims().to_vec(), widen(value), Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant leaf from `f64` values.
    pub fn constant_f64(&mut self, dims: &[usize], value: Vec<f64>) -> Result<Var> {
        if dims.iter().product::<usize>() != value.len() || dims.contains(&0) {
            bail!(Shape, "constant of {} values for dims {:?}", value.len(), dims);
        }
        Ok(self.push(dims.to_vec(), value, Op::Leaf, false))
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.node(v).dims
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value rounded to `f32`.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.dims, n.value.iter().map(|&x| x as f32).collect()).expect("node dims are valid")
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`]; `None` when
    /// nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` rounded to `f32` (zeros when nothing flowed into it).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let dims = &self.node(v).dims;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(dims, g.iter().map(|&x| x as f32).collect()).expect("grad matches value dims"),
            None => Tensor::zeros(dims),
        }
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let dims = n.dims.clone();
        let rg = n.requires_grad;
        self.push(dims, value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.dims != nb.dims {
            bail!(Shape, "{what}: {:?} vs {:?}", na.dims, nb.dims);
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let dims = na.dims.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(dims, value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_2d(self.dims(a), "matmul lhs")?;
        let (k2, n) = as_2d(self.dims(b), "matmul rhs")?;
        if k != k2 {
            bail!(Shape, "matmul inner dims differ: [{m}x{k}]·[{k2}x{n}]");
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.values(a), self.values(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_2d(self.dims(a), "transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(self.values(a), r, c, &mut out);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let na = self.node(a);
        let nb = self.node(bias);
        let n = na.cols();
        if nb.value.len() != n {
            bail!(Shape, "bias of {} values for rows of {n}", nb.value.len());
        }
        let value = na.value.chunks(n).flat_map(|row| row.iter().zip(&nb.value).map(|(x, y)| x + y)).collect();
        let dims = na.dims.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(dims, value, Op::AddBias(a, bias), rg))
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = as_2d(self.dims(a), "scale_rows")?;
        let sv = self.values(s);
        if sv.len() != m {
            bail!(Shape, "scale_rows: {} scales for {m} rows", sv.len());
        }
        let mut value = self.values(a).to_vec();
        for (row, &f) in value.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(vec![m, n], value, Op::ScaleRows(a, s), rg))
    }

    /// Multiplies every element of `a` by the single value in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.values(s).len() != 1 {
            bail!(Shape, "scale_by expects a scalar, got {:?}", self.dims(s));
        }
        let f = self.values(s)[0];
        let rg = self.rg(a) || self.rg(s);
        let v = self.map(a, Op::ScaleScalar(a, s), |x| x * f);
        self.nodes[v.0].requires_grad = rg;
        Ok(v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * kernels::sigmoid(x))
    }

    /// Row-wise RMS norm with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let nx = self.node(x);
        let n = nx.cols();
        let g = self.values(gain);
        if g.len() != n {
            bail!(Shape, "rmsnorm gain has {} values for rows of {n}", g.len());
        }
        let mut out = vec![0.0; nx.value.len()];
        let inv = nx
            .value
            .chunks(n)
            .zip(out.chunks_mut(n))
            .map(|(src, dst)| kernels::rmsnorm_row(src, g, dst))
            .collect();
        let dims = nx.dims.clone();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(dims, out, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Selects rows of a 2-D value (repeats allowed).
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, n) = as_2d(self.dims(src), "gather")?;
        if idx.is_empty() {
            bail!(Shape, "gather with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            bail!(Range, "gather index {bad} out of {r} rows");
        }
        let s = self.node(src);
        let mut value = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            value.extend_from_slice(s.row(i));
        }
        let rg = self.rg(src);
        Ok(self.push(vec![idx.len(), n], value, Op::Gather { src, idx }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n1) = as_2d(self.dims(a), "concat_cols")?;
        let (m2, n2) = as_2d(self.dims(b), "concat_cols")?;
        if m != m2 {
            bail!(Shape, "concat_cols row counts differ: {m} vs {m2}");
        }
        let mut value = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            value.extend_from_slice(self.node(a).row(i));
            value.extend_from_slice(self.node(b).row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n1 + n2], value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Shape, "concat_rows of nothing");
        }
        let n = self.node(parts[0]).cols();
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = as_2d(self.dims(p), "concat_rows")?;
            if c != n {
                bail!(Shape, "concat_rows column counts differ: {n} vs {c}");
            }
            value.extend_from_slice(self.values(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multi-head scaled dot-product attention. Query `i` attends to the rows of
    /// `k`/`v` named by `lists.get(i)`, in that order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, lists: KeyLists) -> Result<Var> {
        let (nq, d) = as_2d(self.dims(q), "attention q")?;
        let (nk, dk) = as_2d(self.dims(k), "attention k")?;
        let (nv, dv) = as_2d(self.dims(v), "attention v")?;
        if dk != d || dv != d || nk != nv {
            bail!(Shape, "attention shapes q[{nq}x{d}] k[{nk}x{dk}] v[{nv}x{dv}]");
        }
        if heads == 0 || d % heads != 0 || d / heads > kernels::MAX_HEAD_DIM {
            bail!(Shape, "width {d} cannot be split into {heads} heads");
        }
        if lists.len() != nq {
            bail!(Shape, "{} key lists for {nq} queries", lists.len());
        }
        for i in 0..nq {
            let (a, b) = lists.span(i);
            if a == b {
                bail!(Structure, "query {i} attends to nothing");
            }
            if let Some(bad) = lists.get(i).find(|&j| j >= nk) {
                bail!(Range, "query {i} names key {bad} of {nk}");
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0f64; lists.keys.len() * heads];
        let mut out = vec![0.0f64; nq * d];
        {
            let (qn, kn, vn) = (self.node(q), self.node(k), self.node(v));
            let mut krows: Vec<&[f64]> = Vec::new();
            let mut vrows: Vec<&[f64]> = Vec::new();
            for i in 0..nq {
                krows.clear();
                vrows.clear();
                for j in lists.get(i) {
                    krows.push(kn.row(j));
                    vrows.push(vn.row(j));
                }
                let (a, b) = lists.span(i);
                let len = b - a;
                for h in 0..heads {
                    let off = h * dh;
                    let p = &mut probs[a * heads + h * len..a * heads + (h + 1) * len];
                    kernels::attend_head(
                        &qn.row(i)[off..off + dh],
                        &krows,
                        &vrows,
                        off,
                        scale,
                        p,
                        &mut out[i * d + off..i * d + off + dh],
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(vec![nq, d], out, Op::Attention { q, k, v, heads, lists, probs }, rg))
    }

    /// Per-row cross-entropy `-Σ_j target_j · log softmax(logits)_j` against
    /// a constant soft target.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (m, n) = as_2d(self.dims(logits), "soft_cross_entropy")?;
        if target.dims() != [m, n] {
            bail!(Shape, "soft target {:?} for logits [{m}x{n}]", target.dims());
        }
        let target = widen(target);
        let ln = self.node(logits);
        let mut lse = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = ln.row(i);
            let l = logsumexp(row.iter().copied());
            let mut loss = 0.0f64;
            for (&t, &x) in target[i * n..(i + 1) * n].iter().zip(row) {
                loss += t * (l - x);
            }
            lse.push(l);
            out.push(loss);
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![m], out, Op::SoftCe { logits, target, lse }, rg))
    }

    /// Per-row cross-entropy restricted to the `k` largest entries of each
    /// target row: both the target mass and the logits are renormalized over
    /// that support.
    pub fn topk_cross_entropy(&mut self, logits: Var, target: &Tensor, k: usize) -> Result<Var> {
        let (m, n) = as_2d(self.dims(logits), "topk_cross_entropy")?;
        if target.dims() != [m, n] {
            bail!(Shape, "top-k target {:?} for logits [{m}x{n}]", target.dims());
        }
        if k == 0 || k > n {
            bail!(Config, "top-k size {k} for {n} classes");
        }
        let ln = self.node(logits);
        let mut support = Vec::with_capacity(m * k);
        let mut weights = Vec::with_capacity(m * k);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let trow = target.row(i);
            let row = ln.row(i);
            let top = top_k_indices(trow, k);
            let mass: f64 = top.iter().map(|&j| trow[j] as f64).sum();
            let l = logsumexp(top.iter().map(|&j| row[j]));
            let mut loss = 0.0f64;
            for &j in &top {
                let w = if mass > 0.0 { trow[j] as f64 / mass } else { 1.0 / k as f64 };
                loss += w * (l - row[j]);
                support.push(j as u32);
                weights.push(w);
            }
            out.push(loss);
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![m], out, Op::TopKCe { logits, support, weights, k }, rg))
    }

    /// Next-token cross-entropy `-log softmax(logits[row])[label]` for each
    /// `(row, label)` pair.
    pub fn hard_cross_entropy(&mut self, logits: Var, rows: Vec<usize>, labels: Vec<usize>) -> Result<Var> {
        let (m, n) = as_2d(self.dims(logits), "hard_cross_entropy")?;
        if rows.len() != labels.len() || rows.is_empty() {
            bail!(Shape, "{} rows for {} labels", rows.len(), labels.len());
        }
        if rows.iter().any(|&r| r >= m) || labels.iter().any(|&l| l >= n) {
            bail!(Range, "cross-entropy row/label out of range for [{m}x{n}]");
        }
        let ln = self.node(logits);
        let mut lse = Vec::with_capacity(rows.len());
        let mut out = Vec::with_capacity(rows.len());
        for (&r, &y) in rows.iter().zip(&labels) {
            let row = ln.row(r);
            let l = logsumexp(row.iter().copied());
            lse.push(l);
            out.push(l - row[y]);
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![rows.len()], out, Op::HardCe { logits, rows, labels, lse }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.values(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Runs the reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values(loss).len() != 1 {
            bail!(Shape, "backward needs a scalar loss, got {:?}", self.dims(loss));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            if let Some(p) = parents(&node.op).into_iter().find(|p| p.0 >= i) {
                return Err(Error::Internal(format!("tape cycle: node {i} depends on node {}", p.0)));
            }
            backprop(&self.nodes, &mut self.grads, i, &g)?;
        }
        Ok(())
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Indices of the `k` largest values, largest first; ties by lower index.
pub fn top_k_indices(x: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddBias(a, b)
        | Op::Mul(a, b)
        | Op::ScaleRows(a, b)
        | Op::ScaleScalar(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Transpose(a) | Op::Scale(a, _) | Op::Sigmoid(a) | Op::Silu(a) | Op::Sum(a) => vec![*a],
        Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        Op::Gather { src, .. } => vec![*src],
        Op::ConcatRows(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::SoftCe { logits, .. } | Op::TopKCe { logits, .. } | Op::HardCe { logits, .. } => vec![*logits],
    }
}

type Grads = [Option<Vec<f64>>];

/// Lets `f` add into the gradient slot of `v` if it wants one.
fn acc_with(nodes: &[Node], grads: &mut Grads, v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

fn acc_slice(nodes: &[Node], grads: &mut Grads, v: Var, delta: &[f64]) {
    acc_with(nodes, grads, v, |g| g.iter_mut().zip(delta).for_each(|(a, b)| *a += b));
}

fn backprop(nodes: &[Node], grads: &mut Grads, i: usize, g: &[f64]) -> Result<()> {
    let node = &nodes[i];
    let nd = |v: Var| &nodes[v.0];
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nd(*a).dims[0], nd(*a).dims[1]);
            let n = nd(*b).dims[1];
            if rg(*a) {
                let mut bt = vec![0.0; k * n];
                kernels::transpose(&nd(*b).value, k, n, &mut bt);
                let mut tmp = vec![0.0; m * k];
                kernels::matmul(g, &bt, m, n, k, &mut tmp);
                acc_slice(nodes, grads, *a, &tmp);
            }
            if rg(*b) {
                let mut at = vec![0.0; m * k];
                kernels::transpose(&nd(*a).value, m, k, &mut at);
                let mut tmp = vec![0.0; k * n];
                kernels::matmul(&at, g, k, m, n, &mut tmp);
                acc_slice(nodes, grads, *b, &tmp);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.dims[0], node.dims[1]);
            let mut da = vec![0.0; r * c];
            kernels::transpose(g, r, c, &mut da);
            acc_slice(nodes, grads, *a, &da);
        }
        Op::Add(a, b) => {
            acc_slice(nodes, grads, *a, g);
            acc_slice(nodes, grads, *b, g);
        }
        Op::AddBias(a, b) => {
            acc_slice(nodes, grads, *a, g);
            let n = nd(*b).value.len();
            acc_with(nodes, grads, *b, |db| {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nd(*a).value, &nd(*b).value);
            acc_with(nodes, grads, *a, |da| da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (x, y))| *d += x * y));
            acc_with(nodes, grads, *b, |db| db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| *d += x * y));
        }
        Op::ScaleRows(a, s) => {
            let n = nd(*a).cols();
            let (av, sv) = (&nd(*a).value, &nd(*s).value);
            acc_with(nodes, grads, *a, |da| {
                for ((drow, grow), &f) in da.chunks_mut(n).zip(g.chunks(n)).zip(sv) {
                    drow.iter_mut().zip(grow).for_each(|(d, x)| *d += x * f);
                }
            });
            acc_with(nodes, grads, *s, |ds| {
                for ((d, grow), arow) in ds.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                    *d += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        Op::ScaleScalar(a, s) => {
            let f = nd(*s).value[0];
            let av = &nd(*a).value;
            acc_with(nodes, grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x * f));
            acc_with(nodes, grads, *s, |ds| ds[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>());
        }
        Op::Scale(a, c) => {
            acc_with(nodes, grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x * c));
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            acc_with(nodes, grads, *a, |da| {
                da.iter_mut().zip(g.iter().zip(y)).for_each(|(d, (gy, y))| *d += gy * y * (1.0 - y))
            });
        }
        Op::Silu(a) => {
            let xv = &nd(*a).value;
            acc_with(nodes, grads, *a, |da| {
                for (d, (gy, &x)) in da.iter_mut().zip(g.iter().zip(xv)) {
                    let s = kernels::sigmoid(x);
                    *d += gy * s * (1.0 + x * (1.0 - s));
                }
            });
        }
        Op::RmsNorm { x, gain, inv } => {
            let n = nd(*x).cols();
            let (xv, gv) = (&nd(*x).value, &nd(*gain).value);
            acc_with(nodes, grads, *x, |dx| {
                for (r, &iv) in inv.iter().enumerate() {
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = (0..n).map(|c| gr[c] * gv[c] * xr[c]).sum();
                    let coef = iv * iv * iv * dot / n as f64;
                    for c in 0..n {
                        dx[r * n + c] += iv * gv[c] * gr[c] - coef * xr[c];
                    }
                }
            });
            acc_with(nodes, grads, *gain, |dg| {
                for (r, &iv) in inv.iter().enumerate() {
                    for c in 0..n {
                        dg[c] += g[r * n + c] * xv[r * n + c] * iv;
                    }
                }
            });
        }
        Op::Gather { src, idx } => {
            let n = nd(*src).cols();
            acc_with(nodes, grads, *src, |ds| {
                for (r, &i) in idx.iter().enumerate() {
                    ds[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let n1 = nd(*a).cols();
            let w = node.cols();
            acc_with(nodes, grads, *a, |da| {
                for (drow, grow) in da.chunks_mut(n1).zip(g.chunks(w)) {
                    drow.iter_mut().zip(&grow[..n1]).for_each(|(d, x)| *d += x);
                }
            });
            acc_with(nodes, grads, *b, |db| {
                for (drow, grow) in db.chunks_mut(w - n1).zip(g.chunks(w)) {
                    drow.iter_mut().zip(&grow[n1..]).for_each(|(d, x)| *d += x);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nd(p).value.len();
                acc_slice(nodes, grads, p, &g[off..off + len]);
                off += len;
            }
        }
        Op::Attention { q, k, v, heads, lists, probs } => {
            let (nq, d) = (nd(*q).dims[0], nd(*q).dims[1]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qn, kn, vn) = (nd(*q), nd(*k), nd(*v));
            let mut dq = vec![0.0f64; nq * d];
            let mut dk = vec![0.0f64; kn.value.len()];
            let mut dv = vec![0.0f64; vn.value.len()];
            let mut dp = Vec::new();
            for i in 0..nq {
                let (a, b) = lists.span(i);
                let len = b - a;
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[a * heads + h * len..a * heads + (h + 1) * len];
                    let go = &g[i * d + off..i * d + off + dh];
                    dp.clear();
                    let mut pdp = 0.0f64;
                    for (t, j) in lists.get(i).enumerate() {
                        let vr = &vn.row(j)[off..off + dh];
                        let mut s = 0.0f64;
                        for c in 0..dh {
                            s += go[c] * vr[c];
                            dv[j * d + off + c] += p[t] * go[c];
                        }
                        dp.push(s);
                        pdp += p[t] * s;
                    }
                    let qr = &qn.row(i)[off..off + dh];
                    for (t, j) in lists.get(i).enumerate() {
                        let ds = p[t] * (dp[t] - pdp) * scale;
                        let kr = &kn.row(j)[off..off + dh];
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * kr[c];
                            dk[j * d + off + c] += ds * qr[c];
                        }
                    }
                }
            }
            acc_slice(nodes, grads, *q, &dq);
            acc_slice(nodes, grads, *k, &dk);
            acc_slice(nodes, grads, *v, &dv);
        }
        Op::SoftCe { logits, target, lse } => {
            let ln = nd(*logits);
            let n = ln.cols();
            acc_with(nodes, grads, *logits, |dl| {
                for (r, &l) in lse.iter().enumerate() {
                    let trow = &target[r * n..(r + 1) * n];
                    let mass: f64 = trow.iter().sum();
                    let row = ln.row(r);
                    for c in 0..n {
                        let sm = (row[c] - l).exp();
                        dl[r * n + c] += g[r] * (sm * mass - trow[c]);
                    }
                }
            });
        }
        Op::TopKCe { logits, support, weights, k } => {
            let ln = nd(*logits);
            let n = ln.cols();
            acc_with(nodes, grads, *logits, |dl| {
                for r in 0..ln.dims[0] {
                    let sup = &support[r * k..(r + 1) * k];
                    let w = &weights[r * k..(r + 1) * k];
                    let row = ln.row(r);
                    let l = logsumexp(sup.iter().map(|&j| row[j as usize]));
                    let mass: f64 = w.iter().sum();
                    for (&j, &wj) in sup.iter().zip(w) {
                        let sm = (row[j as usize] - l).exp();
                        dl[r * n + j as usize] += g[r] * (sm * mass - wj);
                    }
                }
            });
        }
        Op::HardCe { logits, rows, labels, lse } => {
            let ln = nd(*logits);
            let n = ln.cols();
            acc_with(nodes, grads, *logits, |dl| {
                for (t, (&r, &y)) in rows.iter().zip(labels).enumerate() {
                    let row = ln.row(r);
                    for c in 0..n {
                        let sm = (row[c] - lse[t]).exp();
                        let ind = if c == y { 1.0 } else { 0.0 };
                        dl[r * n + c] += g[t] * (sm - ind);
                    }
                }
            });
        }
        Op::Sum(a) => {
            acc_with(nodes, grads, *a, |da| da.iter_mut().for_each(|x| *x += g[0]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(&Tensor::vector(vec![3.0, 4.0, -5.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0, -5.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn intermediate_grads_released() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn attention_rejects_empty_list() {
        let mut tape = Tape::new();
        let q = tape.param(&Tensor::zeros(&[2, 4]));
        let mut lists = KeyLists::new();
        lists.push([0]);
        lists.push([]);
        assert!(matches!(tape.attention(q, q, q, 1, lists), Err(Error::Structure(_))));
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.5, 0.2], 3), vec![1, 2, 3]);
    }

    /// Every op in one composite, checked against central differences of the
    /// tape's own forward pass.
    #[test]
    fn composite_matches_finite_differences() {
        use crate::numkit::{finite_diff_check, CheckConfig, Rng};
        let mut rng = Rng::new(21);
        let mut rand = |dims: &[usize], s: f64| {
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(|_| (rng.normal() * s) as f32).collect()).unwrap()
        };
        let target = {
            let t = rand(&[4, 6], 1.0);
            crate::numkit::softmax_rows(&t, 1.0)
        };
        let mut params = vec![
            rand(&[5, 8], 0.7),
            rand(&[8, 8], 0.4),
            rand(&[8], 1.0),
            rand(&[8], 0.3),
            rand(&[1], 1.0),
            rand(&[16, 6], 0.4),
            rand(&[4], 1.0),
        ];
        let build = |p: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
            let mut t = Tape::new();
            let v: Vec<Var> = p.iter().map(|x| t.param(x)).collect();
            let x = t.gather(v[0], vec![0, 2, 4, 2])?;
            let q = t.matmul(x, v[1])?;
            let q = t.add_bias(q, v[3])?;
            let kt = t.transpose(v[1])?;
            let k = t.matmul(x, kt)?;
            let mut lists = KeyLists::new();
            lists.push([0]);
            lists.push([0, 1]);
            lists.push([2, 0]);
            lists.push([1, 3, 2]);
            let a = t.attention(q, k, x, 2, lists)?;
            let n = t.rmsnorm(a, v[2])?;
            let s = t.silu(n);
            let g = t.sigmoid(v[4]);
            let sg = t.scale_by(s, g)?;
            let rowsum = t.sigmoid(v[6]);
            let sr = t.scale_rows(sg, rowsum)?;
            let m = t.mul(sr, x)?;
            let m = t.add(m, sg)?;
            let c = t.concat_cols(m, x)?;
            let both = t.concat_rows(&[c, c])?;
            let logits = t.matmul(both, v[5])?;
            let top = t.gather(logits, vec![0, 1, 2, 3])?;
            let l1 = t.soft_cross_entropy(top, &target)?;
            let l2 = t.topk_cross_entropy(top, &target, 3)?;
            let l3 = t.hard_cross_entropy(logits, vec![1, 5, 7], vec![0, 3, 5])?;
            let s1 = t.sum(l1);
            let s2 = t.sum(l2);
            let s2 = t.scale(s2, 0.5);
            let s3 = t.sum(l3);
            let a12 = t.add(s1, s2)?;
            let loss = t.add(a12, s3)?;
            Ok((t, v, loss))
        };
        let (mut tape, vars, loss) = build(&params).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        assert!(grads.iter().all(|g| g.max_abs() > 0.0));
        let cfg = CheckConfig::default();
        let rep = finite_diff_check(
            &["emb", "proj", "gain", "bias", "gate", "head", "rows"],
            &mut params,
            &grads,
            |p| {
                let (t, _, l) = build(p)?;
                Ok(t.scalar(l))
            },
            &cfg,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
