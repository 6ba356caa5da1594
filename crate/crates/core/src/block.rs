//! Pre-norm transformer layer shared by the target and the draft.

use crate::checkpoint::Checkpoint;
use crate::error::{bail, Result};
use crate::numkit::kernels::{self, MAX_HEAD_DIM};
use crate::numkit::{KeyLists, Rng, Tape, Tensor, Var};

/// Self-attention followed by a SiLU MLP, each behind an RMS norm and a
/// residual connection. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

const NAMES: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

fn normal(dims: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| (rng.normal() * std) as f32).collect()).expect("positive dims")
}

/// Output of [`Block::forward_rows`].
#[derive(Debug, Clone)]
pub struct RowsOut {
    /// Updated residual stream of the requested output rows.
    pub x: Vec<f32>,
    /// Keys and values of every input row.
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl Block {
    pub fn tensor_names() -> [&'static str; 8] {
        NAMES
    }

    /// `depth` is the number of layers in the stack, used to shrink the
    /// residual-branch output projections.
    pub fn init(d: usize, d_ff: usize, depth: usize, rng: &mut Rng) -> Self {
        let s_in = 1.0 / (d as f64).sqrt();
        let s_res = 1.0 / (2.0 * depth as f64).sqrt();
        Self {
            attn_norm: Tensor::full(&[d], 1.0),
            wq: normal(&[d, d], s_in, rng),
            wk: normal(&[d, d], s_in, rng),
            wv: normal(&[d, d], s_in, rng),
            wo: normal(&[d, d], s_in * s_res, rng),
            mlp_norm: Tensor::full(&[d], 1.0),
            w_up: normal(&[d, d_ff], s_in, rng),
            w_down: normal(&[d_ff, d], s_res / (d_ff as f64).sqrt(), rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.mlp_norm, &self.w_up, &self.w_down]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            ckpt.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn load(prefix: &str, ckpt: &Checkpoint, d: usize, d_ff: usize) -> Result<Self> {
        let get = |name: &str, dims: &[usize]| ckpt.expect(&format!("{prefix}.{name}"), dims);
        Ok(Self {
            attn_norm: get("attn_norm", &[d])?,
            wq: get("wq", &[d, d])?,
            wk: get("wk", &[d, d])?,
            wv: get("wv", &[d, d])?,
            wo: get("wo", &[d, d])?,
            mlp_norm: get("mlp_norm", &[d])?,
            w_up: get("w_up", &[d, d_ff])?,
            w_down: get("w_down", &[d_ff, d])?,
        })
    }

    /// Keys and values of `n` input rows.
    pub fn key_values(&self, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let d = self.d_model();
        let h = norm_rows(x, &self.attn_norm, d);
        (project(&h, &self.wk, n), project(&h, &self.wv, n))
    }

    /// Runs `n` new rows against `cache_len` cached key/value rows.
    ///
    /// Row `i` attends to every cached row, then to the rows listed in
    /// `attend[i]` (earlier rows of this batch, in order), then to itself.
    /// Only the rows named in `out_rows` are carried through the output
    /// projection and MLP. All per-row arithmetic is independent of batch
    /// composition, so a row computed here is bit-identical to the same row
    /// computed alone against a cache holding its attended rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_rows(
        &self,
        heads: usize,
        cache_k: &[f32],
        cache_v: &[f32],
        x: &[f32],
        n: usize,
        attend: &[Vec<usize>],
        out_rows: &[usize],
    ) -> Result<RowsOut> {
        let d = self.d_model();
        if heads == 0 || !d.is_multiple_of(heads) || d / heads > MAX_HEAD_DIM {
            bail!(Shape, "width {d} cannot be split into {heads} heads");
        }
        if x.len() != n * d || attend.len() != n || cache_k.len() != cache_v.len() || !cache_k.len().is_multiple_of(d) {
            bail!(Shape, "forward_rows: {} inputs for {n} rows of {d}", x.len());
        }
        for (i, a) in attend.iter().enumerate() {
            if a.iter().any(|&j| j >= i) {
                bail!(Structure, "row {i} attends to a row that is not before it");
            }
        }
        let cache_len = cache_k.len() / d;
        let h = norm_rows(x, &self.attn_norm, d);
        let k = project(&h, &self.wk, n);
        let v = project(&h, &self.wv, n);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let m = out_rows.len();
        let mut hq = Vec::with_capacity(m * d);
        for &r in out_rows {
            hq.extend_from_slice(&h[r * d..(r + 1) * d]);
        }
        let q = project(&hq, &self.wq, m);
        let mut attn = vec![0.0f32; m * d];
        let mut keys: Vec<&[f32]> = Vec::new();
        let mut vals: Vec<&[f32]> = Vec::new();
        let mut probs = Vec::new();
        for (oi, &r) in out_rows.iter().enumerate() {
            keys.clear();
            vals.clear();
            for c in 0..cache_len {
                keys.push(&cache_k[c * d..(c + 1) * d]);
                vals.push(&cache_v[c * d..(c + 1) * d]);
            }
            for &j in attend[r].iter().chain(std::iter::once(&r)) {
                keys.push(&k[j * d..(j + 1) * d]);
                vals.push(&v[j * d..(j + 1) * d]);
            }
            probs.resize(keys.len(), 0.0);
            for hd in 0..heads {
                let off = hd * dh;
                kernels::attend_head(
                    &q[oi * d + off..oi * d + off + dh],
                    &keys,
                    &vals,
                    off,
                    scale,
                    &mut probs,
                    &mut attn[oi * d + off..oi * d + off + dh],
                );
            }
        }
        let a = project(&attn, &self.wo, m);
        let mut xo = Vec::with_capacity(m * d);
        for (oi, &r) in out_rows.iter().enumerate() {
            xo.extend(x[r * d..(r + 1) * d].iter().zip(&a[oi * d..(oi + 1) * d]).map(|(p, q)| p + q));
        }
        let h2 = norm_rows(&xo, &self.mlp_norm, d);
        let mut up = project(&h2, &self.w_up, m);
        up.iter_mut().for_each(|u| *u = kernels::silu(*u));
        let down = project(&up, &self.w_down, m);
        xo.iter_mut().zip(&down).for_each(|(p, q)| *p += q);
        Ok(RowsOut { x: xo, k, v })
    }
}

fn norm_rows(x: &[f32], gain: &Tensor, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::rmsnorm_row(src, gain.data(), dst);
    }
    out
}

fn project(x: &[f32], w: &Tensor, n: usize) -> Vec<f32> {
    let (k, m) = (w.rows(), w.cols());
    let mut out = vec![0.0; n * m];
    kernels::matmul(x, w.data(), n, k, m, &mut out);
    out
}

/// Tape handles for [`BlockVars::keys`].
#[derive(Debug, Clone, Copy)]
pub struct KvVars {
    pub h: Var,
    pub k: Var,
    pub v: Var,
}

/// A [`Block`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub vars: [Var; 8],
}

impl BlockVars {
    pub fn register(tape: &mut Tape, block: &Block, trainable: bool) -> Self {
        let vars = block.tensors().map(|t| tape.leaf(t, trainable));
        Self { vars }
    }

    /// Differentiable layer over the rows of `x` (`[N×d]`).
    ///
    /// Keys and values are computed for every row. `queries` selects the rows
    /// that produce outputs (all rows when `None`); `lists[i]` names the rows
    /// that query `i` attends to.
    pub fn forward(&self, tape: &mut Tape, x: Var, heads: usize, queries: Option<Vec<usize>>, lists: KeyLists) -> Result<Var> {
        let kv = self.keys(tape, x)?;
        let (xq, hq) = match queries {
            Some(rows) => (tape.gather(x, rows.clone())?, tape.gather(kv.h, rows)?),
            None => (x, kv.h),
        };
        self.queries(tape, xq, hq, kv.k, kv.v, heads, lists)
    }

    /// Normalized inputs, keys and values of the rows of `x`.
    pub fn keys(&self, tape: &mut Tape, x: Var) -> Result<KvVars> {
        let [attn_norm, _, wk, wv, ..] = self.vars;
        let h = tape.rmsnorm(x, attn_norm)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        Ok(KvVars { h, k, v })
    }

    /// Attention and MLP for query rows `x` with normalized inputs `h`
    /// against the key/value rows `k`/`v`.
    #[allow(clippy::too_many_arguments)]
    pub fn queries(&self, tape: &mut Tape, x: Var, h: Var, k: Var, v: Var, heads: usize, lists: KeyLists) -> Result<Var> {
        let [_, wq, _, _, wo, mlp_norm, w_up, w_down] = self.vars;
        let q = tape.matmul(h, wq)?;
        let a = tape.attention(q, k, v, heads, lists)?;
        let a = tape.matmul(a, wo)?;
        let x1 = tape.add(x, a)?;
        let h2 = tape.rmsnorm(x1, mlp_norm)?;
        let u = tape.matmul(h2, w_up)?;
        let u = tape.silu(u);
        let dn = tape.matmul(u, w_down)?;
        tape.add(x1, dn)
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<f32> {
        (0..n * d).map(|_| rng.normal() as f32).collect()
    }

    #[test]
    fn tape_and_inference_agree() {
        let mut rng = Rng::new(2);
        let b = Block::init(16, 32, 2, &mut rng);
        let x = rand_rows(5, 16, &mut rng);
        let attend: Vec<Vec<usize>> = (0..5).map(|i| (0..i).collect()).collect();
        let out = b.forward_rows(4, &[], &[], &x, 5, &attend, &[0, 1, 2, 3, 4]).unwrap();

        let mut tape = Tape::new();
        let bv = BlockVars::register(&mut tape, &b, false);
        let xv = tape.constant(&Tensor::new(&[5, 16], x).unwrap());
        let y = bv.forward(&mut tape, xv, 4, None, KeyLists::causal(5)).unwrap();
        for (a, b) in tape.values(y).iter().zip(&out.x) {
            assert!((*a as f32 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_row_equals_cached_single_row() {
        let mut rng = Rng::new(8);
        let b = Block::init(16, 32, 2, &mut rng);
        let x = rand_rows(4, 16, &mut rng);
        // rows 1 and 2 both hang off row 0; row 3 hangs off row 2
        let attend = vec![vec![], vec![0], vec![0], vec![0, 2]];
        let all = b.forward_rows(2, &[], &[], &x, 4, &attend, &[0, 1, 2, 3]).unwrap();
        // rerun row 3 alone with rows 0 and 2 supplied as cache
        let d = 16;
        let mut ck = all.k[..d].to_vec();
        ck.extend_from_slice(&all.k[2 * d..3 * d]);
        let mut cv = all.v[..d].to_vec();
        cv.extend_from_slice(&all.v[2 * d..3 * d]);
        let one = b.forward_rows(2, &ck, &cv, &x[3 * d..], 1, &[vec![]], &[0]).unwrap();
        assert!(one.x.iter().zip(&all.x[3 * d..]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_forward_reference() {
        let mut rng = Rng::new(1);
        let b = Block::init(8, 8, 1, &mut rng);
        let x = rand_rows(2, 8, &mut rng);
        let r = b.forward_rows(2, &[], &[], &x, 2, &[vec![1], vec![]], &[0, 1]);
        assert!(matches!(r, Err(crate::Error::Structure(_))));
    }
}
