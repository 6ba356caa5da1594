//! Slice-level kernels shared by the tensor API, the autodiff tape and the
//! inference paths. Every reduction accumulates in `f64` in a fixed order and
//! rounds to `f32` once, which is what makes batched and sequential model
//! evaluation agree bit for bit.

pub const RMS_EPS: f64 = 1e-6;

/// Element types the kernels run on. Arithmetic is always `f64`.
pub trait Real: Copy + Default + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i < m {
        let mr = (m - i).min(MR);
        let mut j = 0;
        while j < n {
            let nr = (n - j).min(NR);
            if mr == MR && nr == NR {
                tile_full(a, b, i, j, k, n, out);
            } else {
                tile_partial(a, b, i, j, mr, nr, k, n, out);
            }
            j += NR;
        }
        i += MR;
    }
}

#[inline(always)]
fn tile_full<T: Real>(a: &[T], b: &[T], i: usize, j: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = [[0f64; NR]; MR];
    for kk in 0..k {
        let brow: &[T; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
        let bv: [f64; NR] = brow.map(|x| x.to_f64());
        for (r, accr) in acc.iter_mut().enumerate() {
            let av = a[(i + r) * k + kk].to_f64();
            for c in 0..NR {
                accr[c] = av.mul_add(bv[c], accr[c]);
            }
        }
    }
    for (r, accr) in acc.iter().enumerate() {
        let dst = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
        for c in 0..NR {
            dst[c] = T::from_f64(accr[c]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_partial<T: Real>(
    a: &[T],
    b: &[T],
    i: usize,
    j: usize,
    mr: usize,
    nr: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    let mut acc = [[0f64; NR]; MR];
    for kk in 0..k {
        let brow = &b[kk * n + j..kk * n + j + nr];
        for (r, accr) in acc.iter_mut().enumerate().take(mr) {
            let av = a[(i + r) * k + kk].to_f64();
            for c in 0..nr {
                accr[c] = av.mul_add(brow[c].to_f64(), accr[c]);
            }
        }
    }
    for (r, accr) in acc.iter().enumerate().take(mr) {
        let dst = &mut out[(i + r) * n + j..(i + r) * n + j + nr];
        for c in 0..nr {
            dst[c] = T::from_f64(accr[c]);
        }
    }
}

pub fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, out: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(x: &[f32], temperature: f32, out: &mut [f32]) {
    if temperature == 0.0 {
        out.fill(0.0);
        out[argmax(x)] = 1.0;
        return;
    }
    let t = temperature as f64;
    let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    for &v in x {
        sum += ((v as f64 - max) / t).exp();
    }
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (((v as f64 - max) / t).exp() / sum) as f32;
    }
}

/// Log-softmax at temperature 1 in `f64`.
pub fn log_softmax_f64(x: &[f32], out: &mut [f64]) {
    let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    for &v in x {
        sum += (v as f64 - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v as f64 - lse;
    }
}

/// Normalizes one row and returns the reciprocal RMS used.
pub fn rmsnorm_row<T: Real, G: Real>(x: &[T], gain: &[G], out: &mut [T]) -> f64 {
    let mut ss = 0.0f64;
    for &v in x {
        ss += v.to_f64() * v.to_f64();
    }
    let inv = 1.0 / (ss / x.len() as f64 + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = T::from_f64(v.to_f64() * inv * g.to_f64());
    }
    inv
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x * sigmoid(x)) as f32
}

/// Attention of one query head over the listed key/value rows.
///
/// `keys[i]`/`values[i]` are full model-width rows; the head occupies
/// `[offset, offset + q.len())`. Scores, softmax and the value mix are all `f64`
/// and run in list order. Probabilities are written to `probs`.
pub fn attend_head<T: Real>(
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    offset: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [T],
) {
    let dh = q.len();
    let mut max = f64::NEG_INFINITY;
    for (p, k) in probs.iter_mut().zip(keys) {
        let k = &k[offset..offset + dh];
        let mut s = 0.0f64;
        for c in 0..dh {
            s += q[c].to_f64() * k[c].to_f64();
        }
        let s = s * scale;
        *p = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0f64;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let mut acc = [0f64; 64];
    let acc = &mut acc[..dh];
    for (p, v) in probs.iter().zip(values) {
        let v = &v[offset..offset + dh];
        for c in 0..dh {
            acc[c] += p * v[c].to_f64();
        }
    }
    for c in 0..dh {
        out[c] = T::from_f64(acc[c]);
    }
}

/// Largest supported attention head width (see [`attend_head`]).
pub const MAX_HEAD_DIM: usize = 64;
