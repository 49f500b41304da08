//! Slice-level kernels shared by the inference path and the tape.
//!
//! Every row-wise kernel computes each output row from its own inputs with a
//! fixed loop order, so batching rows never changes a row's result. Prefill
//! and token-by-token decoding therefore agree bitwise.

use super::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    c
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`.
pub fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`.
pub fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, b_row, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
    c
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut lanes = [T::neg_infinity(); 8];
    let chunks = row.chunks_exact(8);
    let tail = chunks.remainder().iter().copied().fold(T::neg_infinity(), T::max);
    for c in chunks {
        for l in 0..8 {
            lanes[l] = if c[l] > lanes[l] { c[l] } else { lanes[l] };
        }
    }
    let max = lanes.iter().copied().fold(tail, T::max);
    row.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(row);
    let mut acc = [T::zero(); 8];
    let chunks = row.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + v);
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    let sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Writes `x / rms(x) * w` into `out`; returns `1 / rms(x)`.
pub fn rms_norm_row<T: Scalar>(x: &[T], w: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let ms = dot(x, x) / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
        *o = xi * inv * wi;
    }
    inv
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Inverse frequencies `base^(-2i/d_head)` for `i < d_head / 2`.
pub fn rope_inv_freq(d_head: usize, base: f64) -> Vec<f64> {
    (0..d_head / 2)
        .map(|i| base.powf(-((2 * i) as f64) / d_head as f64))
        .collect()
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head in `row` by
/// `pos · inv_freq[i]` (or by its negation when `inverse`).
pub fn rope_row<T: Scalar>(row: &mut [T], pos: usize, d_head: usize, inv_freq: &[f64], inverse: bool) {
    let sign = if inverse { -1.0 } else { 1.0 };
    let rot: Vec<(T, T)> = inv_freq
        .iter()
        .map(|f| {
            let theta = pos as f64 * f;
            (T::of(theta.cos()), T::of(sign * theta.sin()))
        })
        .collect();
    for head in row.chunks_exact_mut(d_head) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&rot) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

/// Which keys each query row may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMask {
    /// Every query sees all keys.
    Full,
    /// Query row `i` sits at key index `first_query_pos + i` and sees keys
    /// `0..=first_query_pos + i`.
    Causal { first_query_pos: usize },
}

impl KeyMask {
    #[inline]
    pub fn visible(self, row: usize, n_keys: usize) -> usize {
        match self {
            KeyMask::Full => n_keys,
            KeyMask::Causal { first_query_pos } => (first_query_pos + row + 1).min(n_keys),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// Which attention probabilities to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepProbs {
    None,
    /// `[n_heads, n_keys]` for the last query row.
    LastRow,
    /// `[n_q, n_heads, n_keys]`, zero beyond each row's visible range.
    All,
}

const QUERY_BLOCK: usize = 4;

/// `dot(rows[r][..lens[r]], v[..lens[r]])` for up to `QUERY_BLOCK` rows of
/// stride `stride`, bitwise equal to calling [`dot`] per row.
fn dot_rows<T: Scalar>(rows: &[T], stride: usize, lens: &[usize], v: &[T]) -> [T; QUERY_BLOCK] {
    let mut acc = [[T::zero(); 8]; QUERY_BLOCK];
    let chunks: Vec<usize> = lens.iter().map(|&n| n / 8).collect();
    let shared = if lens.len() == QUERY_BLOCK { chunks.iter().copied().min().unwrap_or(0) } else { 0 };
    for c in 0..shared {
        let vc = &v[c * 8..c * 8 + 8];
        for (r, a) in acc.iter_mut().enumerate() {
            let x = &rows[r * stride + c * 8..r * stride + c * 8 + 8];
            for l in 0..8 {
                a[l] += x[l] * vc[l];
            }
        }
    }
    let mut out = [T::zero(); QUERY_BLOCK];
    for (r, &n) in lens.iter().enumerate() {
        let row = &rows[r * stride..r * stride + n];
        let a = &mut acc[r];
        for c in shared..chunks[r] {
            for l in 0..8 {
                a[l] += row[c * 8 + l] * v[c * 8 + l];
            }
        }
        let mut tail = T::zero();
        for j in chunks[r] * 8..n {
            tail += row[j] * v[j];
        }
        out[r] = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
    }
    out
}

/// Decode-step attention without the transpose. Loop orders match the
/// blocked path element for element.
#[allow(clippy::too_many_arguments)]
fn single_query<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n_k: usize,
    layout: HeadLayout,
    vis: usize,
    scale: T,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = layout.d_model();
    let dh = layout.d_head;
    let mut s = vec![T::zero(); vis];
    let mut acc = vec![[T::zero(); 8]; dh];
    let mut tail = vec![T::zero(); dh];
    let mut tile = vec![T::zero(); 8 * dh];
    for h in 0..layout.n_heads {
        let off = h * dh;
        let q_h = &q[off..off + dh];
        // Eight keys at a time keeps eight independent sums in flight.
        for (c, sc) in s.chunks_mut(8).enumerate() {
            for (jj, t) in tile.chunks_exact_mut(dh).enumerate().take(sc.len()) {
                let j = c * 8 + jj;
                t.copy_from_slice(&keys[j * d + off..j * d + off + dh]);
            }
            let mut a = [T::zero(); 8];
            for e in 0..dh {
                let qe = q_h[e];
                for (jj, aj) in a.iter_mut().enumerate() {
                    *aj += qe * tile[jj * dh + e];
                }
            }
            for (sj, aj) in sc.iter_mut().zip(a) {
                *sj = aj * scale;
            }
        }
        softmax_in_place(&mut s);
        acc.iter_mut().for_each(|a| *a = [T::zero(); 8]);
        tail.iter_mut().for_each(|t| *t = T::zero());
        let full = vis / 8 * 8;
        for c in 0..full / 8 {
            for l in 0..8 {
                let j = c * 8 + l;
                let sj = s[j];
                let v = &values[j * d + off..j * d + off + dh];
                for e in 0..dh {
                    acc[e][l] += sj * v[e];
                }
            }
        }
        for j in full..vis {
            let v = &values[j * d + off..j * d + off + dh];
            for e in 0..dh {
                tail[e] += s[j] * v[e];
            }
        }
        for e in 0..dh {
            let a = &acc[e];
            out[off + e] = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail[e];
        }
        if !probs.is_empty() {
            probs[h * n_k..h * n_k + vis].copy_from_slice(&s);
        }
    }
}

/// Multi-head scaled dot-product attention over row-major `[rows, d_model]`
/// buffers. Returns the concatenated head outputs `[n_q, d_model]` and the
/// requested probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: &[T],
    n_q: usize,
    keys: &[T],
    values: &[T],
    n_k: usize,
    layout: HeadLayout,
    mask: KeyMask,
    keep: KeepProbs,
) -> (Vec<T>, Vec<T>) {
    let d = layout.d_model();
    let dh = layout.d_head;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); n_q * d];
    let mut probs = match keep {
        KeepProbs::None => Vec::new(),
        KeepProbs::LastRow => vec![T::zero(); layout.n_heads * n_k],
        KeepProbs::All => vec![T::zero(); n_q * layout.n_heads * n_k],
    };
    if n_q == 1 {
        single_query(q, keys, values, n_k, layout, mask.visible(0, n_k), scale, &mut out, &mut probs);
        return (out, probs);
    }
    // Per head, keys and values are transposed to `[d_head, n_k]` so both
    // the score and the weighted-sum loops run over contiguous key indices.
    let mut kt = vec![T::zero(); dh * n_k];
    let mut vt = vec![T::zero(); dh * n_k];
    let mut block = vec![T::zero(); QUERY_BLOCK * n_k];
    for h in 0..layout.n_heads {
        let off = h * dh;
        for j in 0..n_k {
            for e in 0..dh {
                kt[e * n_k + j] = keys[j * d + off + e];
                vt[e * n_k + j] = values[j * d + off + e];
            }
        }
        let mut i0 = 0;
        while i0 < n_q {
            let rows = (n_q - i0).min(QUERY_BLOCK);
            let vis: [usize; QUERY_BLOCK] = std::array::from_fn(|r| if r < rows { mask.visible(i0 + r, n_k) } else { 0 });
            let shared = vis[..rows].iter().copied().min().unwrap_or(0);
            let widest = vis[..rows].iter().copied().max().unwrap_or(0);
            for r in 0..rows {
                block[r * n_k..r * n_k + vis[r]].iter_mut().for_each(|v| *v = T::zero());
            }
            // Scores: the shared key range is updated for all rows per pass
            // over `kt`, the ragged tails row by row. Each element sees the
            // same operations either way.
            for e in 0..dh {
                let k_e = &kt[e * n_k..e * n_k + widest];
                let qe: [T; QUERY_BLOCK] = std::array::from_fn(|r| if r < rows { q[(i0 + r) * d + off + e] } else { T::zero() });
                let (b0, rest) = block.split_at_mut(n_k);
                let (b1, rest) = rest.split_at_mut(n_k);
                let (b2, b3) = rest.split_at_mut(n_k);
                if rows == QUERY_BLOCK {
                    for j in 0..shared {
                        let kj = k_e[j];
                        b0[j] += qe[0] * kj;
                        b1[j] += qe[1] * kj;
                        b2[j] += qe[2] * kj;
                        b3[j] += qe[3] * kj;
                    }
                }
                let from = if rows == QUERY_BLOCK { shared } else { 0 };
                for (r, b) in [b0, b1, b2, b3].into_iter().enumerate().take(rows) {
                    axpy(qe[r], &k_e[from..vis[r]], &mut b[from..vis[r]]);
                }
            }
            for r in 0..rows {
                let s = &mut block[r * n_k..r * n_k + vis[r]];
                s.iter_mut().for_each(|v| *v *= scale);
                softmax_in_place(s);
            }
            for e in 0..dh {
                let v_e = &vt[e * n_k..e * n_k + widest];
                let sums = dot_rows(&block, n_k, &vis[..rows], v_e);
                for r in 0..rows {
                    out[(i0 + r) * d + off + e] = sums[r];
                }
            }
            for r in 0..rows {
                let i = i0 + r;
                let s = &block[r * n_k..r * n_k + vis[r]];
                match keep {
                    KeepProbs::None => {}
                    KeepProbs::LastRow if i + 1 == n_q => {
                        probs[h * n_k..h * n_k + vis[r]].copy_from_slice(s);
                    }
                    KeepProbs::LastRow => {}
                    KeepProbs::All => {
                        let base = (i * layout.n_heads + h) * n_k;
                        probs[base..base + vis[r]].copy_from_slice(s);
                    }
                }
            }
            i0 += rows;
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] given the full probability tensor.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    n_q: usize,
    keys: &[T],
    values: &[T],
    n_k: usize,
    layout: HeadLayout,
    mask: KeyMask,
    probs: &[T],
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = layout.d_model();
    let dh = layout.d_head;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n_q * d];
    let mut dk = vec![T::zero(); n_k * d];
    let mut dv = vec![T::zero(); n_k * d];
    let mut dp = Vec::with_capacity(n_k);
    for i in 0..n_q {
        let vis = mask.visible(i, n_k);
        for h in 0..layout.n_heads {
            let off = h * dh;
            let base = (i * layout.n_heads + h) * n_k;
            let p = &probs[base..base + vis];
            let g = &d_out[i * d + off..i * d + off + dh];
            dp.clear();
            for j in 0..vis {
                dp.push(dot(g, &values[j * d + off..j * d + off + dh]));
                axpy(p[j], g, &mut dv[j * d + off..j * d + off + dh]);
            }
            let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            let q_h = &q[i * d + off..i * d + off + dh];
            for j in 0..vis {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(ds, &keys[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                axpy(ds, q_h, &mut dk[j * d + off..j * d + off + dh]);
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let expect: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expect);
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ as [4,3]
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let c2 = matmul_a_bt(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ as [3,2]; (aᵀ)ᵀ · c = a · c is not square here, so check aᵀ·c shape math.
        let atc = matmul_at_b(&a, &c, 2, 3, 4);
        assert_eq!(atc.len(), 12);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let inv = rope_inv_freq(8, 10_000.0);
        let orig: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut row = orig.clone();
        rope_row(&mut row, 17, 8, &inv, false);
        rope_row(&mut row, 17, 8, &inv, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let inv = rope_inv_freq(4, 10_000.0);
        let mut row = vec![1.0f64, 2.0, 3.0, 4.0];
        rope_row(&mut row, 0, 4, &inv, false);
        assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn causal_mask_visibility() {
        let m = KeyMask::Causal { first_query_pos: 3 };
        assert_eq!(m.visible(0, 10), 4);
        assert_eq!(m.visible(2, 10), 6);
        assert_eq!(m.visible(20, 10), 10);
        assert_eq!(KeyMask::Full.visible(0, 7), 7);
    }
}
