//! Cache-free causal forward built from dense tensor ops: per-head score
//! matrices with an explicit mask. Serves as the oracle for the incremental
//! path.

use super::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

impl<T: Scalar> Backbone<T> {
    /// Logits `[len, vocab_size]` for every position of `tokens`.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let cfg = self.config();
        let len = tokens.len();
        if len == 0 {
            return Err(Error::contract("forward_full requires at least one token"));
        }
        if len > cfg.max_positions {
            return Err(Error::Capacity {
                requested: len,
                capacity: cfg.max_positions,
            });
        }
        self.count_call();
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let positions: Vec<usize> = (0..len).collect();
        let mut rows = Vec::with_capacity(len * d);
        for &t in tokens {
            rows.extend_from_slice(self.token_embedding(t)?);
        }
        let mut x = Tensor::new(vec![len, d], rows)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let h = tensor::rms_norm_rows(&x, layer.attn_norm.value(), cfg.norm_eps)?;
            let q = tensor::rope_rows(&tensor::matmul(&h, layer.wq.value())?, &positions, dh, cfg.rope_base)?;
            let k = tensor::rope_rows(&tensor::matmul(&h, layer.wk.value())?, &positions, dh, cfg.rope_base)?;
            let v = tensor::matmul(&h, layer.wv.value())?;
            let mut concat = vec![T::zero(); len * d];
            for head in 0..cfg.n_heads {
                let qh = head_columns(&q, head, dh)?;
                let kh = head_columns(&k, head, dh)?;
                let vh = head_columns(&v, head, dh)?;
                let kt = transpose(&kh);
                let scores = tensor::matmul(&qh, &kt)?;
                let mut masked = scores.into_data();
                for i in 0..len {
                    for j in 0..len {
                        let s = &mut masked[i * len + j];
                        *s = if j > i { T::neg_infinity() } else { *s * T::of(scale) };
                    }
                }
                // softmax_rows rejects non-finite inputs, so normalize by hand.
                for row in masked.chunks_exact_mut(len) {
                    crate::tensor::kernels::softmax_in_place(row);
                }
                let probs = Tensor::new(vec![len, len], masked)?;
                let oh = tensor::matmul(&probs, &vh)?;
                for i in 0..len {
                    concat[i * d + head * dh..i * d + (head + 1) * dh].copy_from_slice(oh.row(i));
                }
            }
            let attn = Tensor::new(vec![len, d], concat)?;
            let o = tensor::matmul(&attn, layer.wo.value())?;
            x = add(&x, &o)?;
            let h = tensor::rms_norm_rows(&x, layer.mlp_norm.value(), cfg.norm_eps)?;
            let gate = tensor::silu(&tensor::matmul(&h, layer.w_gate.value())?)?;
            let up = tensor::matmul(&h, layer.w_up.value())?;
            let act = Tensor::new(
                gate.shape().to_vec(),
                gate.data().iter().zip(up.data()).map(|(&a, &b)| a * b).collect(),
            )?;
            let down = tensor::matmul(&act, layer.w_down.value())?;
            x = add(&x, &down)?;
        }
        let h = tensor::rms_norm_rows(&x, self.final_norm.value(), cfg.norm_eps)?;
        tensor::matmul(&h, self.lm_head.value())
    }
}

fn head_columns<T: Scalar>(x: &Tensor<T>, head: usize, dh: usize) -> Result<Tensor<T>> {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[head * dh..(head + 1) * dh]);
    }
    Tensor::new(vec![rows, dh], out)
}

fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}
