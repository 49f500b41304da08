//! Differentiable forward over a block of new positions that attends to a
//! constant cache prefix. Used for training; frozen weights enter the tape as
//! constants, so gradients flow through the backbone without accumulating on
//! it.

use super::{Backbone, KvCache};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::KeyMask;
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Backbone<T> {
    /// Embedding rows for `tokens` as a `[n, d_model]` tape node.
    pub fn embed_tracked(&self, tape: &mut Tape<T>, tokens: &[u32]) -> Result<Var> {
        let table = tape.param(&self.embed);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        tape.embedding(table, &ids)
    }

    /// Logits `[n, vocab]` for `inputs` (`[n, d_model]` embeddings) placed
    /// right after the positions held in `prefix`.
    pub fn forward_tracked(&self, tape: &mut Tape<T>, prefix: &KvCache<T>, inputs: Var) -> Result<Var> {
        let cfg = self.config();
        let d = cfg.d_model;
        let shape = tape.value(inputs).shape().to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] == 0 {
            return Err(Error::Dimension {
                op: "forward_tracked",
                lhs: shape,
                rhs: vec![d],
            });
        }
        let n = shape[0];
        prefix.ensure_room(n)?;
        self.count_call();
        let start = prefix.len();
        let first = prefix.next_position();
        let positions: Vec<usize> = (first..first + n).collect();
        let layout = cfg.layout();
        let mut x = inputs;
        for (li, layer) in self.layers.iter().enumerate() {
            let attn_norm = tape.param(&layer.attn_norm);
            let wq = tape.param(&layer.wq);
            let wk = tape.param(&layer.wk);
            let wv = tape.param(&layer.wv);
            let wo = tape.param(&layer.wo);
            let h = tape.rms_norm(x, attn_norm, cfg.norm_eps)?;
            let q = tape.matmul(h, wq)?;
            let q = tape.rope(q, &positions, cfg.d_head, cfg.rope_base)?;
            let k = tape.matmul(h, wk)?;
            let k = tape.rope(k, &positions, cfg.d_head, cfg.rope_base)?;
            let v = tape.matmul(h, wv)?;
            let (keys, values) = if start > 0 {
                let kp = tape.constant(Tensor::from_parts(vec![start, d], prefix.keys(li).to_vec()));
                let vp = tape.constant(Tensor::from_parts(vec![start, d], prefix.values(li).to_vec()));
                (tape.concat_rows(&[kp, k])?, tape.concat_rows(&[vp, v])?)
            } else {
                (k, v)
            };
            let a = tape.attention(q, keys, values, layout, KeyMask::Causal { first_query_pos: start })?;
            let o = tape.matmul(a, wo)?;
            x = tape.add(x, o)?;

            let mlp_norm = tape.param(&layer.mlp_norm);
            let w_gate = tape.param(&layer.w_gate);
            let w_up = tape.param(&layer.w_up);
            let w_down = tape.param(&layer.w_down);
            let h = tape.rms_norm(x, mlp_norm, cfg.norm_eps)?;
            let gate = tape.matmul(h, w_gate)?;
            let gate = tape.silu(gate)?;
            let up = tape.matmul(h, w_up)?;
            let act = tape.mul(gate, up)?;
            let down = tape.matmul(act, w_down)?;
            x = tape.add(x, down)?;
        }
        let final_norm = tape.param(&self.final_norm);
        let lm_head = tape.param(&self.lm_head);
        let h = tape.rms_norm(x, final_norm, cfg.norm_eps)?;
        tape.matmul(h, lm_head)
    }
}
