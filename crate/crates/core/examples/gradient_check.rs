//! Central finite differences against the tape on a tiny attention block.

use flashmem::autodiff::Tape;
use flashmem::tensor::kernels::{HeadLayout, KeyMask};
use flashmem::tensor::Tensor;

fn loss(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> flashmem::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.input(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let layout = HeadLayout { n_heads: 2, d_head: 2 };
    let a = tape.attention(qv, kv, vv, layout, KeyMask::Causal { first_query_pos: 0 })?;
    let s = tape.silu(a)?;
    let l = tape.sum(s)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).data()[0], g.of(qv).expect("q is an input").data().to_vec()))
}

pub fn run_example() -> flashmem::Result<f64> {
    let vals = |seed: usize| (0..12).map(|i| (((i + seed) * 37 % 17) as f64 - 8.0) / 9.0).collect::<Vec<_>>();
    let q = Tensor::new(vec![3, 4], vals(1))?;
    let k = Tensor::new(vec![3, 4], vals(2))?;
    let v = Tensor::new(vec![3, 4], vals(3))?;
    let (_, grad) = loss(&q, &k, &v)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..q.numel() {
        let mut plus = q.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = loss(&Tensor::new(vec![3, 4], plus)?, &k, &v)?.0;
        let fm = loss(&Tensor::new(vec![3, 4], minus)?, &k, &v)?.0;
        let numeric = (fp - fm) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((grad[i] - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

#[allow(dead_code)]
fn main() {
    let worst = run_example().expect("gradient check");
    println!("worst relative error over 12 query entries: {worst:.2e}");
}
