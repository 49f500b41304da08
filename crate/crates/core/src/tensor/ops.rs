use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// `C = A · B` for rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::checked(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n), "matmul")
}

/// Softmax over the last dimension of every row.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = x.cols();
    if cols == 0 || x.shape().is_empty() {
        return Err(Error::Dimension {
            op: "softmax_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(cols) {
        kernels::softmax_in_place(row);
    }
    Tensor::checked(x.shape().to_vec(), data, "softmax_rows")
}

/// Root-mean-square normalization of each row followed by a per-column gain.
pub fn rms_norm_rows<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let cols = x.cols();
    if weight.numel() != cols {
        return Err(Error::Dimension {
            op: "rms_norm_rows",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    for (xr, or) in x.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        kernels::rms_norm_row(xr, weight.data(), T::of(eps), or);
    }
    Tensor::checked(x.shape().to_vec(), out, "rms_norm_rows")
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(kernels::silu)
}

/// Rotary position embedding applied to `[rows, n_heads * d_head]`, row `i`
/// rotated for `positions[i]`.
pub fn rope_rows<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    d_head: usize,
    base: f64,
) -> Result<Tensor<T>> {
    if positions.len() != x.rows() || d_head == 0 || d_head % 2 != 0 || x.cols() % d_head != 0 {
        return Err(Error::Dimension {
            op: "rope_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), d_head],
        });
    }
    let inv = kernels::rope_inv_freq(d_head, base);
    let cols = x.cols();
    let mut data = x.data().to_vec();
    for (row, &pos) in data.chunks_exact_mut(cols).zip(positions) {
        kernels::rope_row(row, pos, d_head, &inv, false);
    }
    Tensor::checked(x.shape().to_vec(), data, "rope_rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]).unwrap();
        let z = matmul(&a, &Tensor::zeros(&[3, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_evaluated() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1., 1.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_worked_values() {
        let x = Tensor::<f64>::from_f64(&[1, 4], &[2.0; 4]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);

        let x = Tensor::<f64>::from_f64(&[1, 1], &[-42.0]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_empty_rows() {
        let x = Tensor::<f64>::new(vec![3, 0], vec![]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, vals in prop::collection::vec(-1e4f64..1e4, 1..40)) {
            let cols = vals.len();
            let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0) * 0.5)).collect();
            let x = Tensor::new(vec![rows, cols], data).unwrap();
            let s = softmax_rows(&x).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
