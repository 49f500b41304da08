//! Label construction and masked cross-entropy over `S = [x, M, y]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

/// Labels aligned to `S`. The logits row at position `i` is scored against
/// the label at `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    labels: Vec<i64>,
}

impl LabelSequence {
    /// `IGNORE_INDEX` over the `x_len + k` prompt and memory positions, then `y`.
    pub fn new(x_len: usize, k: usize, y: &[u32]) -> Self {
        let mut labels = vec![IGNORE_INDEX; x_len + k];
        labels.extend(y.iter().map(|&t| t as i64));
        LabelSequence { labels }
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Per logits row `i`, the target at `i + 1` if any.
    pub fn shifted_targets(&self) -> Vec<Option<usize>> {
        (0..self.labels.len())
            .map(|i| match self.labels.get(i + 1) {
                Some(&l) if l != IGNORE_INDEX => Some(l as usize),
                _ => None,
            })
            .collect()
    }
}

/// Sum of `−log p(target)` over rows with a target, and the number of rows.
pub fn masked_loss_sum<T: Scalar>(logits: &Tensor<T>, labels: &LabelSequence) -> Result<(f64, usize)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "masked_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    let mut count = 0;
    for (i, target) in labels.shifted_targets().into_iter().enumerate() {
        let Some(t) = target else { continue };
        if t >= vocab {
            return Err(Error::contract(format!("label {t} outside vocabulary of {vocab}")));
        }
        total += row_nll(logits.row(i), t);
        count += 1;
    }
    Ok((total, count))
}

/// Mean masked cross-entropy; errors when every label is ignored.
pub fn masked_loss<T: Scalar>(logits: &Tensor<T>, labels: &LabelSequence) -> Result<f64> {
    let (total, count) = masked_loss_sum(logits, labels)?;
    if count == 0 {
        return Err(Error::contract("every label is IGNORE_INDEX; nothing to score"));
    }
    Ok(total / count as f64)
}

/// `−log softmax(row)[target]`, computed as the tape's cross-entropy does.
pub(crate) fn row_nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max.as_f64() + row.iter().map(|&v| (v - max).as_f64().exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}
