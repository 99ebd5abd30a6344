use super::{Matrix, NnError, Scalar};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>), NnError> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(NnError::shape(
            "loss labels",
            format!("{n} labels"),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::LabelOutOfRange { label: bad, classes: k });
    }
    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut grad = Matrix::zeros(n, k);
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let top = argmax(row);
        let max = row[top];
        let g = &mut grad.data_mut()[r * k..(r + 1) * k];
        // sum of exp(z - max) excluding the max term, which is exactly 1
        let mut rest = T::zero();
        for (j, (gi, &z)) in g.iter_mut().zip(row).enumerate() {
            *gi = (z - max).exp();
            if j != top {
                rest += *gi;
            }
        }
        let sum = T::one() + rest;
        // -log softmax[label] = log(sum) - (z_label - max); log1p keeps
        // saturated (near-zero) losses accurate
        total += rest.ln_1p() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Index of the first maximal element.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise softmax probabilities.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let k = logits.cols();
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
