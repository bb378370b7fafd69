use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

/// Mean softmax cross-entropy over a batch of logits `[B,K]` together with
/// its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    logits.expect_rank(2, "logits")?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut grad = vec![T::zero(); b * k];
    let mut loss = T::zero();
    for (row, (&y, g)) in labels.iter().zip(grad.chunks_mut(k)).enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} at index {row} out of range for {k} classes")));
        }
        let z = &logits.data()[row * k..(row + 1) * k];
        g.copy_from_slice(&softmax_slice(z));
        // log-sum-exp form keeps the loss finite for confident logits
        let m = z.iter().fold(z[0], |a, &v| a.max(v));
        let lse = m + z.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
        loss = loss + (lse - z[y]) * inv_b;
        g[y] = g[y] - T::one();
        for v in g.iter_mut() {
            *v = *v * inv_b;
        }
    }
    Ok((loss, Tensor::new(&[b, k], grad)?))
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, r[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
