//! Pure forward/backward kernels on [`Tensor`](crate::tensor::Tensor).
//! The autodiff tape in [`crate::autodiff`] records calls into these.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod sample;
pub mod shape;

pub use conv::{conv2d, conv2d_transposed};
pub use norm::{batch_norm, NormMode, RunningStats};
pub use pool::{global_avg_pool, max_pool2d};
pub use sample::{affine_grid, grid_sample};
pub use shape::{concat, cyclic_shift, max_axis, narrow, rot90};

use crate::tensor::{lit, Scalar};

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

/// Mean softmax cross-entropy and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &crate::tensor::Tensor<T>,
    labels: &[usize],
) -> crate::error::Result<(T, Vec<T>)> {
    use crate::error::{shape_err, Error};
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    let mut probs = vec![T::zero(); b * k];
    let mut loss = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        for (p, &v) in probs[n * k..(n + 1) * k].iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
        loss += log_z - row[label];
    }
    Ok((loss / lit(b as f64), probs))
}
