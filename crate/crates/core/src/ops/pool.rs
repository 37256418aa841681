use crate::error::{invalid, shape_err, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Max pooling over the last two axes of `(n, c, h, w)`. Padded positions
/// never win; ties go to the lowest linear index inside the window.
/// Returns the pooled tensor and, per output element, the flat input index
/// of its winner.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_rank("max_pool2d", 4)?;
    if kernel == 0 || stride == 0 {
        return Err(invalid("max_pool2d", "kernel and stride must be positive"));
    }
    if padding > kernel / 2 {
        return Err(invalid(
            "max_pool2d",
            format!("padding {padding} exceeds half the kernel {kernel}"),
        ));
    }
    let s = input.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(shape_err(
            "max_pool2d",
            format!("window {kernel} larger than padded input {h}x{w}"),
        ));
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            let y_lo = (oy * stride).saturating_sub(padding);
            let y_hi = (oy * stride + kernel - padding).min(h);
            for ox in 0..wo {
                let x_lo = (ox * stride).saturating_sub(padding);
                let x_hi = (ox * stride + kernel - padding).min(w);
                let mut best = base + y_lo * w + x_lo;
                for iy in y_lo..y_hi {
                    for ix in x_lo..x_hi {
                        let idx = base + iy * w + ix;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[s[0], s[1], ho, wo], out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Mean over every axis after the first two: `(n, c, ...) -> (n, c)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 3 {
        return Err(shape_err(
            "global_avg_pool",
            format!("need at least rank 3, got {:?}", input.shape()),
        ));
    }
    let s = input.shape();
    let inner: usize = s[2..].iter().product();
    let inv = lit::<T>(1.0 / inner as f64);
    let out = input
        .data()
        .chunks(inner)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[s[0], s[1]], out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let inner: usize = input_shape[2..].iter().product();
    let inv = lit::<T>(1.0 / inner as f64);
    let mut data = Vec::with_capacity(inner * grad_out.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, inner));
    }
    Tensor::new(input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_to_lowest_index() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 3.0);
        let (y, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn same_padding_keeps_size_and_constant() {
        let x = Tensor::<f32>::full(&[1, 2, 6, 6], 0.5);
        let (y, _) = max_pool2d(&x, 5, 1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn picks_window_maximum() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 3], vec![1.0, 5.0, 2.0, 4.0, 0.0, 6.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0]);
        assert_eq!(arg, vec![1, 5]);
    }

    #[test]
    fn gap_averages_trailing_axes() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
    }
}
