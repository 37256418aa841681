//! Per-channel batch normalization over `(batch, channels, ...)`.
//!
//! Statistics for channel `c` pool the batch axis and every trailing axis,
//! so for a group feature map `(b, c, 4, h, w)` the group axis shares one
//! mean/variance and one affine pair per channel.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running estimates kept for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// Exponential update with the batch mean and unbiased batch variance.
    pub fn update(&mut self, batch_mean: &Tensor<T>, batch_var_unbiased: &Tensor<T>) {
        let m = lit::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch_var_unbiased.data()) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Forward results needed by the backward pass and by the running-stat update.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Option<Tensor<T>>,
    pub batch_var_unbiased: Option<Tensor<T>>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(
            "batch_norm",
            format!("need (batch, channels, ...), got {shape:?}"),
        ));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&RunningStats<T>>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (b, c, inner) = layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} must both be [{c}] for input {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ),
        ));
    }
    let xd = x.data();
    let count = b * inner;
    let eps = lit::<T>(BN_EPS);
    let (mean, var, batch_stats) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..b {
                    s += xd[(n * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                }
                let m = s / lit(count as f64);
                let mut v = T::zero();
                for n in 0..b {
                    for &val in &xd[(n * c + ch) * inner..][..inner] {
                        let d = val - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v / lit(count as f64);
            }
            let unbiased_scale = if count > 1 {
                lit::<T>(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            let unbiased: Vec<T> = var.iter().map(|&v| v * unbiased_scale).collect();
            let stats = (Tensor::new(&[c], mean.clone())?, Tensor::new(&[c], unbiased)?);
            (mean, var, Some(stats))
        }
        NormMode::Eval => {
            let rs = running.ok_or(Error::MissingRunningStats)?;
            if rs.mean.shape() != [c] || rs.var.shape() != [c] {
                return Err(shape_err("batch_norm", "running statistics do not match channels"));
            }
            (rs.mean.data().to_vec(), rs.var.data().to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * inner;
            for k in off..off + inner {
                let h = (xd[k] - mean[ch]) * inv_std[ch];
                xhat[k] = h;
                y[k] = gd[ch] * h + bd[ch];
            }
        }
    }
    let (batch_mean, batch_var_unbiased) = match batch_stats {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    Ok((
        Tensor::new(x.shape(), y)?,
        BatchNormSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            batch_mean,
            batch_var_unbiased,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, inner) = layout(grad_out.shape())?;
    let dy = grad_out.data();
    let xh = saved.xhat.data();
    let gd = gamma.data();
    let count = lit::<T>((b * inner) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * inner;
            for k in off..off + inner {
                dgamma[ch] += dy[k] * xh[k];
                dbeta[ch] += dy[k];
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.numel()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * inner;
            let scale = gd[ch] * saved.inv_std[ch];
            for k in off..off + inner {
                dx[k] = match mode {
                    NormMode::Eval => dy[k] * scale,
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    NormMode::Train => {
                        scale * (dy[k] - dbeta[ch] / count - xh[k] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 2, 2], 7.0);
        let gamma = Tensor::full(&[3], 2.0);
        let beta = Tensor::from_f64(&[3], &[0.5, -1.0, 3.0]).unwrap();
        let (y, _) = batch_norm(&x, &gamma, &beta, None, NormMode::Train).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 16) % 3;
            assert_eq!(v, beta.data()[ch]);
        }
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 2, 4, 3, 3], 2.5, &mut rng).map(|v| v + 1.0);
        let (y, _) = batch_norm(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            None,
            NormMode::Train,
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| y.data()[(n * 2 + ch) * 36..][..36].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_without_stats_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let r = batch_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), None, NormMode::Eval);
        assert!(matches!(r, Err(Error::MissingRunningStats)));
    }

    #[test]
    fn rejects_per_group_affine() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 3, 3]);
        let r = batch_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), None, NormMode::Train);
        assert!(r.is_err());
    }
}
