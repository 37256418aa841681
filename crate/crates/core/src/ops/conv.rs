//! Grouped 2-D cross-correlation and its adjoint, lowered to im2col + gemm.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry shared by a convolution and its transpose. `h`/`w` are the
/// spatial dims of the *convolution* input and `ho`/`wo` of its output;
/// the transposed op maps `ho × wo` back to `h × w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    fn kk(&self) -> usize {
        self.kh * self.kw
    }

    /// Geometry of `conv2d(input, weight)`.
    pub fn for_conv(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        }
        check_hyper("conv2d", stride, groups)?;
        let [batch, c_in, h, w] = [input[0], input[1], input[2], input[3]];
        let [c_out, cig, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(invalid(
                "conv2d",
                format!("groups {groups} must divide channels in={c_in} out={c_out}"),
            ));
        }
        if cig != c_in / groups {
            return Err(shape_err(
                "conv2d",
                format!("weight {weight:?} expects {cig} channels per group, input has {}", c_in / groups),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of `conv2d_transposed(input, weight)`, expressed as the
    /// convolution it is the adjoint of. Weight layout is `(c_in_t, c_out_t/groups, kh, kw)`.
    pub fn for_transposed(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err(
                "conv2d_transposed",
                format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        }
        check_hyper("conv2d_transposed", stride, groups)?;
        let [batch, c_t_in, ho, wo] = [input[0], input[1], input[2], input[3]];
        let [w0, cog_t, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
        if w0 != c_t_in {
            return Err(shape_err(
                "conv2d_transposed",
                format!("weight {weight:?} does not match {c_t_in} input channels"),
            ));
        }
        if c_t_in % groups != 0 {
            return Err(invalid(
                "conv2d_transposed",
                format!("groups {groups} must divide {c_t_in} input channels"),
            ));
        }
        let full_h = (ho - 1) * stride + kh;
        let full_w = (wo - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(shape_err(
                "conv2d_transposed",
                format!("padding {padding} leaves no output for input {ho}x{wo}"),
            ));
        }
        Ok(Self {
            batch,
            c_in: cog_t * groups,
            c_out: c_t_in,
            h: full_h - 2 * padding,
            w: full_w - 2 * padding,
            kh,
            kw,
            stride,
            padding,
            groups,
            ho,
            wo,
        })
    }
}

fn check_hyper(op: &'static str, stride: usize, groups: usize) -> Result<()> {
    if stride == 0 {
        return Err(invalid(op, "stride must be at least 1"));
    }
    if groups == 0 {
        return Err(invalid(op, "groups must be at least 1"));
    }
    Ok(())
}

/// Unfold one group of one image into `(cig·kh·kw, ho·wo)` columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let hw_out = ho * wo;
    let pad = g.padding as isize;
    let stride = g.stride as isize;
    for c in 0..g.cig() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = oy as isize * stride + ky as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image group.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let hw_out = ho * wo;
    let pad = g.padding as isize;
    let stride = g.stride as isize;
    for c in 0..g.cig() {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `conv(input, weight)` writing `(batch, c_out, ho, wo)`.
fn correlate<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], out: &mut [T]) {
    let (cig, cog, kk) = (g.cig(), g.cog(), g.kk());
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); cig * kk * hw_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.c_in + grp * cig) * hw_in..][..cig * hw_in];
            im2col(xs, g, &mut cols);
            let wg = &weight[grp * cog * cig * kk..][..cog * cig * kk];
            let og = &mut out[(b * g.c_out + grp * cog) * hw_out..][..cog * hw_out];
            T::gemm(
                cog,
                cig * kk,
                hw_out,
                T::one(),
                wg,
                cig * kk,
                1,
                &cols,
                hw_out,
                1,
                T::zero(),
                og,
                hw_out,
                1,
            );
        }
    }
}

/// Input-adjoint of the convolution: `(batch, c_out, ho, wo) -> (batch, c_in, h, w)`.
fn correlate_adjoint<T: Scalar>(g: &ConvGeom, dy: &[T], weight: &[T], dx: &mut [T]) {
    let (cig, cog, kk) = (g.cig(), g.cog(), g.kk());
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); cig * kk * hw_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let wg = &weight[grp * cog * cig * kk..][..cog * cig * kk];
            let dyg = &dy[(b * g.c_out + grp * cog) * hw_out..][..cog * hw_out];
            // cols = wgᵀ · dy
            T::gemm(
                cig * kk,
                cog,
                hw_out,
                T::one(),
                wg,
                1,
                cig * kk,
                dyg,
                hw_out,
                1,
                T::zero(),
                &mut cols,
                hw_out,
                1,
            );
            let dxs = &mut dx[(b * g.c_in + grp * cig) * hw_in..][..cig * hw_in];
            col2im(&cols, g, dxs);
        }
    }
}

/// Weight gradient of the convolution given its input `x` and output cotangent `dy`.
fn correlate_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T]) {
    let (cig, cog, kk) = (g.cig(), g.cog(), g.kk());
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); cig * kk * hw_out];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.c_in + grp * cig) * hw_in..][..cig * hw_in];
            im2col(xs, g, &mut cols);
            let dyg = &dy[(b * g.c_out + grp * cog) * hw_out..][..cog * hw_out];
            let dwg = &mut dw[grp * cog * cig * kk..][..cog * cig * kk];
            // dw += dy · colsᵀ
            T::gemm(
                cog,
                hw_out,
                cig * kk,
                T::one(),
                dyg,
                hw_out,
                1,
                &cols,
                1,
                hw_out,
                T::one(),
                dwg,
                cig * kk,
                1,
            );
        }
    }
}

/// Grouped 2-D cross-correlation. `weight` is `(c_out, c_in/groups, kh, kw)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::for_conv(input.shape(), weight.shape(), stride, padding, groups)?;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.ho * g.wo];
    correlate(&g, input.data(), weight.data(), &mut out);
    Tensor::new(&[g.batch, g.c_out, g.ho, g.wo], out)
}

/// Gradients of `conv2d` w.r.t. input and weight.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::for_conv(input.shape(), weight.shape(), stride, padding, groups)?;
    let dx = if need_input {
        let mut dx = vec![T::zero(); input.numel()];
        correlate_adjoint(&g, grad_out.data(), weight.data(), &mut dx);
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    let dw = if need_weight {
        let mut dw = vec![T::zero(); weight.numel()];
        correlate_weight_grad(&g, input.data(), grad_out.data(), &mut dw);
        Some(Tensor::new(weight.shape(), dw)?)
    } else {
        None
    };
    Ok((dx, dw))
}

/// Grouped transposed convolution: the vector-Jacobian product of `conv2d`
/// w.r.t. its input. `weight` is `(c_in, c_out/groups, kh, kw)`; the output is
/// `(h - 1)·stride − 2·padding + k` on each spatial axis.
pub fn conv2d_transposed<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::for_transposed(input.shape(), weight.shape(), stride, padding, groups)?;
    let mut out = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    correlate_adjoint(&g, input.data(), weight.data(), &mut out);
    Tensor::new(&[g.batch, g.c_in, g.h, g.w], out)
}

/// Gradients of `conv2d_transposed` w.r.t. input and weight.
pub fn conv2d_transposed_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::for_transposed(input.shape(), weight.shape(), stride, padding, groups)?;
    let dx = if need_input {
        let mut dx = vec![T::zero(); input.numel()];
        correlate(&g, grad_out.data(), weight.data(), &mut dx);
        Some(Tensor::new(input.shape(), dx)?)
    } else {
        None
    };
    let dw = if need_weight {
        let mut dw = vec![T::zero(); weight.numel()];
        // The transposed op's input plays the role of the conv output cotangent.
        correlate_weight_grad(&g, grad_out.data(), input.data(), &mut dw);
        Some(Tensor::new(weight.shape(), dw)?)
    } else {
        None
    };
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution, independent of the im2col path.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let cog = co / groups;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        let xd = x.data();
        let wdat = w.data();
        let od = out.data_mut();
        for n in 0..b {
            for o in 0..co {
                let grp = o / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cig {
                            let cin = grp * cig + c;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[((n * ci + cin) * h + iy as usize) * wd + ix as usize]
                                        * wdat[((o * cig + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        od[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let _ = ci;
        out
    }

    #[test]
    fn unit_kernel_scales_input() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn grouped_strided_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ci, co, groups, k, stride, pad, h) in &[
            (4, 6, 2, 3, 1, 1, 7),
            (6, 6, 6, 3, 2, 1, 9),
            (3, 4, 1, 2, 2, 0, 6),
            (8, 4, 4, 1, 1, 0, 5),
        ] {
            let x = Tensor::<f64>::randn(&[2, ci, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[co, ci / groups, k, k], 1.0, &mut rng);
            let fast = conv2d(&x, &w, stride, pad, groups).unwrap();
            let slow = naive_conv(&x, &w, stride, pad, groups);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        assert!(conv2d(&x, &w, 1, 1, 2).is_err());
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        assert!(conv2d(&x, &w, 1, 1, 1).is_err());
    }

    #[test]
    fn transposed_stride_two_scatter() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_transposed(&x, &w, 2, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            y.data(),
            &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );
        let id = conv2d_transposed(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(id, x);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ci, co, groups, k, stride, pad, h) in &[
            (2, 3, 1, 3, 1, 1, 5),
            (4, 4, 4, 3, 2, 1, 7),
            (4, 8, 4, 2, 2, 0, 6),
        ] {
            let x = Tensor::<f64>::randn(&[2, ci, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[co, ci / groups, k, k], 1.0, &mut rng);
            let y = conv2d(&x, &w, stride, pad, groups).unwrap();
            let v = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let lhs = y.dot(&v).unwrap();
            let xt = conv2d_transposed(&v, &w, stride, pad, groups).unwrap();
            assert_eq!(xt.shape(), x.shape());
            let rhs = x.dot(&xt).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }
}
