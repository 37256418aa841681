//! Affine sampling grids and bilinear grid sampling.
//!
//! Normalized coordinates are corner aligned: the first and last pixel
//! centres of an axis sit exactly at −1 and +1, and a length-1 axis sits at 0.
//! Under this convention every 90° multiple maps the lattice onto itself,
//! so rotated grids sample pixel centres exactly. Samples falling outside
//! the input contribute zero.

use crate::error::{shape_err, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Normalized coordinate of lattice index `j` on an axis of length `n`.
/// Built as `(2j − (n − 1)) / (n − 1)` so mirrored indices give exactly
/// negated coordinates.
pub fn lattice_coord<T: Scalar>(j: usize, n: usize) -> T {
    if n <= 1 {
        return T::zero();
    }
    let num = 2.0 * j as f64 - (n as f64 - 1.0);
    lit::<T>(num) / lit::<T>(n as f64 - 1.0)
}

/// Normalized coordinate to fractional pixel index. Values within a few ulps
/// of an integer are snapped onto it so lattice-aligned grids sample exactly.
fn unnormalize<T: Scalar>(u: T, n: usize) -> T {
    if n <= 1 {
        return T::zero();
    }
    let half = lit::<T>((n as f64 - 1.0) / 2.0);
    let p = (u + T::one()) * half;
    let r = p.round();
    let tol = T::epsilon() * lit::<T>(16.0 * n as f64);
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

/// `theta (n, 2, 3)` applied to the normalized `h × w` output lattice,
/// giving `(n, h, w, 2)` with `[..., 0] = x` (width) and `[..., 1] = y` (height).
pub fn affine_grid<T: Scalar>(theta: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let n = check_theta(theta)?;
    if h == 0 || w == 0 {
        return Err(shape_err("affine_grid", "output size must be positive"));
    }
    let xs: Vec<T> = (0..w).map(|j| lattice_coord(j, w)).collect();
    let ys: Vec<T> = (0..h).map(|i| lattice_coord(i, h)).collect();
    let th = theta.data();
    let mut out = Vec::with_capacity(n * h * w * 2);
    for b in 0..n {
        let t = &th[b * 6..b * 6 + 6];
        for &y in &ys {
            for &x in &xs {
                out.push(t[0] * x + t[1] * y + t[2]);
                out.push(t[3] * x + t[4] * y + t[5]);
            }
        }
    }
    Tensor::new(&[n, h, w, 2], out)
}

/// Gradient of [`affine_grid`] w.r.t. `theta`.
pub fn affine_grid_backward<T: Scalar>(grad_grid: &Tensor<T>) -> Result<Tensor<T>> {
    grad_grid.expect_rank("affine_grid_backward", 4)?;
    let [n, h, w] = [grad_grid.shape()[0], grad_grid.shape()[1], grad_grid.shape()[2]];
    let xs: Vec<T> = (0..w).map(|j| lattice_coord(j, w)).collect();
    let ys: Vec<T> = (0..h).map(|i| lattice_coord(i, h)).collect();
    let gd = grad_grid.data();
    let mut out = vec![T::zero(); n * 6];
    for b in 0..n {
        let acc = &mut out[b * 6..b * 6 + 6];
        for (i, &y) in ys.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                let base = ((b * h + i) * w + j) * 2;
                let (gx, gy) = (gd[base], gd[base + 1]);
                acc[0] += gx * x;
                acc[1] += gx * y;
                acc[2] += gx;
                acc[3] += gy * x;
                acc[4] += gy * y;
                acc[5] += gy;
            }
        }
    }
    Tensor::new(&[n, 2, 3], out)
}

fn check_theta<T: Scalar>(theta: &Tensor<T>) -> Result<usize> {
    let s = theta.shape();
    if s.len() != 3 || s[1] != 2 || s[2] != 3 {
        return Err(shape_err(
            "affine_grid",
            format!("theta must be (n, 2, 3), got {s:?}"),
        ));
    }
    Ok(s[0])
}

fn check_sample<T: Scalar>(input: &Tensor<T>, grid: &Tensor<T>) -> Result<[usize; 6]> {
    let (i, g) = (input.shape(), grid.shape());
    if i.len() != 4 || g.len() != 4 || g[3] != 2 || g[0] != i[0] {
        return Err(shape_err(
            "grid_sample",
            format!("input {i:?} and grid {g:?} are incompatible"),
        ));
    }
    if !grid.is_finite() {
        return Err(crate::error::Error::NonFinite("grid_sample grid"));
    }
    Ok([i[0], i[1], i[2], i[3], g[1], g[2]])
}

/// One bilinear tap: the four corner offsets and weights, with the corners
/// outside the input masked out.
struct Tap<T> {
    x0: isize,
    y0: isize,
    wx1: T,
    wy1: T,
}

impl<T: Scalar> Tap<T> {
    fn new(gx: T, gy: T, hi: usize, wi: usize) -> Self {
        let ix = unnormalize(gx, wi);
        let iy = unnormalize(gy, hi);
        let fx = ix.floor();
        let fy = iy.floor();
        Self {
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            wx1: ix - fx,
            wy1: iy - fy,
        }
    }

    /// (flat index, weight, dweight/dix, dweight/diy) for each in-range corner.
    fn corners(&self, hi: usize, wi: usize) -> impl Iterator<Item = (usize, T, T, T)> + '_ {
        let one = T::one();
        let (wx0, wy0) = (one - self.wx1, one - self.wy1);
        let cs = [
            (0isize, 0isize, wx0 * wy0, -wy0, -wx0),
            (1, 0, self.wx1 * wy0, wy0, -self.wx1),
            (0, 1, wx0 * self.wy1, -self.wy1, wx0),
            (1, 1, self.wx1 * self.wy1, self.wy1, self.wx1),
        ];
        cs.into_iter().filter_map(move |(dx, dy, wgt, dwx, dwy)| {
            let x = self.x0 + dx;
            let y = self.y0 + dy;
            if x < 0 || y < 0 || x >= wi as isize || y >= hi as isize {
                None
            } else {
                Some((y as usize * wi + x as usize, wgt, dwx, dwy))
            }
        })
    }
}

fn scale_factor<T: Scalar>(n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        lit((n as f64 - 1.0) / 2.0)
    }
}

/// Bilinear sampling of `input (n, c, hi, wi)` at `grid (n, ho, wo, 2)`.
pub fn grid_sample<T: Scalar>(input: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, hi, wi, ho, wo] = check_sample(input, grid)?;
    let inp = input.data();
    let gd = grid.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let gbase = (b * ho * wo + p) * 2;
            let tap = Tap::new(gd[gbase], gd[gbase + 1], hi, wi);
            let corners: Vec<_> = tap.corners(hi, wi).collect();
            for ch in 0..c {
                let plane = &inp[(b * c + ch) * hi * wi..][..hi * wi];
                let mut acc = T::zero();
                for &(idx, wgt, _, _) in &corners {
                    acc += wgt * plane[idx];
                }
                out[(b * c + ch) * ho * wo + p] = acc;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Gradients of [`grid_sample`] w.r.t. the input and the grid.
pub fn grid_sample_backward<T: Scalar>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_grid: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [n, c, hi, wi, ho, wo] = check_sample(input, grid)?;
    let inp = input.data();
    let gd = grid.data();
    let go = grad_out.data();
    let mut dinp = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut dgrid = need_grid.then(|| vec![T::zero(); grid.numel()]);
    let (sx, sy) = (scale_factor::<T>(wi), scale_factor::<T>(hi));
    for b in 0..n {
        for p in 0..ho * wo {
            let gbase = (b * ho * wo + p) * 2;
            let tap = Tap::new(gd[gbase], gd[gbase + 1], hi, wi);
            let corners: Vec<_> = tap.corners(hi, wi).collect();
            let mut dix = T::zero();
            let mut diy = T::zero();
            for ch in 0..c {
                let plane_off = (b * c + ch) * hi * wi;
                let g = go[(b * c + ch) * ho * wo + p];
                for &(idx, wgt, dwx, dwy) in &corners {
                    if let Some(di) = dinp.as_mut() {
                        di[plane_off + idx] += wgt * g;
                    }
                    let v = inp[plane_off + idx];
                    dix += dwx * v * g;
                    diy += dwy * v * g;
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[gbase] += dix * sx;
                dg[gbase + 1] += diy * sy;
            }
        }
    }
    let dinp = dinp.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    let dgrid = dgrid.map(|d| Tensor::new(grid.shape(), d)).transpose()?;
    Ok((dinp, dgrid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot90_ccw(img: &[f64], n: usize) -> Vec<f64> {
        // out[r][c] = in[c][n-1-r]
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = img[c * n + (n - 1 - r)];
            }
        }
        out
    }

    fn theta(m: [f64; 6]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 2, 3], &m).unwrap()
    }

    #[test]
    fn identity_grid_is_the_lattice() {
        let g = affine_grid(&theta([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), 3, 3).unwrap();
        let xs: Vec<f64> = g.data().chunks(2).map(|p| p[0]).collect();
        assert_eq!(xs, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
        let ys: Vec<f64> = g.data().chunks(2).map(|p| p[1]).collect();
        assert_eq!(ys, vec![-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quarter_turn_grid_stays_on_lattice() {
        let g = affine_grid(&theta([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]), 3, 3).unwrap();
        for &v in g.data() {
            assert!(v == -1.0 || v == 0.0 || v == 1.0);
        }
        // lattice point (x, y) maps to (-y, x)
        let d = g.data();
        assert_eq!((d[0], d[1]), (1.0, -1.0));
    }

    #[test]
    fn perturbed_grid_matches_matrix_product() {
        let m = [1.1, 0.1, 0.0, 0.1, 1.1, 0.0];
        let g = affine_grid(&theta(m), 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (j as f64 - 1.0, i as f64 - 1.0);
                let base = (i * 3 + j) * 2;
                assert!((g.data()[base] - (m[0] * x + m[1] * y)).abs() < 1e-15);
                assert!((g.data()[base + 1] - (m[3] * x + m[4] * y)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_sampling_reproduces_input() {
        let img: Vec<f64> = (0..20).map(|v| v as f64 * 0.37 - 2.0).collect();
        let x = Tensor::from_f64(&[1, 1, 4, 5], &img).unwrap();
        let g = affine_grid(&theta([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), 4, 5).unwrap();
        assert_eq!(grid_sample(&x, &g).unwrap(), x);
    }

    #[test]
    fn quarter_turn_sampling_is_exact_rotation() {
        for n in [2usize, 3, 4, 5, 7, 28] {
            let img: Vec<f64> = (0..n * n).map(|v| (v as f64).sin()).collect();
            let x = Tensor::from_f64(&[1, 1, n, n], &img).unwrap();
            let g = affine_grid(&theta([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]), n, n).unwrap();
            let y = grid_sample(&x, &g).unwrap();
            assert_eq!(y.data(), rot90_ccw(&img, n).as_slice(), "size {n}");
        }
    }

    #[test]
    fn out_of_range_samples_are_zero() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 5.0);
        let g = Tensor::from_f64(&[1, 1, 1, 2], &[2.0, 2.0]).unwrap();
        assert_eq!(grid_sample(&x, &g).unwrap().item(), 0.0);
    }

    #[test]
    fn rejects_non_finite_grid() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let g = Tensor::from_f64(&[1, 1, 1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(grid_sample(&x, &g).is_err());
    }
}
