//! Layout operations: concatenation, slicing, cyclic shifts, axis max,
//! and exact quarter-turn rotation of the trailing spatial axes.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(outer, dim, inner)` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub fn concat<T: Scalar>(items: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    let mut total = 0;
    for t in items {
        let s = t.shape();
        if s.len() != rank
            || s.iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", s, first.shape()),
            ));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in items {
            let d = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * d..(o + 1) * d]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, data)
}

/// Split a concat cotangent back into per-input pieces.
pub fn concat_backward<T: Scalar>(
    grad: &Tensor<T>,
    sizes: &[usize],
    axis: usize,
) -> Result<Vec<Tensor<T>>> {
    let (outer, total, inner) = split_axis(grad.shape(), axis)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &sz in sizes {
        let mut data = Vec::with_capacity(outer * sz * inner);
        for o in 0..outer {
            let start = (o * total + offset) * inner;
            data.extend_from_slice(&grad.data()[start..start + sz * inner]);
        }
        let mut shape = grad.shape().to_vec();
        shape[axis] = sz;
        out.push(Tensor::new(&shape, data)?);
        offset += sz;
    }
    Ok(out)
}

/// Entries `start..start+len` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, dim, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > dim {
        return Err(invalid(
            "narrow",
            format!("range {start}..{} outside axis of length {dim}", start + len),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

pub fn narrow_backward<T: Scalar>(
    grad: &Tensor<T>,
    input_shape: &[usize],
    axis: usize,
    start: usize,
) -> Result<Tensor<T>> {
    let (outer, dim, inner) = split_axis(input_shape, axis)?;
    let len = grad.shape()[axis];
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        let src = o * len * inner;
        d[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Ok(dx)
}

/// Roll along `axis`: output index `i` takes input index `(i − offset) mod n`,
/// so `[a, b, c, d]` shifted by 1 is `[d, a, b, c]`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, axis: usize, offset: isize) -> Result<Tensor<T>> {
    let (outer, dim, inner) = split_axis(x.shape(), axis)?;
    let k = offset.rem_euclid(dim as isize) as usize;
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for i in 0..dim {
            let src = (i + dim - k) % dim;
            let base = (o * dim + src) * inner;
            data.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    Tensor::new(x.shape(), data)
}

/// Maximum along `axis` (axis removed). Ties go to the lowest index.
/// Also returns the flat input index of each winner.
pub fn max_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (outer, dim, inner) = split_axis(x.shape(), axis)?;
    let d = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for j in 0..inner {
            let mut best = o * dim * inner + j;
            for i in 1..dim {
                let idx = (o * dim + i) * inner + j;
                if d[idx] > d[best] {
                    best = idx;
                }
            }
            out.push(d[best]);
            arg.push(best);
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok((Tensor::new(&shape, out)?, arg))
}

/// Counter-clockwise rotation of the two trailing (square) axes by
/// `quarter_turns · 90°`: `out[r][c] = in[c][n−1−r]` per quarter turn.
pub fn rot90<T: Scalar>(x: &Tensor<T>, quarter_turns: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(shape_err(
            "rot90",
            format!("exact rotation needs square trailing axes, got {s:?}"),
        ));
    }
    let n = s[s.len() - 1];
    let k = quarter_turns % 4;
    if k == 0 {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for (pi, plane) in src.chunks(n * n).enumerate() {
        let dst = &mut data[pi * n * n..(pi + 1) * n * n];
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = match k {
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                dst[r * n + c] = plane[sr * n + sc];
            }
        }
    }
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_by_one_rotates_indices() {
        let x = Tensor::<f32>::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = cyclic_shift(&x, 0, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(cyclic_shift(&y, 0, -1).unwrap(), x);
        assert!(matches!(cyclic_shift(&x, 1, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn rot180_reverses() {
        let x = Tensor::<f32>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&x, 2).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rot90(&x, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 2, 3], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        let parts = concat_backward(&c, &[1, 2], 1).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn max_axis_ties_go_low() {
        let x = Tensor::<f32>::new(&[1, 3, 1], vec![2.0, 2.0, 1.0]).unwrap();
        let (m, arg) = max_axis(&x, 1).unwrap();
        assert_eq!(m.data(), &[2.0]);
        assert_eq!(arg, vec![0]);
    }
}
