//! The cyclic rotation group C4, its perturbed relaxation, and the C4
//! actions on images and on group feature maps.
//!
//! Element `i` is a counter-clockwise rotation by `i · 90°`. The same
//! convention is used by the affine matrices (acting on normalized sampling
//! coordinates, x to the right and y downward) and by the array actions, so
//! sampling a filter with the strict matrix of `i` equals [`act_on_input`]
//! with `i`.

use std::fmt;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::ops::shape::{cyclic_shift, rot90};
use crate::tensor::{Scalar, Tensor};

/// Order of the rotation group.
pub const ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct C4(u8);

impl C4 {
    pub const IDENTITY: C4 = C4(0);

    pub fn new(index: usize) -> Result<Self> {
        if index >= ORDER {
            return Err(invalid("C4", format!("element index {index} not in 0..4")));
        }
        Ok(C4(index as u8))
    }

    /// Reduces any integer modulo 4.
    pub fn wrapping(index: isize) -> Self {
        C4(index.rem_euclid(ORDER as isize) as u8)
    }

    pub fn all() -> [C4; ORDER] {
        [C4(0), C4(1), C4(2), C4(3)]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn compose(self, other: C4) -> C4 {
        C4((self.0 + other.0) % ORDER as u8)
    }

    pub fn inverse(self) -> C4 {
        C4((ORDER as u8 - self.0) % ORDER as u8)
    }
}

impl fmt::Display for C4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 2×2 matrix stored row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &o.0;
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn apply(&self, (u, v): (f64, f64)) -> (f64, f64) {
        (
            self.0[0][0] * u + self.0[0][1] * v,
            self.0[1][0] * u + self.0[1][1] * v,
        )
    }

    pub fn flat(&self) -> [f64; 4] {
        [self.0[0][0], self.0[0][1], self.0[1][0], self.0[1][1]]
    }
}

/// Exact rotation matrix of a C4 element, entries in {−1, 0, 1}.
pub fn strict_affine(g: C4) -> Mat2 {
    // (cos, sin) of i·π/2, without trigonometric rounding
    let (c, s) = match g.index() {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        _ => (0.0, -1.0),
    };
    Mat2([[c, -s], [s, c]])
}

/// Learnable `4 × 2 × 2` perturbation of the four strict matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDelta<T: Scalar = f32> {
    values: Tensor<T>,
    sigma: f64,
}

impl<T: Scalar> PerturbationDelta<T> {
    pub const SHAPE: [usize; 3] = [ORDER, 2, 2];

    pub fn zeros() -> Self {
        Self {
            values: Tensor::zeros(&Self::SHAPE),
            sigma: 0.0,
        }
    }

    /// i.i.d. N(0, σ²) entries.
    pub fn sample<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid("PerturbationDelta", format!("sigma {sigma} must be >= 0")));
        }
        Ok(Self {
            values: Tensor::randn(&Self::SHAPE, sigma, rng),
            sigma,
        })
    }

    pub fn from_tensor(values: Tensor<T>, sigma: f64) -> Result<Self> {
        if values.shape() != Self::SHAPE {
            return Err(shape_err(
                "PerturbationDelta",
                format!("expected [4, 2, 2], got {:?}", values.shape()),
            ));
        }
        Ok(Self { values, sigma })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn slice(&self, g: C4) -> Mat2 {
        let d = &self.values.data()[g.index() * 4..g.index() * 4 + 4];
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        Mat2([[f(d[0]), f(d[1])], [f(d[2]), f(d[3])]])
    }
}

/// `strict_affine(g) + Δ_g`, elementwise.
pub fn relaxed_affine<T: Scalar>(g: C4, delta: &PerturbationDelta<T>) -> Mat2 {
    let s = strict_affine(g).0;
    let d = delta.slice(g).0;
    Mat2([
        [s[0][0] + d[0][0], s[0][1] + d[0][1]],
        [s[1][0] + d[1][0], s[1][1] + d[1][1]],
    ])
}

pub fn act_on_coords(m: &Mat2, coords: &[(f64, f64)]) -> Vec<(f64, f64)> {
    coords.iter().map(|&c| m.apply(c)).collect()
}

/// Exact spatial rotation of `(..., h, w)` images by `g · 90°` (requires h == w).
pub fn act_on_input<T: Scalar>(g: C4, x: &Tensor<T>) -> Result<Tensor<T>> {
    rot90(x, g.index())
}

/// Regular-representation action on `(b, c, 4, h, w)`: rotate each slice
/// spatially and roll the group axis by `g`, so output slice `i` is the
/// rotated input slice `i − g`.
pub fn act_on_group_feature<T: Scalar>(g: C4, f: &Tensor<T>) -> Result<Tensor<T>> {
    if f.rank() != 5 || f.shape()[2] != ORDER {
        return Err(shape_err(
            "act_on_group_feature",
            format!("expected (b, c, 4, h, w), got {:?}", f.shape()),
        ));
    }
    let rotated = rot90(f, g.index())?;
    cyclic_shift(&rotated, 2, g.index() as isize)
}

/// How C4 acts on a tensor layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    /// Spatial rotation of the trailing two axes (images, plain feature maps).
    Spatial,
    /// Rotation plus cyclic shift of the group axis of `(b, c, 4, h, w)`.
    Regular,
    /// No action (pooled features, logits).
    Trivial,
}

impl Representation {
    pub fn act<T: Scalar>(self, g: C4, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Representation::Spatial => act_on_input(g, x),
            Representation::Regular => act_on_group_feature(g, x),
            Representation::Trivial => Ok(x.clone()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Spatial => "spatial",
            Representation::Regular => "regular",
            Representation::Trivial => "trivial",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_laws_hold_exhaustively() {
        for a in C4::all() {
            assert_eq!(a.compose(C4::IDENTITY), a);
            assert_eq!(a.compose(a.inverse()), C4::IDENTITY);
            for b in C4::all() {
                assert_eq!(a.compose(b).index(), (a.index() + b.index()) % 4);
                for c in C4::all() {
                    assert_eq!(a.compose(b).compose(c), a.compose(b.compose(c)));
                }
            }
        }
        assert!(C4::new(4).is_err());
    }

    #[test]
    fn strict_matrices() {
        assert_eq!(strict_affine(C4(0)), Mat2([[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(strict_affine(C4(1)), Mat2([[0.0, -1.0], [1.0, 0.0]]));
        assert_eq!(strict_affine(C4(2)), Mat2([[-1.0, 0.0], [0.0, -1.0]]));
    }

    #[test]
    fn strict_matrices_form_a_homomorphism() {
        for a in C4::all() {
            assert_eq!(strict_affine(a).det(), 1.0);
            for b in C4::all() {
                assert_eq!(
                    strict_affine(a).mul(&strict_affine(b)),
                    strict_affine(a.compose(b))
                );
            }
        }
    }

    #[test]
    fn relaxed_adds_delta() {
        let zero = PerturbationDelta::<f64>::zeros();
        for g in C4::all() {
            assert_eq!(relaxed_affine(g, &zero), strict_affine(g));
        }
        let mut d = vec![0.0; 16];
        d[0..4].copy_from_slice(&[0.1, 0.1, 0.1, 0.1]);
        d[4..8].copy_from_slice(&[0.3, -0.2, 0.05, 0.7]);
        let delta = PerturbationDelta::from_tensor(Tensor::<f64>::from_f64(&[4, 2, 2], &d).unwrap(), 0.1)
            .unwrap();
        assert_eq!(relaxed_affine(C4(0), &delta), Mat2([[1.1, 0.1], [0.1, 1.1]]));
        let (a, b, c, dd) = (0.3, -0.2, 0.05, 0.7);
        assert_eq!(
            relaxed_affine(C4(1), &delta),
            Mat2([[a, -1.0 + b], [1.0 + c, dd]])
        );
    }

    #[test]
    fn coordinate_actions() {
        let pts = [(1.0, 0.0), (0.5, -2.0)];
        assert_eq!(act_on_coords(&strict_affine(C4(0)), &pts), pts.to_vec());
        assert_eq!(act_on_coords(&strict_affine(C4(1)), &[(1.0, 0.0)]), vec![(0.0, 1.0)]);
        let m = Mat2([[1.1, 0.1], [0.1, 1.1]]);
        let (u, v) = act_on_coords(&m, &[(1.0, 1.0)])[0];
        assert!((u - 1.2).abs() < 1e-15 && (v - 1.2).abs() < 1e-15);
    }

    #[test]
    fn delta_sampling_rejects_bad_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PerturbationDelta::<f32>::sample(-0.1, &mut rng).is_err());
        assert!(PerturbationDelta::<f32>::sample(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn input_action_rotates_and_composes() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(act_on_input(C4(0), &x).unwrap(), x);
        assert_eq!(act_on_input(C4(2), &x).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        let y = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| i as f32);
        for a in C4::all() {
            for b in C4::all() {
                let lhs = act_on_input(a, &act_on_input(b, &y).unwrap()).unwrap();
                assert_eq!(lhs, act_on_input(a.compose(b), &y).unwrap());
            }
        }
        assert!(act_on_input(C4(1), &Tensor::<f32>::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn group_feature_action_is_regular_representation() {
        let f = Tensor::<f64>::from_fn(&[1, 1, 4, 3, 3], |i| (i * 7 % 11) as f64);
        let g1 = act_on_group_feature(C4(1), &f).unwrap();
        for i in 0..4 {
            let src = (i + 3) % 4;
            let expect = rot90(&f.select0(0).unwrap().select0(0).unwrap().select0(src).unwrap(), 1)
                .unwrap();
            let got = g1.select0(0).unwrap().select0(0).unwrap().select0(i).unwrap();
            assert_eq!(got, expect);
        }
        for a in C4::all() {
            let back = act_on_group_feature(a.inverse(), &act_on_group_feature(a, &f).unwrap())
                .unwrap();
            assert_eq!(back, f);
            for b in C4::all() {
                let lhs = act_on_group_feature(a, &act_on_group_feature(b, &f).unwrap()).unwrap();
                assert_eq!(lhs, act_on_group_feature(a.compose(b), &f).unwrap());
            }
        }
    }
}
