//! Expansion of an initial filter into its four relaxed rotated copies.
//!
//! For each group element `i` the 2×3 matrix `[A_i + Δ_i | 0]` is repeated
//! once per output channel, turned into a sampling grid over the kernel
//! support, and the initial filter is bilinearly resampled on it. The four
//! results are stacked on a new group axis (axis 1). Filters that already
//! carry an input group axis (pointwise flavor) additionally have that axis
//! rolled by `i`, which makes the `Δ = 0` bank exactly the regular
//! representation group-convolution filter.
//!
//! Everything is recorded on the autodiff tape, so gradients reach both the
//! initial filter and Δ.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::group::{strict_affine, PerturbationDelta, C4, ORDER};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterFlavor {
    /// `(co, ci, k, k) -> (co, 4, ci, k, k)`
    Lifting,
    /// `(co, ci, 4, 1, 1) -> (co, 4, ci, 4, 1, 1)`
    Pointwise,
    /// `(co, 1, 1, k, k) -> (co, 4, 1, 1, k, k)`
    Depthwise,
}

impl FilterFlavor {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterFlavor::Lifting => "lifting",
            FilterFlavor::Pointwise => "pointwise",
            FilterFlavor::Depthwise => "depthwise",
        }
    }

    /// Shape of the initial filter for the given channel counts.
    pub fn init_shape(self, ci: usize, co: usize, k: usize) -> Vec<usize> {
        match self {
            FilterFlavor::Lifting => vec![co, ci, k, k],
            FilterFlavor::Pointwise => vec![co, ci, ORDER, 1, 1],
            FilterFlavor::Depthwise => vec![co, 1, 1, k, k],
        }
    }

    /// Shape of the expanded bank for a given initial-filter shape.
    pub fn bank_shape(self, init: &[usize]) -> Vec<usize> {
        let mut s = init.to_vec();
        s.insert(1, ORDER);
        s
    }

    fn validate(self, init: &[usize]) -> Result<()> {
        let ok = match self {
            FilterFlavor::Lifting => init.len() == 4 && init[2] == init[3],
            FilterFlavor::Pointwise => {
                init.len() == 5 && init[2] == ORDER && init[3] == 1 && init[4] == 1
            }
            FilterFlavor::Depthwise => {
                init.len() == 5 && init[1] == 1 && init[2] == 1 && init[3] == init[4]
            }
        };
        if ok {
            Ok(())
        } else {
            Err(shape_err(
                "build_relaxed_filters",
                format!("initial filter {init:?} does not fit the {self} flavor"),
            ))
        }
    }
}

impl fmt::Display for FilterFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterFlavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lifting" => Ok(FilterFlavor::Lifting),
            "pointwise" => Ok(FilterFlavor::Pointwise),
            "depthwise" => Ok(FilterFlavor::Depthwise),
            other => Err(format!(
                "unknown flavor `{other}` (expected lifting, pointwise or depthwise)"
            )),
        }
    }
}

/// The `(co, 2, 3)` sampling matrices for element `g`: `[A_g + Δ_g | 0]`
/// repeated over output channels.
fn relaxed_theta<T: Scalar>(graph: &mut Graph<T>, delta: Var, g: C4, co: usize) -> Result<Var> {
    let strict = strict_affine(g).flat();
    let base = graph.constant(Tensor::from_f64(&[1, 2, 2], &strict)?);
    let d = graph.narrow(delta, 0, g.index(), 1)?;
    let a = graph.add(base, d)?;
    let zero_col = graph.constant(Tensor::zeros(&[1, 2, 1]));
    let theta = graph.concat(&[a, zero_col], 2)?;
    graph.tile0(theta, co)
}

/// Records the expansion of `k_init` on `graph` and returns the bank.
pub fn build_relaxed_filters<T: Scalar>(
    graph: &mut Graph<T>,
    k_init: Var,
    delta: Var,
    flavor: FilterFlavor,
) -> Result<Var> {
    let init = graph.shape(k_init).to_vec();
    flavor.validate(&init)?;
    if graph.shape(delta) != PerturbationDelta::<T>::SHAPE {
        return Err(shape_err(
            "build_relaxed_filters",
            format!("delta must be [4, 2, 2], got {:?}", graph.shape(delta)),
        ));
    }
    let co = init[0];
    let (images, k) = match flavor {
        FilterFlavor::Lifting => (k_init, init[2]),
        FilterFlavor::Pointwise => (graph.reshape(k_init, &[co, init[1] * ORDER, 1, 1])?, 1),
        FilterFlavor::Depthwise => (graph.reshape(k_init, &[co, 1, init[3], init[4]])?, init[3]),
    };
    let mut slot_shape = init.clone();
    slot_shape.insert(1, 1);
    let mut slices = Vec::with_capacity(ORDER);
    for g in C4::all() {
        let theta = relaxed_theta(graph, delta, g, co)?;
        let grid = graph.affine_grid(theta, k, k)?;
        let sampled = graph.grid_sample(images, grid)?;
        let sampled = match flavor {
            FilterFlavor::Pointwise => {
                let unflat = graph.reshape(sampled, &init)?;
                graph.cyclic_shift(unflat, 2, g.index() as isize)?
            }
            _ => sampled,
        };
        slices.push(graph.reshape(sampled, &slot_shape)?);
    }
    graph.concat(&slices, 1)
}

/// Eager convenience wrapper: expands a concrete filter with a concrete Δ.
pub fn expand_filters<T: Scalar>(
    k_init: &Tensor<T>,
    delta: &PerturbationDelta<T>,
    flavor: FilterFlavor,
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let k = graph.constant(k_init.clone());
    let d = graph.constant(delta.tensor().clone());
    let bank = build_relaxed_filters(&mut graph, k, d, flavor)?;
    Ok(graph.value(bank).clone())
}

/// An initial filter together with its expanded bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T: Scalar = f32> {
    pub k_init: Tensor<T>,
    pub k_rel: Tensor<T>,
    pub kernel_size: usize,
    pub flavor: FilterFlavor,
}

impl<T: Scalar> FilterBank<T> {
    pub fn build(
        k_init: Tensor<T>,
        delta: &PerturbationDelta<T>,
        flavor: FilterFlavor,
    ) -> Result<Self> {
        let k_rel = expand_filters(&k_init, delta, flavor)?;
        let kernel_size = *k_init.shape().last().unwrap_or(&1);
        Ok(Self {
            k_init,
            k_rel,
            kernel_size,
            flavor,
        })
    }
}

/// Largest absolute entrywise difference between two banks.
pub fn strictness_gap<T: Scalar>(relaxed: &Tensor<T>, strict: &Tensor<T>) -> Result<f64> {
    relaxed.max_abs_diff(strict)
}

/// Frobenius distance of each group slice (axis 1) from the matching slice
/// of another bank.
pub fn slice_distances<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<[f64; ORDER]> {
    a.expect_same_shape("slice_distances", b)?;
    if a.rank() < 2 || a.shape()[1] != ORDER {
        return Err(shape_err("slice_distances", "bank needs a group axis at position 1"));
    }
    let inner: usize = a.shape()[2..].iter().product();
    let mut out = [0.0; ORDER];
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let d = (*x - *y).to_f64().unwrap_or(f64::NAN);
        out[(i / inner) % ORDER] += d * d;
    }
    Ok(out.map(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::act_on_input;
    use crate::ops::shape::{cyclic_shift, rot90};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slice(bank: &Tensor<f64>, o: usize, i: usize) -> Tensor<f64> {
        bank.select0(o).unwrap().select0(i).unwrap()
    }

    #[test]
    fn strict_depthwise_slices_are_exact_rotations() {
        let k = Tensor::from_f64(&[1, 1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let bank = expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Depthwise).unwrap();
        assert_eq!(bank.shape(), &[1, 4, 1, 1, 3, 3]);
        let base = slice(&bank, 0, 0);
        for i in 0..4 {
            let expect = act_on_input(C4::new(i).unwrap(), &base).unwrap();
            assert_eq!(slice(&bank, 0, i), expect);
        }
        assert_eq!(
            slice(&bank, 0, 1).data(),
            &[3., 6., 9., 2., 5., 8., 1., 4., 7.]
        );
    }

    #[test]
    fn strict_pointwise_is_group_axis_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::<f64>::randn(&[3, 2, 4, 1, 1], 1.0, &mut rng);
        let bank = expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Pointwise).unwrap();
        assert_eq!(bank.shape(), &[3, 4, 2, 4, 1, 1]);
        for o in 0..3 {
            let init = k.select0(o).unwrap();
            for i in 0..4 {
                let expect = cyclic_shift(&init, 1, i as isize).unwrap();
                assert_eq!(slice(&bank, o, i), expect);
            }
        }
    }

    #[test]
    fn pointwise_ignores_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Tensor::<f64>::randn(&[2, 2, 4, 1, 1], 1.0, &mut rng);
        let d = PerturbationDelta::sample(0.5, &mut rng).unwrap();
        let relaxed = expand_filters(&k, &d, FilterFlavor::Pointwise).unwrap();
        let strict = expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Pointwise).unwrap();
        assert_eq!(strictness_gap(&relaxed, &strict).unwrap(), 0.0);
    }

    #[test]
    fn lifting_strict_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let bank = expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Lifting).unwrap();
        assert_eq!(bank.shape(), &[2, 4, 3, 3, 3]);
        for o in 0..2 {
            for i in 0..4 {
                let expect = rot90(&k.select0(o).unwrap(), i).unwrap();
                assert_eq!(slice(&bank, o, i), expect);
            }
        }
    }

    #[test]
    fn gap_is_max_abs() {
        let a = Tensor::<f64>::zeros(&[2, 4, 1, 1, 3, 3]);
        assert_eq!(strictness_gap(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[17] = 0.25;
        assert_eq!(strictness_gap(&a, &b).unwrap(), 0.25);
        assert!(strictness_gap(&a, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn flavor_mismatch_is_rejected() {
        let k = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        assert!(expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Depthwise).is_err());
        assert!(expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Pointwise).is_err());
    }
}
