//! Empirical equivariance error, Lipschitz probing and the two bound checks,
//! all evaluated as maxima over a finite seeded probe set.
//!
//! Maps are passed as closures `Φ: x ↦ y` on single-sample tensors together
//! with the representations acting on their inputs and outputs, so the same
//! code measures layers, truncated networks and whole classifiers.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImageSet;
use crate::error::{invalid, shape_err, Result};
use crate::group::{Representation, C4};
use crate::model::Model;
use crate::params::Forward;
use crate::tensor::{Scalar, Tensor};

/// Floating-point allowance for the self-consistency bound checks.
pub const BOUND_SLACK: f64 = 1e-6;

/// Pairs closer than this are skipped by the Lipschitz probe.
pub const MIN_PAIR_DISTANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet<T: Scalar = f32> {
    pub inputs: Vec<Tensor<T>>,
    pub seed: u64,
}

impl<T: Scalar> ProbeSet<T> {
    pub fn new(inputs: Vec<Tensor<T>>, seed: u64) -> Result<Self> {
        if inputs.is_empty() {
            return Err(invalid("ProbeSet", "needs at least one probe"));
        }
        for x in &inputs {
            let s = x.shape();
            if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(shape_err("ProbeSet", format!("probe {s:?} is not square")));
            }
        }
        Ok(Self { inputs, seed })
    }

    /// `count` unit-Gaussian probes of the given single-sample shape.
    pub fn gaussian(count: usize, shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..count).map(|_| Tensor::randn(shape, 1.0, &mut rng)).collect();
        Self::new(inputs, seed)
    }

    /// `natural` dataset images drawn without replacement plus `gaussian`
    /// unit-Gaussian images of the same shape.
    pub fn mixed(set: &LabeledImageSet, natural: usize, gaussian: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let natural = natural.min(set.len());
        let mut inputs = Vec::with_capacity(natural + gaussian);
        for i in sample(&mut rng, set.len(), natural).into_iter() {
            inputs.push(set.image(i)?.cast());
        }
        let [c, h, w] = set.image_shape();
        for _ in 0..gaussian {
            inputs.push(Tensor::randn(&[1, c, h, w], 1.0, &mut rng));
        }
        Self::new(inputs, seed)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ProbeSet<U> {
        ProbeSet {
            inputs: self.inputs.iter().map(Tensor::cast).collect(),
            seed: self.seed,
        }
    }
}

/// Input and output actions of a measured map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Actions {
    pub input: Representation,
    pub output: Representation,
}

impl Actions {
    pub const INVARIANT: Actions = Actions {
        input: Representation::Spatial,
        output: Representation::Trivial,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EeRecord {
    pub probe: usize,
    pub g: C4,
    /// `‖ρY(g)·Φ(x) − Φ(ρX(g)·x)‖`.
    pub error: f64,
    /// `‖Φ(ρX(g)·x)‖`, for scale.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EeResult {
    pub ee: f64,
    pub records: Vec<EeRecord>,
}

impl EeResult {
    /// Largest error for each group element.
    pub fn per_element(&self) -> [f64; 4] {
        let mut out = [0.0f64; 4];
        for r in &self.records {
            out[r.g.index()] = out[r.g.index()].max(r.error);
        }
        out
    }
}

fn max_nan(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Empirical equivariance error: max over probes and C4 of the L2 gap.
pub fn equivariance_error<T, F>(phi: F, probes: &ProbeSet<T>, actions: Actions) -> Result<EeResult>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut records = Vec::with_capacity(probes.len() * 4);
    let mut ee = 0.0f64;
    for (p, x) in probes.inputs.iter().enumerate() {
        let y = phi(x)?;
        for g in C4::all() {
            let lhs = actions.output.act(g, &y)?;
            let rhs = phi(&actions.input.act(g, x)?)?;
            if lhs.shape() != rhs.shape() {
                return Err(shape_err(
                    "equivariance_error",
                    format!("ρY(g)Φ(x) {:?} vs Φ(ρX(g)x) {:?}", lhs.shape(), rhs.shape()),
                ));
            }
            let error = lhs.l2_distance(&rhs)?;
            ee = max_nan(ee, error);
            records.push(EeRecord {
                probe: p,
                g,
                error,
                norm: rhs.l2_norm(),
            });
        }
    }
    Ok(EeResult { ee, records })
}

/// Largest `‖Φ(x) − Φ(y)‖ / ‖x − y‖` over `num_pairs` random probe pairs
/// (every pair when `num_pairs` covers them all).
pub fn lipschitz_probe<T, F>(phi: F, probes: &ProbeSet<T>, num_pairs: usize, seed: u64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let n = probes.len();
    if n < 2 {
        return Err(invalid("lipschitz_probe", "needs at least two probes"));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if num_pairs >= total {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..num_pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let outs = probes.inputs.iter().map(&phi).collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for (i, j) in pairs {
        if let Some(r) = ratio(&probes.inputs[i], &probes.inputs[j], &outs[i], &outs[j])? {
            best = Some(max_nan(best.unwrap_or(0.0), r));
        }
    }
    best.ok_or_else(|| invalid("lipschitz_probe", "every sampled pair is degenerate"))
}

fn ratio<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, fx: &Tensor<T>, fy: &Tensor<T>) -> Result<Option<f64>> {
    let d = x.l2_distance(y)?;
    if d < MIN_PAIR_DISTANCE {
        return Ok(None);
    }
    Ok(Some(fx.l2_distance(fy)? / d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    pub holds: bool,
    /// Smallest `rhs − lhs` seen; negative means violated.
    pub slack: f64,
}

impl BoundCheck {
    fn new(name: &str, slack: f64) -> Self {
        Self {
            name: name.to_string(),
            holds: slack >= -BOUND_SLACK,
            slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1 {
    pub check: BoundCheck,
    pub k_hat: f64,
    pub ee_hat: f64,
}

/// `‖ρY(g)Φ(x) − Φ(x)‖ ≤ k̂·‖ρX(g)x − x‖ + EÊ` for every probe and `g`, with
/// `k̂` the Lipschitz estimate over all probe pairs and all `(x, g·x)` pairs
/// and `EÊ` the empirical EE on the same probes.
pub fn prop1_check<T, F>(phi: F, probes: &ProbeSet<T>, actions: Actions) -> Result<Prop1>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let ee_hat = equivariance_error(&phi, probes, actions)?.ee;
    let mut k_hat = if probes.len() >= 2 {
        lipschitz_probe(&phi, probes, usize::MAX, probes.seed).unwrap_or(0.0)
    } else {
        0.0
    };
    let mut orbit = Vec::with_capacity(probes.len());
    for x in &probes.inputs {
        let fx = phi(x)?;
        for g in C4::all() {
            let gx = actions.input.act(g, x)?;
            let fgx = phi(&gx)?;
            if let Some(r) = ratio(x, &gx, &fx, &fgx)? {
                k_hat = max_nan(k_hat, r);
            }
            orbit.push((actions.output.act(g, &fx)?.l2_distance(&fx)?, gx.l2_distance(x)?));
        }
    }
    let mut slack = f64::INFINITY;
    for (lhs, dx) in orbit {
        slack = slack.min(k_hat * dx + ee_hat - lhs);
    }
    Ok(Prop1 {
        check: BoundCheck::new("prop1", slack),
        k_hat,
        ee_hat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2 {
    pub check: BoundCheck,
    pub c_hat: f64,
    pub ee_a: f64,
    pub ee_b: f64,
}

/// `|EE(Φ_A) − EE(Φ_B)| ≤ 2ĉ + EE(Φ_A)` with `ĉ` the largest output gap
/// between the two maps over the probes and their C4 images.
pub fn prop2_check<T, A, B>(phi_a: A, phi_b: B, probes: &ProbeSet<T>, actions: Actions) -> Result<Prop2>
where
    T: Scalar,
    A: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    B: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let ee_a = equivariance_error(&phi_a, probes, actions)?.ee;
    let ee_b = equivariance_error(&phi_b, probes, actions)?.ee;
    let mut c_hat = 0.0f64;
    for x in &probes.inputs {
        for g in C4::all() {
            let gx = actions.input.act(g, x)?;
            let (ya, yb) = (phi_a(&gx)?, phi_b(&gx)?);
            if ya.shape() != yb.shape() {
                return Err(shape_err(
                    "prop2_check",
                    format!("outputs {:?} vs {:?}", ya.shape(), yb.shape()),
                ));
            }
            c_hat = max_nan(c_hat, ya.l2_distance(&yb)?);
        }
    }
    let slack = 2.0 * c_hat + ee_a - (ee_a - ee_b).abs();
    Ok(Prop2 {
        check: BoundCheck::new("prop2", slack),
        c_hat,
        ee_a,
        ee_b,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub ee: f64,
    /// Relaxation budget ε the model was configured with (its σ).
    pub epsilon: f64,
    pub lipschitz_k: f64,
    pub sup_distance_c: f64,
    pub bound_checks: Vec<BoundCheck>,
}

impl EquivarianceReport {
    /// EE, k̂ and the first bound for `phi`; adds the second bound (and ĉ)
    /// when a comparison map is supplied.
    pub fn compute<T, F, G>(
        phi: F,
        other: Option<G>,
        probes: &ProbeSet<T>,
        actions: Actions,
        epsilon: f64,
    ) -> Result<Self>
    where
        T: Scalar,
        F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
        G: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    {
        let p1 = prop1_check(&phi, probes, actions)?;
        let mut bound_checks = vec![p1.check];
        let mut c = 0.0;
        if let Some(b) = other {
            let p2 = prop2_check(&phi, b, probes, actions)?;
            c = p2.c_hat;
            bound_checks.push(p2.check);
        }
        Ok(Self {
            ee: p1.ee_hat,
            epsilon,
            lipschitz_k: p1.k_hat,
            sup_distance_c: c,
            bound_checks,
        })
    }

    pub fn all_hold(&self) -> bool {
        self.bound_checks.iter().all(|b| b.holds)
    }
}

impl fmt::Display for EquivarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ee={:e} epsilon={} k_hat={:e} c_hat={:e}",
            self.ee, self.epsilon, self.lipschitz_k, self.sup_distance_c
        )?;
        for b in &self.bound_checks {
            write!(f, " {}={} {}_slack={:e}", b.name, if b.holds { "holds" } else { "violated" }, b.name, b.slack)?;
        }
        Ok(())
    }
}

/// Inference-mode map from model input to the output of the named
/// intermediate layer (see [`crate::model::Tap`]); `"head"` gives logits.
pub fn model_tap<'m, T: Scalar>(
    model: &'m Model<T>,
    tap: &'m str,
) -> impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'm {
    move |x: &Tensor<T>| {
        let mut fw = Forward::eval(&model.params);
        let xv = fw.graph.constant(x.clone());
        let (_, taps) = model.net.forward_traced(&mut fw, xv)?;
        let t = taps
            .iter()
            .find(|t| t.name == tap)
            .ok_or_else(|| invalid("model_tap", format!("no layer named `{tap}`")))?;
        Ok(fw.graph.value(t.var).clone())
    }
}

/// Names and output actions of every traceable layer of a model.
pub fn model_taps<T: Scalar>(model: &Model<T>) -> Result<Vec<(String, Representation)>> {
    let s = model.spec();
    let x = Tensor::<T>::zeros(&[1, s.in_channels, s.input_size, s.input_size]);
    let mut fw = Forward::eval(&model.params);
    let xv = fw.graph.constant(x);
    let (_, taps) = model.net.forward_traced(&mut fw, xv)?;
    Ok(taps.into_iter().map(|t| (t.name, t.rep)).collect())
}

/// Largest entrywise gap `‖ρY(g)·Φ(x) − Φ(ρX(g)·x)‖∞` over probes and C4.
pub fn max_abs_equivariance_error<T, F>(phi: F, probes: &ProbeSet<T>, actions: Actions) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut worst = 0.0f64;
    for x in &probes.inputs {
        let y = phi(x)?;
        for g in C4::all() {
            let lhs = actions.output.act(g, &y)?;
            let rhs = phi(&actions.input.act(g, x)?)?;
            worst = max_nan(worst, lhs.max_abs_diff(&rhs)?);
        }
    }
    Ok(worst)
}

/// Layer kinds covered by [`strict_layer_suite`], in report order.
pub const LAYER_SUITE: [&str; 10] = [
    "r2_lifting",
    "r2_pgconv",
    "r2_dgconv",
    "r2_gconv",
    "gcba",
    "r2net_block",
    "gsppf",
    "gconcat",
    "r2gup",
    "transfer_block",
];

/// Builds one strict instance of every layer kind and returns its max-abs
/// equivariance error over `probes` Gaussian inputs of spatial size 9.
pub fn strict_layer_suite<T: Scalar>(probes: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    layer_suite::<T>(crate::layers::Mode::Strict, 0.0, 1.0, probes, seed)
}

/// Like [`strict_layer_suite`] for any mode, with every Δ drawn at `sigma`
/// and then multiplied by `delta_scale`. The same seed gives the same
/// filters and Δ direction for every scale.
pub fn layer_suite<T: Scalar>(
    mode: crate::layers::Mode,
    sigma: f64,
    delta_scale: f64,
    probes: usize,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    use crate::layers::*;
    let mut store = crate::params::ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng, mode, sigma);
    let lift = R2Lifting::new(&mut b.scope("lift"), 2, 4, 3, 1)?;
    let pg = R2PGConv::new(&mut b.scope("pg"), 4, 6)?;
    let dg = R2DGConv::new(&mut b.scope("dg"), 4, 3, 2)?;
    let gc = R2GConv::new(&mut b.scope("gc"), 4, 6, 3, 2)?;
    let gcba = Gcba::new(&mut b.scope("gcba"), 4, 4, 3, 1)?;
    let block = R2NetBlock::new(&mut b.scope("block"), 4, 4, 3, 1)?;
    let sppf = Gsppf::new(&mut b.scope("sppf"), 4, 4, 5)?;
    let up = R2GUp::new(&mut b.scope("up"), 4, 2)?;
    let transfer = TransferBlock::new(&mut b.scope("transfer"), 4, 3)?;
    let deltas: Vec<_> = store.ids().filter(|&id| store.entry(id).name.ends_with(".delta")).collect();
    for id in deltas {
        let v = store.get(id).scale(T::from_f64_lossy(delta_scale));
        *store.get_mut(id) = v;
    }
    let spatial = ProbeSet::<T>::gaussian(probes, &[1, 2, 9, 9], seed ^ 1)?;
    let group = ProbeSet::<T>::gaussian(probes, &[1, 4, 4, 9, 9], seed ^ 2)?;
    let store = &store;
    fn run<T: Scalar, L: Layer>(l: &L, s: &crate::params::ParamStore<T>, p: &ProbeSet<T>) -> Result<f64> {
        let actions = Actions {
            input: l.input_rep(),
            output: l.output_rep(),
        };
        max_abs_equivariance_error(|x: &Tensor<T>| eval_layer(l, s, x), p, actions)
    }
    let concat = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut fw = Forward::eval(store);
        let xv = fw.graph.constant(x.clone());
        let y = gcba.forward(&mut fw, xv)?;
        let z = gconcat(&mut fw, &[xv, y])?;
        Ok(fw.graph.value(z).clone())
    };
    let regular = Actions {
        input: Representation::Regular,
        output: Representation::Regular,
    };
    Ok(vec![
        ("r2_lifting", run(&lift, store, &spatial)?),
        ("r2_pgconv", run(&pg, store, &group)?),
        ("r2_dgconv", run(&dg, store, &group)?),
        ("r2_gconv", run(&gc, store, &group)?),
        ("gcba", run(&gcba, store, &group)?),
        ("r2net_block", run(&block, store, &group)?),
        ("gsppf", run(&sppf, store, &group)?),
        ("gconcat", max_abs_equivariance_error(concat, &group, regular)?),
        ("r2gup", run(&up, store, &group)?),
        ("transfer_block", run(&transfer, store, &group)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::model::ModelSpec;

    fn probes() -> ProbeSet<f64> {
        ProbeSet::gaussian(6, &[1, 1, 5, 5], 3).unwrap()
    }

    const SPATIAL: Actions = Actions {
        input: Representation::Spatial,
        output: Representation::Spatial,
    };

    #[test]
    fn identity_has_zero_ee() {
        let r = equivariance_error(|x: &Tensor<f64>| Ok(x.clone()), &probes(), SPATIAL).unwrap();
        assert_eq!(r.ee, 0.0);
        assert_eq!(r.records.len(), 24);
    }

    #[test]
    fn non_equivariant_map_has_positive_ee() {
        let shift = |x: &Tensor<f64>| {
            let mut y = x.clone();
            y.data_mut().rotate_left(1);
            Ok(y)
        };
        let r = equivariance_error(shift, &probes(), SPATIAL).unwrap();
        assert!(r.ee > 0.1);
        assert_eq!(r.per_element()[0], 0.0);
    }

    #[test]
    fn lipschitz_of_linear_and_constant_maps() {
        let k = lipschitz_probe(|x: &Tensor<f64>| Ok(x.scale(2.0)), &probes(), 100, 0).unwrap();
        assert!((k - 2.0).abs() < 1e-6);
        let k = lipschitz_probe(|_: &Tensor<f64>| Ok(Tensor::zeros(&[3])), &probes(), 5, 0).unwrap();
        assert_eq!(k, 0.0);
        let one = ProbeSet::new(vec![Tensor::<f64>::zeros(&[1, 2, 2])], 0).unwrap();
        assert!(lipschitz_probe(|x: &Tensor<f64>| Ok(x.clone()), &one, 5, 0).is_err());
    }

    #[test]
    fn probe_order_does_not_change_ee() {
        let m = Model::<f32>::build(&ModelSpec::toy(&[4, 8, 8, 8], Mode::Relaxed, 0.2, 3), 0).unwrap();
        let p = ProbeSet::gaussian(4, &[1, 1, 28, 28], 8).unwrap();
        let mut rev = p.clone();
        rev.inputs.reverse();
        let phi = model_tap(&m, "head");
        let a = equivariance_error(&phi, &p, Actions::INVARIANT).unwrap().ee;
        let b = equivariance_error(&phi, &rev, Actions::INVARIANT).unwrap().ee;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn bounds_hold_for_a_relaxed_model() {
        let m = Model::<f32>::build(&ModelSpec::toy(&[4, 8, 8, 8], Mode::Relaxed, 0.1, 3), 1).unwrap();
        let mut other = m.clone();
        other.scale_deltas(0.5);
        let p = ProbeSet::gaussian(3, &[1, 1, 28, 28], 2).unwrap();
        let r = EquivarianceReport::compute(model_tap(&m, "head"), Some(model_tap(&other, "head")), &p, Actions::INVARIANT, 0.1)
            .unwrap();
        assert!(r.all_hold(), "{r}");
        assert!(r.ee > 0.0 && r.sup_distance_c > 0.0);
    }

    #[test]
    fn strict_suite_is_exact_in_f64() {
        let r = strict_layer_suite::<f64>(2, 4).unwrap();
        assert_eq!(r.len(), LAYER_SUITE.len());
        for ((name, err), want) in r.iter().zip(LAYER_SUITE) {
            assert_eq!(*name, want);
            assert!(*err <= 1e-10, "{name}: {err}");
        }
    }

    #[test]
    fn taps_cover_the_network() {
        let m = Model::<f32>::build(&ModelSpec::toy(&[4, 8, 8, 8], Mode::Strict, 0.0, 3), 1).unwrap();
        let names: Vec<String> = model_taps(&m).unwrap().into_iter().map(|t| t.0).collect();
        assert_eq!(names.first().map(String::as_str), Some("resize"));
        assert_eq!(names.last().map(String::as_str), Some("head"));
        assert_eq!(names.len(), 13);
    }
}
