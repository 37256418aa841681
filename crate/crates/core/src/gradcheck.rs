//! Central finite-difference checks of reverse-mode gradients in f64.
//!
//! Each primitive is wrapped as `L = Σ R ⊙ op(inputs)` with a fixed random
//! `R`, and analytic `∂L/∂input` is compared with `(L(x+h) − L(x−h)) / 2h` on
//! sampled entries. Inputs to non-smooth ops (max, pooling, bilinear
//! sampling) are drawn away from their kinks.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::filters::{build_relaxed_filters, FilterFlavor};
use crate::layers::Mode;
use crate::model::{Model, ModelSpec};
use crate::ops::norm::{NormMode, RunningStats};
use crate::params::{Forward, ParamKind};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
/// Tolerance for primitives and filter expansion.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for whole-model spot checks.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Entries checked per input per trial.
const ENTRIES_PER_INPUT: usize = 12;

/// Every primitive accepted by [`check_op`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "add_channel_bias",
    "conv2d",
    "conv2d_strided",
    "conv2d_grouped",
    "conv2d_transposed",
    "affine_grid",
    "grid_sample",
    "max_pool2d",
    "global_avg_pool",
    "concat",
    "reshape",
    "narrow",
    "tile0",
    "cyclic_shift",
    "max_axis",
    "rot90",
    "matmul",
    "softmax_cross_entropy",
    "batch_norm_train",
    "batch_norm_eval",
    "sum",
    "build_filters_lifting",
    "build_filters_pointwise",
    "build_filters_depthwise",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheck {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_error: 0.0,
            tolerance,
            worst: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    fn observe(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if !(err <= self.max_rel_error) || self.worst.is_none() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err.max(self.max_rel_error) };
            self.worst = Some(Mismatch {
                input: input.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck name={} checked={} max_rel_error={:e} tolerance={:e} result={}",
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst_input={} worst_index={} analytic={:e} numeric={:e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Checks `op` at `inputs`; `names` label the inputs in reports.
pub fn check_fn(
    name: &str,
    names: &[&str],
    inputs: &[Tensor<f64>],
    op: &OpFn,
    rng: &mut ChaCha8Rng,
    tolerance: f64,
) -> Result<GradCheck> {
    let weights = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vs)?;
        let shape = g.shape(out).to_vec();
        Tensor::<f64>::randn(&shape, 1.0, rng)
    };
    let loss_of = |xs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = op(&mut g, &vs)?;
        let r = g.constant(weights.clone());
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod);
        let lv = g.value(loss).item();
        if !track {
            return Ok((lv, Vec::new()));
        }
        g.backward(loss)?;
        Ok((lv, vs.iter().map(|&v| g.grad(v).cloned()).collect()))
    };
    let (_, grads) = loss_of(inputs, true)?;
    let mut report = GradCheck::new(name, tolerance);
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks = sample(rng, n, n.min(ENTRIES_PER_INPUT)).into_vec();
        for idx in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[idx] -= FD_STEP;
            let numeric = (loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * FD_STEP);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[idx]);
            report.observe(names.get(i).copied().unwrap_or("input"), idx, analytic, numeric);
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Shuffled values spaced 0.05 apart, so no max ever sits near a tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape matches")
}

/// Normalized sampling coordinates whose pixel positions stay at least
/// 0.05 away from every lattice line.
fn smooth_grid(shape: &[usize], in_size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let half = (in_size as f64 - 1.0) / 2.0;
    Tensor::from_fn(shape, |_| loop {
        let u: f64 = rng.random_range(-1.2..1.2);
        let p = (u + 1.0) * half;
        if (p - p.round()).abs() > 0.05 {
            break u;
        }
    })
}

fn delta(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[4, 2, 2], |_| {
        let z: f64 = StandardNormal.sample(rng);
        0.2 * z
    })
}

/// Runs `trials` randomized checks of one primitive.
pub fn check_op(name: &str, trials: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::new(name, OP_TOLERANCE);
    for _ in 0..trials.max(1) {
        let r = &mut rng;
        let (names, inputs, op): (Vec<&str>, Vec<Tensor<f64>>, Box<OpFn>) = match name {
            "add" => (vec!["a", "b"], vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], Box::new(|g, v| g.add(v[0], v[1]))),
            "sub" => (vec!["a", "b"], vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], Box::new(|g, v| g.sub(v[0], v[1]))),
            "mul" => (vec!["a", "b"], vec![randn(&[2, 3, 4], r), randn(&[2, 3, 4], r)], Box::new(|g, v| g.mul(v[0], v[1]))),
            "scale" => (vec!["x"], vec![randn(&[3, 5], r)], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
            "silu" => (vec!["x"], vec![randn(&[4, 6], r)], Box::new(|g, v| Ok(g.silu(v[0])))),
            "add_channel_bias" => (
                vec!["x", "bias"],
                vec![randn(&[2, 3, 2, 4, 4], r), randn(&[3], r)],
                Box::new(|g, v| g.add_channel_bias(v[0], v[1])),
            ),
            "conv2d" => (
                vec!["x", "w"],
                vec![randn(&[2, 3, 6, 6], r), randn(&[4, 3, 3, 3], r)],
                Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1, 1)),
            ),
            "conv2d_strided" => (
                vec!["x", "w"],
                vec![randn(&[1, 2, 7, 7], r), randn(&[3, 2, 3, 3], r)],
                Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1, 1)),
            ),
            "conv2d_grouped" => (
                vec!["x", "w"],
                vec![randn(&[2, 4, 5, 5], r), randn(&[4, 1, 3, 3], r)],
                Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1, 4)),
            ),
            "conv2d_transposed" => (
                vec!["x", "w"],
                vec![randn(&[1, 4, 3, 3], r), randn(&[4, 1, 2, 2], r)],
                Box::new(|g, v| g.conv2d_transposed(v[0], v[1], 2, 0, 4)),
            ),
            "affine_grid" => (vec!["theta"], vec![randn(&[2, 2, 3], r)], Box::new(|g, v| g.affine_grid(v[0], 3, 4))),
            "grid_sample" => (
                vec!["input", "grid"],
                vec![randn(&[1, 2, 4, 4], r), smooth_grid(&[1, 3, 3, 2], 4, r)],
                Box::new(|g, v| g.grid_sample(v[0], v[1])),
            ),
            "max_pool2d" => (vec!["x"], vec![distinct(&[1, 2, 5, 5], r)], Box::new(|g, v| g.max_pool2d(v[0], 3, 1, 1))),
            "global_avg_pool" => (vec!["x"], vec![randn(&[2, 3, 4, 4], r)], Box::new(|g, v| g.global_avg_pool(v[0]))),
            "concat" => (
                vec!["a", "b"],
                vec![randn(&[2, 3, 4], r), randn(&[2, 1, 4], r)],
                Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            ),
            "reshape" => (vec!["x"], vec![randn(&[2, 3, 4], r)], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
            "narrow" => (vec!["x"], vec![randn(&[2, 4, 3], r)], Box::new(|g, v| g.narrow(v[0], 1, 1, 2))),
            "tile0" => (vec!["x"], vec![randn(&[1, 2, 3], r)], Box::new(|g, v| g.tile0(v[0], 3))),
            "cyclic_shift" => (vec!["x"], vec![randn(&[2, 4, 3], r)], Box::new(|g, v| g.cyclic_shift(v[0], 1, -3))),
            "max_axis" => (vec!["x"], vec![distinct(&[2, 3, 4, 3, 3], r)], Box::new(|g, v| g.max_axis(v[0], 2))),
            "rot90" => (vec!["x"], vec![randn(&[1, 2, 4, 4], r)], Box::new(|g, v| g.rot90(v[0], 3))),
            "matmul" => (vec!["a", "b"], vec![randn(&[3, 4], r), randn(&[4, 5], r)], Box::new(|g, v| g.matmul(v[0], v[1]))),
            "softmax_cross_entropy" => {
                let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
                (
                    vec!["logits"],
                    vec![randn(&[4, 5], r)],
                    Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
                )
            }
            "batch_norm_train" => (
                vec!["x", "gamma", "beta"],
                vec![randn(&[3, 2, 4, 3, 3], r), randn(&[2], r), randn(&[2], r)],
                Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, NormMode::Train)?.0)),
            ),
            "batch_norm_eval" => {
                let stats = RunningStats {
                    mean: randn(&[2], r),
                    var: Tensor::from_fn(&[2], |_| r.random_range(0.5..2.0)),
                };
                (
                    vec!["x", "gamma", "beta"],
                    vec![randn(&[3, 2, 4, 4], r), randn(&[2], r), randn(&[2], r)],
                    Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some(&stats), NormMode::Eval)?.0)),
                )
            }
            "sum" => (vec!["x"], vec![randn(&[3, 4], r)], Box::new(|g, v| Ok(g.sum(v[0])))),
            "build_filters_lifting" => (
                vec!["k_init", "delta"],
                vec![randn(&[3, 2, 3, 3], r), delta(r)],
                Box::new(|g, v| build_relaxed_filters(g, v[0], v[1], FilterFlavor::Lifting)),
            ),
            "build_filters_pointwise" => (
                vec!["k_init", "delta"],
                vec![randn(&[3, 2, 4, 1, 1], r), delta(r)],
                Box::new(|g, v| build_relaxed_filters(g, v[0], v[1], FilterFlavor::Pointwise)),
            ),
            "build_filters_depthwise" => (
                vec!["k_init", "delta"],
                vec![randn(&[3, 1, 1, 5, 5], r), delta(r)],
                Box::new(|g, v| build_relaxed_filters(g, v[0], v[1], FilterFlavor::Depthwise)),
            ),
            other => {
                return Err(invalid(
                    "gradcheck",
                    format!("unknown op `{other}` (known: {})", OPS.join(", ")),
                ))
            }
        };
        total.merge(check_fn(name, &names, &inputs, op.as_ref(), &mut rng, OP_TOLERANCE)?);
    }
    Ok(total)
}

/// Spot check of a small relaxed classifier: `entries` random trainable
/// scalars, at least one of them a Δ entry, against the training loss.
pub fn check_model(entries: usize, seed: u64) -> Result<GradCheck> {
    let spec = ModelSpec::toy(&[4, 8, 8, 8], Mode::Relaxed, 0.1, 3);
    let model = Model::<f64>::build(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let x = Tensor::<f64>::randn(&[2, 1, spec.input_size, spec.input_size], 1.0, &mut rng);
    let labels = [0usize, 2];
    let loss_of = |m: &Model<f64>, grads: bool| -> Result<(f64, Vec<(crate::params::ParamId, Tensor<f64>)>)> {
        let mut fw = Forward::with(&m.params, NormMode::Train, grads);
        let xv = fw.graph.constant(x.clone());
        let logits = m.net.forward(&mut fw, xv)?;
        let loss = fw.graph.softmax_cross_entropy(logits, &labels)?;
        let lv = fw.graph.value(loss).item();
        if !grads {
            return Ok((lv, Vec::new()));
        }
        fw.graph.backward(loss)?;
        Ok((lv, fw.param_grads()))
    };
    let (_, grads) = loss_of(&model, true)?;
    let trainable = model.params.trainable_ids();
    let is_delta = |id: crate::params::ParamId| model.params.entry(id).name.ends_with(".delta");
    let deltas: Vec<_> = trainable.iter().copied().filter(|&id| is_delta(id)).collect();
    if deltas.is_empty() {
        return Err(invalid("gradcheck", "model has no trainable perturbation"));
    }
    let mut report = GradCheck::new("model", MODEL_TOLERANCE);
    for i in 0..entries.max(1) {
        let id = if i == 0 {
            deltas[rng.random_range(0..deltas.len())]
        } else {
            trainable[rng.random_range(0..trainable.len())]
        };
        debug_assert_eq!(model.params.entry(id).kind, ParamKind::Trainable);
        let n = model.params.get(id).numel();
        let idx = rng.random_range(0..n);
        let mut plus = model.clone();
        plus.params.get_mut(id).data_mut()[idx] += FD_STEP;
        let mut minus = model.clone();
        minus.params.get_mut(id).data_mut()[idx] -= FD_STEP;
        let numeric = (loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * FD_STEP);
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map_or(0.0, |(_, t)| t.data()[idx]);
        report.observe(&model.params.entry(id).name, idx, analytic, numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes() {
        for op in OPS {
            let r = check_op(op, 1, 11).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&[4], &mut rng);
        // silu's forward with the gradient of identity.
        let op: Box<OpFn> = Box::new(|g, v| {
            let s = g.silu(v[0]);
            let c = g.constant(g.value(s).zip_map(g.value(v[0]), |a, b| a - b)?);
            g.add(v[0], c)
        });
        let r = check_fn("fake", &["x"], &[x], op.as_ref(), &mut rng, OP_TOLERANCE).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn unknown_op_rejected() {
        assert!(check_op("nope", 1, 0).is_err());
    }

    #[test]
    fn model_spot_check_passes() {
        let r = check_model(5, 3).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 5);
    }
}
