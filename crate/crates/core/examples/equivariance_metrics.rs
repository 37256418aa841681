//! Empirical equivariance error of a relaxed classifier as its perturbations
//! are scaled down to zero, plus the two bound checks against a strict and a
//! plain counterpart.
//!
//!     cargo run --release --example equivariance_metrics

use r2gconv::layers::Mode;
use r2gconv::metrics::{equivariance_error, lipschitz_probe, model_tap, Actions, EquivarianceReport, ProbeSet};
use r2gconv::model::{Model, ModelSpec};

fn main() -> r2gconv::Result<()> {
    let spec = ModelSpec::toy(&[8, 16, 32, 32], Mode::Relaxed, 0.1, 10);
    let model = Model::<f32>::build(&spec, 4)?;
    let probes = ProbeSet::<f32>::gaussian(16, &[1, 1, 28, 28], 9)?;

    for t in [0.0, 0.25, 0.5, 1.0] {
        let mut m = model.clone();
        m.scale_deltas(t);
        let ee = equivariance_error(model_tap(&m, "head"), &probes, Actions::INVARIANT)?;
        let per_g: Vec<String> = ee.per_element().iter().map(|e| format!("{e:.2e}")).collect();
        println!("delta scale {t:<5} ee={:.3e} per-g=[{}]", ee.ee, per_g.join(", "));
    }
    let k = lipschitz_probe(model_tap(&model, "head"), &probes, 64, 1)?;
    println!("lipschitz estimate {k:.4}");

    let mut strict = model.clone();
    strict.scale_deltas(0.0);
    let plain = Model::<f32>::build(&ModelSpec::toy(&[8, 16, 32, 32], Mode::Plain, 0.0, 10), 4)?;
    for (label, other) in [("vs strict", &strict), ("vs plain", &plain)] {
        let r = EquivarianceReport::compute(
            model_tap(&model, "head"),
            Some(model_tap(other, "head")),
            &probes,
            Actions::INVARIANT,
            spec.sigma,
        )?;
        println!("{label}: {r}");
    }
    Ok(())
}
