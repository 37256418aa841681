//! Expand one depthwise filter into its four-fold bank, show that the
//! unperturbed bank is made of exact quarter turns, and watch the bank drift
//! away from that as σ grows.
//!
//!     cargo run --example filter_bank

use r2gconv::filters::{expand_filters, strictness_gap, FilterFlavor};
use r2gconv::{PerturbationDelta, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(t: &Tensor<f64>, slice: usize) {
    let d = &t.data()[slice * 9..slice * 9 + 9];
    for r in 0..3 {
        println!("    {:6.3} {:6.3} {:6.3}", d[3 * r], d[3 * r + 1], d[3 * r + 2]);
    }
}

fn main() -> r2gconv::Result<()> {
    let k = Tensor::from_f64(&[1, 1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.])?;
    let strict = expand_filters(&k, &PerturbationDelta::zeros(), FilterFlavor::Depthwise)?;
    println!("strict bank {:?}", strict.shape());
    for g in 0..4 {
        println!("  slice {g} ({}°)", 90 * g);
        show(&strict, g);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = Tensor::<f64>::randn(&[1, 1, 1, 3, 3], 1.0, &mut rng);
    let unit = unit.scale(1.0 / unit.l2_norm());
    let base = expand_filters(&unit, &PerturbationDelta::zeros(), FilterFlavor::Depthwise)?;
    for sigma in [0.1, 0.4, 0.8] {
        let delta = PerturbationDelta::<f64>::sample(sigma, &mut ChaCha8Rng::seed_from_u64(17))?;
        let bank = expand_filters(&unit, &delta, FilterFlavor::Depthwise)?;
        println!("sigma={sigma} strictness_gap={:.4}", strictness_gap(&bank, &base)?);
    }

    let pw = Tensor::<f64>::randn(&FilterFlavor::Pointwise.init_shape(2, 3, 1), 1.0, &mut rng);
    let pw_bank = expand_filters(&pw, &PerturbationDelta::zeros(), FilterFlavor::Pointwise)?;
    println!("pointwise {:?} -> {:?}", pw.shape(), pw_bank.shape());
    Ok(())
}
