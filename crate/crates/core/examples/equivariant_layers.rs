//! Every layer kind in strict mode, checked against its group action in f32
//! and f64, then a relaxed lifting layer for contrast.
//!
//!     cargo run --release --example equivariant_layers

use r2gconv::group::C4;
use r2gconv::layers::{eval_layer, Builder, Layer, Mode, R2Lifting};
use r2gconv::metrics::strict_layer_suite;
use r2gconv::params::ParamStore;
use r2gconv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2gconv::Result<()> {
    let f32s = strict_layer_suite::<f32>(16, 1)?;
    let f64s = strict_layer_suite::<f64>(16, 1)?;
    println!("{:<16} {:>12} {:>12}", "layer", "f32 max-abs", "f64 max-abs");
    for ((name, a), (_, b)) in f32s.iter().zip(&f64s) {
        println!("{name:<16} {a:>12.3e} {b:>12.3e}");
    }

    for sigma in [0.0, 0.1, 0.3] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lift = R2Lifting::new(&mut Builder::new(&mut store, &mut rng, Mode::Relaxed, sigma), 1, 4, 3, 1)?;
        let x = Tensor::<f64>::randn(&[1, 1, 9, 9], 1.0, &mut rng);
        let y = eval_layer(&lift, &store, &x)?;
        let mut worst = 0.0f64;
        for g in C4::all() {
            let lhs = eval_layer(&lift, &store, &lift.input_rep().act(g, &x)?)?;
            worst = worst.max(lhs.max_abs_diff(&lift.output_rep().act(g, &y)?)?);
        }
        println!("relaxed lifting sigma={sigma}: max-abs equivariance error {worst:.3e}");
    }
    Ok(())
}
