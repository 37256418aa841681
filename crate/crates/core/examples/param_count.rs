//! Parameter accounting: the per-layer table of the toy classifier at two
//! widths, the per-layer formula, and the cost ratio against a full group
//! convolution.
//!
//!     cargo run --example param_count

use r2gconv::layers::Mode;
use r2gconv::model::{gconv_params, param_count, r2gconv_params, r2gconv_ratio, ModelSpec};

fn main() -> r2gconv::Result<()> {
    let mut wide = ModelSpec::toy(&[16, 32, 64, 128], Mode::Relaxed, 0.1, 10);
    wide.in_channels = 3;
    println!("{}\n", param_count(&wide)?);

    for mode in [Mode::Relaxed, Mode::Strict, Mode::Plain] {
        let spec = ModelSpec::toy(&[8, 16, 32, 32], mode, 0.1, 10);
        println!("toy {mode}: {} trainable", param_count(&spec)?.total);
    }

    println!();
    for (ci, co, k) in [(16, 32, 3), (32, 64, 3), (64, 64, 5)] {
        println!(
            "ci={ci} co={co} k={k}: relaxed {} vs full group conv {} (ratio without Δ {:.6}, formula {:.6})",
            r2gconv_params(ci, co, k),
            gconv_params(ci, co, k),
            (r2gconv_params(ci, co, k) - 16) as f64 / gconv_params(ci, co, k) as f64,
            r2gconv_ratio(ci, k),
        );
    }
    Ok(())
}
