//! The tensor and reverse-mode engine on its own: a tiny convolution
//! regression fitted by hand-written gradient descent.
//!
//!     cargo run --example autodiff_basics

use r2gconv::autodiff::Graph;
use r2gconv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2gconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn(&[4, 1, 6, 6], 1.0, &mut rng);
    let target_w = Tensor::<f64>::randn(&[2, 1, 3, 3], 1.0, &mut rng);
    let target = {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(target_w.clone()));
        let y = g.conv2d(xv, wv, 1, 1, 1)?;
        g.value(y).clone()
    };

    let mut w = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
    for step in 0..=60 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let y = g.conv2d(xv, wv, 1, 1, 1)?;
        let t = g.constant(target.clone());
        let diff = g.sub(y, t)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.sum(sq);
        g.backward(loss)?;
        if step % 20 == 0 {
            println!("step {step:>2} loss {:.6}", g.value(loss).item());
        }
        let grad = g.grad(wv).expect("parameter gradient").clone();
        w = w.zip_map(&grad, |w, d| w - 0.002 * d)?;
    }
    println!("max weight error {:.2e}", w.max_abs_diff(&target_w)?);
    Ok(())
}
