//! Finite-difference checks of every differentiable primitive, of the filter
//! expansion with respect to both the filter and Δ, and a spot check of a
//! whole relaxed model.
//!
//!     cargo run --release --example gradcheck

use r2gconv::gradcheck::{check_model, check_op, OPS};

fn main() -> r2gconv::Result<()> {
    for op in OPS {
        println!("{}", check_op(op, 2, 1)?);
    }
    println!("{}", check_model(5, 1)?);
    Ok(())
}
