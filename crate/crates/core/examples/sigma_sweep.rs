//! Train the same relaxed model with a small and a large initial σ and
//! compare test error and equivariance error.
//!
//!     cargo run --release --example sigma_sweep -- [epochs] [subset_train]

use r2gconv::data::MnistPaths;
use r2gconv::train::{sigma_sweep, TrainConfig, TrainData};

fn main() -> r2gconv::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let subset = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let cfg = TrainConfig {
        epochs,
        subset_train: Some(subset),
        data: Some(MnistPaths::from_env().unwrap_or_else(|| MnistPaths::in_dir("data/mnist"))),
        ..TrainConfig::new(3)
    };
    let data = TrainData::load(&cfg)?;
    for row in sigma_sweep(&cfg, &[0.1, 0.8], &data)? {
        println!("{}", row.to_record());
    }
    Ok(())
}
