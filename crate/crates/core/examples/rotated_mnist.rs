//! Train on quarter-turned MNIST digits, test on upright ones, and compare a
//! strict group model with a plain CNN of matched size.
//!
//! Data comes from `R2NET_DATA_DIR` (standard IDX file names) or `data/mnist`.
//!
//!     cargo run --release --example rotated_mnist -- [epochs] [subset_train]

use r2gconv::data::MnistPaths;
use r2gconv::layers::Mode;
use r2gconv::train::{train_with, TrainConfig, TrainData};

fn main() -> r2gconv::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let subset = args.next().and_then(|a| a.parse().ok()).unwrap_or(5000);
    let paths = MnistPaths::from_env().unwrap_or_else(|| MnistPaths::in_dir("data/mnist"));
    for mode in [Mode::Strict, Mode::Relaxed, Mode::Plain] {
        let cfg = TrainConfig {
            epochs,
            mode,
            subset_train: Some(subset),
            data: Some(paths.clone()),
            ..TrainConfig::new(7)
        };
        let data = TrainData::load(&cfg)?;
        println!("{}", cfg.describe());
        let out = train_with(&cfg, &data, |r| println!("mode={mode} {r}"))?;
        println!("mode={mode} params={}", out.model.param_count());
    }
    Ok(())
}
