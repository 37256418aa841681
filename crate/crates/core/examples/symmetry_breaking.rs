//! Quadrant-defect images: a symmetric pattern with a small L-shaped mark in
//! one quadrant, the class being the quadrant. A strictly invariant model
//! cannot tell the classes apart; a relaxed one can learn to.
//!
//!     cargo run --release --example symmetry_breaking

use r2gconv::data::{make_symmetry_breaking_set, orbit_logit_spread};
use r2gconv::layers::Mode;
use r2gconv::model::{Model, ModelSpec};
use r2gconv::train::{evaluate, train, TrainConfig, TrainData};

fn main() -> r2gconv::Result<()> {
    let strict = Model::<f32>::build(&ModelSpec::toy(&[8, 16, 32, 32], Mode::Strict, 0.0, 4), 1)?;
    for scale in [0.0, 1.0] {
        let set = make_symmetry_breaking_set(16, scale, 1)?;
        let logits = strict.logits(&set.images)?;
        let spread = orbit_logit_spread(logits.data(), 4);
        println!("strict model, defect scale {scale}: largest logit gap within an orbit {spread:.2e}");
    }

    let train_set = make_symmetry_breaking_set(400, 1.0, 2)?;
    let test_set = make_symmetry_breaking_set(400, 1.0, 3)?;
    for mode in [Mode::Strict, Mode::Relaxed] {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 32,
            learning_rate: 3e-3,
            mode,
            num_classes: 4,
            rotate_train: false,
            subset_train: None,
            subset_test: None,
            ee_probes: 0,
            ..TrainConfig::new(11)
        };
        let data = TrainData::prepare(&cfg, &train_set, &test_set)?;
        let out = train(&cfg, &data)?;
        let acc = 100.0 - evaluate(&out.model, &data.test)?.top1_error_percent;
        println!("{mode}: quadrant accuracy {acc:.1}%");
    }
    Ok(())
}
