//! Save a model, load it back, and confirm identical logits; then show the
//! structured errors for a corrupted header and a mismatched architecture.
//!
//!     cargo run --example checkpoint_roundtrip

use std::collections::BTreeMap;

use r2gconv::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint};
use r2gconv::layers::Mode;
use r2gconv::model::{Model, ModelSpec};
use r2gconv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2gconv::Result<()> {
    let dir = std::env::temp_dir().join("r2net-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");

    let spec = ModelSpec::toy(&[8, 16, 32, 32], Mode::Relaxed, 0.1, 10);
    let model = Model::<f32>::build(&spec, 5)?;
    save_checkpoint(&path, &Checkpoint::from_model(&model, BTreeMap::new(), Vec::new()))?;
    let (back, _) = load_checkpoint(&path)?;
    let x = Tensor::<f32>::randn(&[2, 1, 28, 28], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let same = model.logits(&x)?.data().iter().zip(back.logits(&x)?.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("round trip bit-identical: {same}");

    let mut bytes = std::fs::read(&path)?;
    bytes[0] = b'X';
    let bad = dir.join("bad.ckpt");
    std::fs::write(&bad, &bytes)?;
    println!("corrupted header: {}", load_checkpoint(&bad).unwrap_err());

    let other = ModelSpec::toy(&[8, 16, 32, 64], Mode::Relaxed, 0.1, 10);
    println!("wrong architecture: {}", read_checkpoint(&path)?.restore(&other).unwrap_err());
    Ok(())
}
