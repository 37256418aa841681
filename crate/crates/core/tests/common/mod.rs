#![allow(dead_code)]

use std::path::PathBuf;

use r2gconv::data::MnistPaths;

/// `$R2NET_DATA_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_paths() -> Option<MnistPaths> {
    let p = MnistPaths::from_env().unwrap_or_else(|| {
        MnistPaths::in_dir(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
    });
    p.all_exist().then_some(p)
}

pub fn require_mnist() -> MnistPaths {
    mnist_paths().expect(
        "MNIST IDX files not found: set R2NET_DATA_DIR or run scripts/mnist_from_npm.py to populate data/mnist",
    )
}
