//! IDX (MNIST) reading and writing, exact quarter-turn augmentation, and the
//! synthetic quadrant-defect dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{act_on_input, C4, ORDER};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "R2NET_DATA_DIR";

pub const SYNTHETIC_SIZE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Train,
    Test,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Train => "train",
            Provenance::Test => "test",
            Provenance::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(n, 1, h, w)` images in `[0, 1]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1] != 1 {
            return Err(Error::Data(format!("images must be (n, 1, h, w), got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Data("empty subset".into()));
        }
        Ok(Self {
            images: self.images.narrow0(0, n)?,
            labels: self.labels[..n].to_vec(),
            provenance: self.provenance,
        })
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[idx.len(), c, h, w], data)?, labels))
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(self.batch(&[i])?.0)
    }
}

/// Standard MNIST file locations inside a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            train_images: d.join("train-images-idx3-ubyte"),
            train_labels: d.join("train-labels-idx1-ubyte"),
            test_images: d.join("t10k-images-idx3-ubyte"),
            test_labels: d.join("t10k-labels-idx1-ubyte"),
        }
    }

    /// `$R2NET_DATA_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(DATA_DIR_ENV).map(Self::in_dir)
    }

    pub fn all_exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Truncated {
        what,
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses IDX image bytes into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "idx image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "idx image header")? as usize;
    let rows = be_u32(bytes, 8, "idx image header")? as usize;
    let cols = be_u32(bytes, 12, "idx image header")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "idx image payload",
            expected: need,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "idx label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "idx label header")? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "idx label payload",
            expected: need,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[8..need])
}

pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8], provenance: Provenance) -> Result<LabeledImageSet> {
    let (n, rows, cols, px) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data(format!("empty idx file ({n} × {rows} × {cols})")));
    }
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    LabeledImageSet::new(
        Tensor::new(&[n, 1, rows, cols], data)?,
        labels.iter().map(|&l| l as usize).collect(),
        provenance,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, provenance: Provenance) -> Result<LabeledImageSet> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    decode_idx(&read(images_path.as_ref())?, &read(labels_path.as_ref())?, provenance)
}

/// Serializes a set as IDX image and label bytes. Pixels are rounded to the
/// nearest multiple of 1/255.
pub fn encode_idx(set: &LabeledImageSet) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = set.images.shape();
    if s[1] != 1 {
        return Err(Error::Data("idx images must have one channel".into()));
    }
    let mut img = Vec::with_capacity(16 + set.images.numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(set.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for &l in &set.labels {
        let b = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (img, lab) = encode_idx(set)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// One uniformly drawn C4 element per sample.
pub fn rotation_draws(n: usize, seed: u64) -> Vec<C4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C4::wrapping(rng.random_range(0..4i32) as isize)).collect()
}

/// Rotates every image by its own random quarter turn; labels are kept.
pub fn rotate_augment(set: &LabeledImageSet, seed: u64) -> Result<LabeledImageSet> {
    let [c, h, w] = set.image_shape();
    if h != w {
        return Err(Error::Data(format!("rotation needs square images, got {h}x{w}")));
    }
    let per = c * h * w;
    let mut data = Vec::with_capacity(set.images.numel());
    for (i, g) in rotation_draws(set.len(), seed).into_iter().enumerate() {
        let img = Tensor::new(&[c, h, w], set.images.data()[i * per..(i + 1) * per].to_vec())?;
        data.extend_from_slice(act_on_input(g, &img)?.data());
    }
    LabeledImageSet::new(
        Tensor::new(set.images.shape(), data)?,
        set.labels.clone(),
        set.provenance,
    )
}

/// Canonical representative of the quarter-turn orbit of pixel `(r, c)`.
fn orbit_rep(r: usize, c: usize, n: usize) -> (usize, usize) {
    let mut best = (r, c);
    let (mut rr, mut cc) = (r, c);
    for _ in 0..3 {
        (rr, cc) = (n - 1 - cc, rr);
        best = best.min((rr, cc));
    }
    best
}

/// A quarter-turn symmetric base image: a centred cross and square ring of
/// random brightness plus orbit-constant texture.
fn symmetric_base<R: Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    let amp: f32 = rng.random_range(0.4..0.8);
    let ring: usize = rng.random_range(7..10);
    let mid = n as f32 / 2.0 - 0.5;
    let mut texture = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (a, b) = orbit_rep(r, c, n);
            if (a, b) == (r, c) {
                texture[r * n + c] = rng.random_range(0.0..0.1);
            }
        }
    }
    let mut img = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (a, b) = orbit_rep(r, c, n);
            let (dr, dc) = ((r as f32 - mid).abs(), (c as f32 - mid).abs());
            let cross = dr < 1.5 || dc < 1.5;
            let sq = (dr.max(dc) - ring as f32).abs() < 1.0;
            let mut v = texture[a * n + b];
            if cross {
                v += amp;
            }
            if sq {
                v += 0.5 * amp;
            }
            img[r * n + c] = v;
        }
    }
    img
}

/// Adds a small chiral mark (an L shape) inside the top-left quadrant.
fn add_defect<R: Rng>(img: &mut [f32], n: usize, scale: f32, rng: &mut R) {
    let q = n / 2;
    let r0 = rng.random_range(2..q - 6);
    let c0 = rng.random_range(2..q - 6);
    for d in 0..4 {
        img[(r0 + d) * n + c0] += scale;
    }
    for d in 1..3 {
        img[(r0 + 3) * n + c0 + d] += scale;
    }
}

/// Synthetic 28×28 quadrant-defect data. Samples come in groups of four: a
/// symmetric base with a defect in the top-left quadrant (class 0) and its
/// exact quarter-turn rotations (classes 1..3, defect in the quadrant the
/// rotation carries it to). At `defect_scale = 0` every image is exactly
/// invariant under quarter turns.
pub fn make_symmetry_breaking_set(n: usize, defect_scale: f64, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 {
        return Err(Error::Data("n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&defect_scale) {
        return Err(Error::Data(format!("defect_scale {defect_scale} not in [0, 1]")));
    }
    let size = SYNTHETIC_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let mut img = symmetric_base(size, &mut rng);
        add_defect(&mut img, size, defect_scale as f32, &mut rng);
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let base = Tensor::new(&[1, size, size], img)?;
        for g in C4::all() {
            if labels.len() == n {
                break;
            }
            data.extend_from_slice(act_on_input(g, &base)?.data());
            labels.push(g.index());
        }
    }
    LabeledImageSet::new(Tensor::new(&[n, 1, size, size], data)?, labels, Provenance::Synthetic)
}

/// Largest entrywise difference between the logit rows of samples in the
/// same group of four from [`make_symmetry_breaking_set`]. `logits` is row-major
/// `(n, classes)`; a trailing partial group is compared as far as it goes.
pub fn orbit_logit_spread<T: Scalar>(logits: &[T], classes: usize) -> f64 {
    let mut worst = 0.0f64;
    for orbit in logits.chunks(ORDER * classes) {
        let first = &orbit[..classes];
        for row in orbit.chunks(classes).skip(1) {
            for (a, b) in first.iter().zip(row) {
                worst = worst.max((*a - *b).abs().to_f64().unwrap_or(f64::NAN));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledImageSet {
        let imgs = Tensor::from_fn(&[3, 1, 4, 4], |i| ((i * 13) % 256) as f32 / 255.0);
        LabeledImageSet::new(imgs, vec![0, 7, 2], Provenance::Train).unwrap()
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let (img, lab) = encode_idx(&tiny()).unwrap();
        let back = decode_idx(&img, &lab, Provenance::Train).unwrap();
        assert_eq!(back, tiny());
        assert_eq!(encode_idx(&back).unwrap(), (img, lab));
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = encode_idx(&tiny()).unwrap();
        match decode_idx(&img, &img, Provenance::Train) {
            Err(Error::BadMagic { expected, found }) => {
                assert_eq!((expected, found), (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC))
            }
            other => panic!("unexpected {other:?}"),
        }
        match decode_idx(&img[..img.len() - 5], &lab, Provenance::Train) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!((expected, actual), (img.len(), img.len() - 5))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_idx(&img, &lab[..lab.len() - 1], Provenance::Train).is_err());
    }

    #[test]
    fn augmentation_is_deterministic_and_norm_preserving() {
        let s = tiny();
        let a = rotate_augment(&s, 4).unwrap();
        assert_eq!(a, rotate_augment(&s, 4).unwrap());
        assert_eq!(a.labels, s.labels);
        let sorted = |t: Tensor<f32>| {
            let mut v = t.into_data();
            v.sort_by(f32::total_cmp);
            v
        };
        for i in 0..s.len() {
            let (x, y) = (sorted(a.image(i).unwrap()), sorted(s.image(i).unwrap()));
            assert_eq!(x, y);
            let norm = |v: &[f32]| v.iter().map(|p| p * p).sum::<f32>();
            assert_eq!(norm(&x), norm(&y));
        }
    }

    #[test]
    fn rotation_histogram_is_uniform() {
        let n = 60000;
        let mut counts = [0usize; 4];
        for g in rotation_draws(n, 123) {
            counts[g.index()] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 15000.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn symmetric_when_defect_is_off() {
        let s = make_symmetry_breaking_set(8, 0.0, 1).unwrap();
        for i in 0..s.len() {
            let img = s.image(i).unwrap();
            for g in C4::all() {
                assert_eq!(act_on_input(g, &img).unwrap(), img);
            }
        }
        assert_eq!(s.labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_symmetry_breaking_set(10, 0.7, 9).unwrap();
        assert_eq!(a, make_symmetry_breaking_set(10, 0.7, 9).unwrap());
        assert_eq!(a.len(), 10);
        assert!(make_symmetry_breaking_set(4, 1.5, 9).is_err());
    }
}
