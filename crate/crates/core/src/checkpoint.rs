//! Binary checkpoints and tensor dumps.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! b"R2N1"  u32 version  u32 blob_len  blob (UTF-8 key=value lines)
//! u32 count  count × record
//! record: u16 name_len  name  u8 rank  rank × u32 dim  f32 payload
//! ```
//!
//! A tensor dump is a bare sequence of records. Records whose names start
//! with `optim.` carry optimizer state and are not model parameters. Blob
//! lines whose keys start with `meta.` carry training metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{parse_kv, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"R2N1";
pub const FORMAT_VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim.";
pub const META_PREFIX: &str = "meta.";

/// Decoded file contents, before being matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: BTreeMap<String, String>, optim: Vec<(String, Tensor<f32>)>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        tensors.extend(optim.into_iter().map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t)));
        Self {
            spec: model.spec().clone(),
            meta,
            tensors,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut blob = self.spec.to_blob();
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Spec(format!("metadata entry `{k}` is not a single key=value line")));
            }
            blob.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(blob.len(), "spec blob")?.to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len(), "parameter count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            encode_record(&mut out, name, t)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(MAGIC),
                found: u32::from_be_bytes(found),
            });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let blob_len = r.u32("spec blob length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "spec blob")?)
            .map_err(|e| Error::Spec(format!("spec blob is not UTF-8: {e}")))?;
        let mut map = parse_kv(blob)?;
        let meta_keys: Vec<String> = map.keys().filter(|k| k.starts_with(META_PREFIX)).cloned().collect();
        let mut meta = BTreeMap::new();
        for k in meta_keys {
            let v = map.remove(&k).unwrap_or_default();
            meta.insert(k[META_PREFIX.len()..].to_string(), v);
        }
        let spec = ModelSpec::from_map(&map)?;
        let count = r.u32("parameter count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            tensors.push(decode_record(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Spec(format!("{} trailing bytes after the last record", r.remaining())));
        }
        Ok(Self { spec, meta, tensors })
    }

    /// Optimizer-state records with the prefix removed.
    pub fn optimizer_state(&self) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(OPTIM_PREFIX).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Builds a model for `spec` and fills it from the stored tensors. Every
    /// parameter is checked before anything is assigned.
    pub fn restore(&self, spec: &ModelSpec) -> Result<Model<f32>> {
        let mut model = Model::<f32>::build(spec, 0)?;
        let mut stored: BTreeMap<&str, &Tensor<f32>> = BTreeMap::new();
        for (n, t) in &self.tensors {
            if n.starts_with(OPTIM_PREFIX) {
                continue;
            }
            if stored.insert(n.as_str(), t).is_some() {
                return Err(Error::Spec(format!("duplicate parameter record `{n}`")));
            }
        }
        for (n, _) in &stored {
            if model.params.id(n).is_none() {
                return Err(Error::UnknownParam(n.to_string()));
            }
        }
        let mut assignments = Vec::with_capacity(model.params.len());
        for id in model.params.ids() {
            let e = model.params.entry(id);
            let t = stored
                .get(e.name.as_str())
                .ok_or_else(|| Error::MissingParam(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(Error::ParamShape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            assignments.push((id, (*t).clone()));
        }
        for (id, t) in assignments {
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn into_model(&self) -> Result<Model<f32>> {
        self.restore(&self.spec)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Spec(format!("{what} {n} does not fit in u32")))
}

fn encode_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let n = u16::try_from(name.len()).map_err(|_| Error::Spec(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Spec(format!("rank of `{name}` exceeds 255")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn decode_record(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let n = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(n, "tensor name")?)
        .map_err(|e| Error::Spec(format!("tensor name is not UTF-8: {e}")))?
        .to_string();
    let rank = r.take(1, "tensor rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dims")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Spec(format!("tensor `{name}` is too large")))?;
    let payload = r.take(numel, "tensor payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| Error::Spec(format!("tensor `{name}`: {e}")))?;
    Ok((name, t))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                what,
                expected: n,
                actual: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Writes bytes through a temporary sibling file and a rename, so a failed
/// write never leaves a half-written file at `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.encode()?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&crate::error::read_file(path.as_ref())?)
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Checkpoint)> {
    let ckpt = read_checkpoint(path)?;
    let model = ckpt.into_model()?;
    Ok((model, ckpt))
}

pub fn encode_tensor_dump(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (n, t) in tensors {
        encode_record(&mut out, n, t)?;
    }
    Ok(out)
}

pub fn decode_tensor_dump(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while r.remaining() > 0 {
        out.push(decode_record(&mut r)?);
    }
    Ok(out)
}

pub fn write_tensor_dump(path: impl AsRef<Path>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor_dump(tensors)?)
}

pub fn read_tensor_dump(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_tensor_dump(&crate::error::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn small(mode: Mode) -> Model<f32> {
        Model::build(&ModelSpec::toy(&[4, 8, 8, 8], mode, 0.1, 3), 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small(Mode::Relaxed);
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "2".to_string());
        let optim = vec![("step".to_string(), Tensor::scalar(3.0))];
        let c = Checkpoint::from_model(&m, meta.clone(), optim.clone());
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta, meta);
        assert_eq!(back.optimizer_state(), optim);
        let m2 = back.into_model().unwrap();
        assert_eq!(m2.params, m.params);
    }

    #[test]
    fn header_errors() {
        let c = Checkpoint::from_model(&small(Mode::Strict), BTreeMap::new(), vec![]);
        let good = c.encode().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Version { found: 9, .. })));
        let cut = &good[..good.len() - 3];
        match Checkpoint::decode(cut) {
            Err(Error::Truncated { expected, actual, .. }) => assert_eq!(expected - actual, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_mismatch_names_parameter() {
        let c = Checkpoint::from_model(&small(Mode::Relaxed), BTreeMap::new(), vec![]);
        let other = ModelSpec::toy(&[4, 8, 8, 16], Mode::Relaxed, 0.1, 3);
        match c.restore(&other) {
            Err(Error::ParamShape { name, .. }) => assert!(name.starts_with("stage3")),
            other => panic!("unexpected {other:?}"),
        }
        let plain = ModelSpec::toy(&[4, 8, 8, 8], Mode::Plain, 0.1, 3);
        assert!(c.restore(&plain).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let ts = vec![
            ("a".to_string(), Tensor::from_fn(&[2, 3], |i| i as f32)),
            ("b".to_string(), Tensor::scalar(-1.5)),
        ];
        let bytes = encode_tensor_dump(&ts).unwrap();
        assert_eq!(decode_tensor_dump(&bytes).unwrap(), ts);
        assert!(decode_tensor_dump(&bytes[..bytes.len() - 1]).is_err());
    }
}
