//! Container format: magic, version, JSON header, raw little-endian f32 arrays.
//!
//! ```text
//! b"VLIGHTCK" | u32 version | u64 header_len | header JSON | data
//! ```
//! Each header tensor entry carries name, shape, dtype and the byte offset
//! into the data section.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{build_model, Model, ModelSpec};

const MAGIC: &[u8; 8] = b"VLIGHTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Every stored array of the model, including normalization statistics.
    pub params: Vec<NamedArray>,
    pub adam: Option<AdamState>,
    pub samples_seen: u64,
    /// Sampler stream state at `samples_seen`.
    pub rng: Option<ChaCha8Rng>,
    pub config_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    samples_seen: u64,
    rng: Option<ChaCha8Rng>,
    config_fingerprint: String,
    adam_step: Option<u64>,
    tensors: Vec<TensorHeader>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    /// Snapshot of a model's arrays (no optimizer state).
    pub fn from_model(model: &Model<f32>) -> Self {
        let params = model
            .params()
            .entries()
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.value.clone(),
            })
            .collect();
        Checkpoint {
            spec: model.spec().clone(),
            params,
            adam: None,
            samples_seen: 0,
            rng: None,
            config_fingerprint: String::new(),
        }
    }

    /// Rebuilds the network and loads every array.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut model: Model<f32> = build_model(&self.spec, &mut rng)?;
        model.params_mut().load_named(
            self.params
                .iter()
                .map(|a| (a.name.as_str(), a.shape.as_slice(), a.data.as_slice())),
        )?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, &NamedArray)> =
            self.params.iter().map(|a| (a.name.clone(), a)).collect();
        if let Some(adam) = &self.adam {
            arrays.extend(adam.m.iter().map(|a| (format!("{ADAM_M}{}", a.name), a)));
            arrays.extend(adam.v.iter().map(|a| (format!("{ADAM_V}{}", a.name), a)));
        }
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(arrays.len());
        for (name, a) in &arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!(
                    "array {name} does not match its shape"
                )));
            }
            tensors.push(TensorHeader {
                name: name.clone(),
                shape: a.shape.clone(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * a.data.len() as u64;
        }
        let header = Header {
            spec: self.spec.clone(),
            samples_seen: self.samples_seen,
            rng: self.rng.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("truncated checkpoint".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(header_len).ok_or_else(truncated)?;
        if bytes.len() < data_start {
            return Err(truncated());
        }
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[data_start..];

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in header.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "array {} has unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let len: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start.checked_add(4 * len).ok_or_else(truncated)?;
            let raw = data.get(start..end).ok_or_else(truncated)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let (target, name) = if let Some(n) = t.name.strip_prefix(ADAM_M) {
                (&mut m, n.to_string())
            } else if let Some(n) = t.name.strip_prefix(ADAM_V) {
                (&mut v, n.to_string())
            } else {
                (&mut params, t.name)
            };
            target.push(NamedArray {
                name,
                shape: t.shape,
                data: values,
            });
        }
        let adam = header.adam_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint {
            spec: header.spec,
            params,
            adam,
            samples_seen: header.samples_seen,
            rng: header.rng,
            config_fingerprint: header.config_fingerprint,
        })
    }
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let spec = ModelSpec {
            width: 8,
            ..ModelSpec::vlight()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model: Model<f32> = build_model(&spec, &mut rng).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.samples_seen = 40;
        ck.rng = Some(rng);
        ck.config_fingerprint = "abc".into();
        ck.adam = Some(AdamState {
            step: 4,
            m: vec![NamedArray {
                name: "head.weight".into(),
                shape: vec![1, 8, 1, 1],
                data: (0..8).map(|i| i as f32 * 0.1 - f32::MIN_POSITIVE).collect(),
            }],
            v: vec![NamedArray {
                name: "head.weight".into(),
                shape: vec![1, 8, 1, 1],
                data: vec![f32::EPSILON; 8],
            }],
        });
        ck
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let model = back.to_model().unwrap();
        for (e, a) in model.params().entries().iter().zip(&ck.params) {
            assert_eq!(
                e.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 19, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::from_bytes(&bytes[..cut]),
                    Err(Error::Checkpoint(_))
                ),
                "cut {cut}"
            );
        }
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        let err = Checkpoint::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.vlck");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }
}
