//! Directory container: `manifest.json` plus one raw payload per array.
//!
//! Payloads are little-endian IEEE-754, row-major, without headers. Data
//! arrays use `f32`; checkpoints use `f64` so resumed runs are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, CatdError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// An array with its storage precision. Values are held as `f64` in memory;
/// `F32` arrays are rounded on save.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: Dtype,
    pub values: ArrayD<f64>,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, values: ArrayD<f64>) -> Self {
        NamedArray { name: name.into(), dtype: Dtype::F32, values }
    }

    pub fn f64(name: impl Into<String>, values: ArrayD<f64>) -> Self {
        NamedArray { name: name.into(), dtype: Dtype::F64, values }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * self.dtype.size());
        for &v in self.values.iter() {
            match self.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub arrays: Vec<ArrayEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub arrays: BTreeMap<String, NamedArray>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays.get(name).map(|a| &a.values).ok_or_else(|| CatdError::CorruptContainer {
            array: name.to_string(),
            reason: "not present".into(),
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes `arrays` under `dir`, replacing any earlier manifest.
pub fn save_container(dir: &Path, arrays: &[NamedArray], metadata: serde_json::Value) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for a in arrays {
        if !seen.insert(a.name.as_str()) {
            return Err(input_err(format!("duplicate array name `{}`", a.name)));
        }
        if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(input_err(format!("array name `{}` is not a plain identifier", a.name)));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(input_err(format!("array `{}` has non-finite values", a.name)));
        }
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        let bytes = a.to_bytes();
        let file = format!("{}.bin", a.name);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.values.shape().to_vec(),
            dtype: a.dtype,
            file,
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, arrays: entries, metadata };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CatdError::MissingPrerequisite(format!("{} does not exist", path.display()))
        } else {
            e.into()
        }
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(input_err(format!("unsupported container schema {}", manifest.schema_version)));
    }
    Ok(manifest)
}

pub fn load_container(dir: &Path) -> Result<Container> {
    let manifest = read_manifest(dir)?;
    let mut arrays = BTreeMap::new();
    for e in &manifest.arrays {
        let corrupt = |reason: String| CatdError::CorruptContainer { array: e.name.clone(), reason };
        let bytes = fs::read(dir.join(&e.file)).map_err(|err| corrupt(format!("payload `{}`: {err}", e.file)))?;
        let count: usize = e.shape.iter().product();
        if bytes.len() != count * e.dtype.size() || bytes.len() != e.bytes {
            return Err(corrupt(format!(
                "payload has {} bytes, shape {:?} of {:?} needs {}",
                bytes.len(),
                e.shape,
                e.dtype,
                count * e.dtype.size()
            )));
        }
        if sha256_hex(&bytes) != e.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let values: Vec<f64> = match e.dtype {
            Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let values = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| corrupt(err.to_string()))?;
        arrays.insert(e.name.clone(), NamedArray { name: e.name.clone(), dtype: e.dtype, values });
    }
    Ok(Container { arrays, metadata: manifest.metadata })
}
