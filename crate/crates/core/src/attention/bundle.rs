//! Parameter bundles: a directory of GSAT files plus a JSON manifest.
//!
//! `manifest.json` has the shape
//!
//! ```json
//! {
//!   "format": "gsa-param-bundle",
//!   "version": 1,
//!   "tensors": [
//!     { "name": "group2.block1.gsa.W_Q", "file": "group2.block1.gsa.W_Q.gsat",
//!       "dtype": "float64", "shape": [128, 128] }
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::gsat::{self, Dtype};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "gsa-param-bundle";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<BundleEntry>,
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    pub tensors: BTreeMap<String, Tensor>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl ParamBundle {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            version: 1,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| BundleEntry {
                    name: name.clone(),
                    file: format!("{name}.gsat"),
                    dtype: Dtype::F64.name().to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (entry, t) in manifest.tensors.iter().zip(self.tensors.values()) {
            if !valid_name(&entry.name) {
                return Err(Error::Bundle(format!(
                    "parameter name `{}` is not file-safe",
                    entry.name
                )));
            }
            gsat::write_file(dir.join(&entry.file), t, Dtype::F64)?;
        }
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT || manifest.version != 1 {
            return Err(Error::Bundle(format!(
                "unsupported manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut bundle = Self::default();
        for entry in manifest.tensors {
            if !valid_name(&entry.file) || entry.file.contains('/') {
                return Err(Error::Bundle(format!("unsafe file name `{}`", entry.file)));
            }
            let (t, dtype) = gsat::read_file(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() || dtype.name() != entry.dtype {
                return Err(Error::Bundle(format!(
                    "`{}`: manifest says {} {:?}, file holds {} {:?}",
                    entry.name,
                    entry.dtype,
                    entry.shape,
                    dtype.name(),
                    t.shape()
                )));
            }
            if bundle.tensors.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Bundle(format!("duplicate entry `{}`", entry.name)));
            }
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{GsaConfig, GsaParams};

    #[test]
    fn save_and_load_gsa_parameters() {
        let cfg = GsaConfig::new(8, 8, 8, 2, 3, 3);
        let params = GsaParams::init(&cfg, 1).unwrap();
        let mut bundle = ParamBundle::default();
        for (name, t) in params.named() {
            bundle.insert(format!("group2.block1.gsa.{name}"), t.clone());
        }
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ParamBundle::load(dir.path()).unwrap();
        assert_eq!(back, bundle);
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert!(manifest
            .tensors
            .iter()
            .any(|e| e.name == "group2.block1.gsa.W_Q" && e.shape == vec![8, 8]));
    }

    #[test]
    fn load_rejects_shape_disagreement() {
        let mut bundle = ParamBundle::default();
        bundle.insert("a", Tensor::zeros(&[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.tensors[0].shape = vec![2, 3];
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(ParamBundle::load(dir.path()).is_err());
    }

    #[test]
    fn rejects_unsafe_names() {
        let mut bundle = ParamBundle::default();
        bundle.insert("../evil", Tensor::zeros(&[1]));
        let dir = tempfile::tempdir().unwrap();
        assert!(bundle.save(dir.path()).is_err());
    }
}
