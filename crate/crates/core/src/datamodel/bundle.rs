//! Serialized model parameters: a directory holding `manifest.json` plus one
//! FMAP file per named tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{decode_feature_map, encode_feature_map};
use super::maps::FeatureMap;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleStage {
    Inlier,
    Uem,
}

/// Classification head family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Generative,
    Discriminative,
}

impl HeadKind {
    pub fn letter(self) -> char {
        match self {
            HeadKind::Generative => 'G',
            HeadKind::Discriminative => 'D',
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "generative" | "g" => Ok(HeadKind::Generative),
            "discriminative" | "d" => Ok(HeadKind::Discriminative),
            other => Err(Error::InvalidConfig(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: [usize; 3],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: BundleStage,
    pub inlier_head: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uem_head: Option<HeadKind>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub decoder_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
    pub gmm_components: usize,
    /// Training configuration echo.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Stage-1 tensor digests captured before stage-2 training.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub frozen_digests: BTreeMap<String, String>,
}

/// Named parameter tensors plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: Manifest,
    tensors: BTreeMap<String, FeatureMap<f32>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_file_name(name: &str) -> Result<String> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-')
        || name.starts_with('.')
    {
        return Err(Error::InvalidBundle(format!("illegal tensor name {name:?}")));
    }
    Ok(format!("{name}.fmap"))
}

impl ModelBundle {
    /// Creates an empty bundle; any tensor entries already present in the
    /// manifest are discarded.
    pub fn new(mut manifest: Manifest) -> Self {
        manifest.tensors.clear();
        Self {
            manifest,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds or replaces a tensor and records its shape and digest.
    pub fn insert(&mut self, name: impl Into<String>, tensor: FeatureMap<f32>) -> Result<()> {
        let name = name.into();
        tensor_file_name(&name)?;
        let digest = sha256_hex(&encode_feature_map(&tensor)?);
        self.manifest.tensors.insert(
            name.clone(),
            TensorEntry {
                shape: [tensor.channels(), tensor.height(), tensor.width()],
                sha256: digest,
            },
        );
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&FeatureMap<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidBundle(format!("missing tensor {name}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &FeatureMap<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn digest(&self, name: &str) -> Option<&str> {
        self.manifest.tensors.get(name).map(|e| e.sha256.as_str())
    }

    /// Total scalar count over tensors whose name satisfies `filter`.
    pub fn parameter_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, t)| t.data().len())
            .sum()
    }

    /// Recomputes every digest and shape and compares with the manifest.
    pub fn verify(&self) -> Result<()> {
        if self.manifest.tensors.len() != self.tensors.len() {
            return Err(Error::InvalidBundle(format!(
                "manifest lists {} tensors, bundle holds {}",
                self.manifest.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, entry) in &self.manifest.tensors {
            let t = self.tensor(name)?;
            check_entry(name, entry, t, &sha256_hex(&encode_feature_map(t)?))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, tensor) in &self.tensors {
            let path = dir.join(tensor_file_name(name)?);
            fs::write(&path, encode_feature_map(tensor)?).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a bundle and checks every tensor file against its manifest digest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Unsupported {
                field: "bundle format_version",
                value: manifest.format_version,
            });
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            let path = dir.join(tensor_file_name(name)?);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::DigestMismatch {
                    name: name.clone(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            let t: FeatureMap<f32> = decode_feature_map(&bytes)?;
            check_entry(name, entry, &t, &actual)?;
            tensors.insert(name.clone(), t);
        }
        Ok(Self { manifest, tensors })
    }
}

fn check_entry(name: &str, entry: &TensorEntry, t: &FeatureMap<f32>, digest: &str) -> Result<()> {
    let shape = [t.channels(), t.height(), t.width()];
    if shape != entry.shape {
        return Err(Error::InvalidBundle(format!(
            "tensor {name} has shape {shape:?}, manifest says {:?}",
            entry.shape
        )));
    }
    if digest != entry.sha256 {
        return Err(Error::DigestMismatch {
            name: name.to_string(),
            expected: entry.sha256.clone(),
            actual: digest.to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            stage: BundleStage::Inlier,
            inlier_head: HeadKind::Discriminative,
            uem_head: None,
            num_classes: 2,
            feature_dim: 3,
            decoder_dim: 4,
            projection_dim: None,
            gmm_components: 1,
            config: serde_json::json!({"seed": 1}),
            tensors: BTreeMap::new(),
            frozen_digests: BTreeMap::new(),
        }
    }

    fn sample() -> ModelBundle {
        let mut b = ModelBundle::new(manifest());
        b.insert(
            "head.weight",
            FeatureMap::new(1, 2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap(),
        )
        .unwrap();
        b.insert("head.bias", FeatureMap::new(1, 1, 2, vec![0.1, 0.2]).unwrap())
            .unwrap();
        b
    }

    #[test]
    fn bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample();
        b.verify().unwrap();
        b.save(dir.path()).unwrap();
        let back = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.parameter_count(|n| n.starts_with("head.")), 8);
    }

    #[test]
    fn single_byte_mutation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join("head.weight.fmap");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ModelBundle::load(dir.path()),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let text = text.replacen('{', "{\n  \"bogus\": 1,", 1);
        fs::write(&path, text).unwrap();
        assert!(ModelBundle::load(dir.path()).is_err());
    }

    #[test]
    fn tensor_names_are_sanitized() {
        let mut b = ModelBundle::new(manifest());
        let t = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        assert!(b.insert("../escape", t.clone()).is_err());
        assert!(b.insert("", t).is_err());
    }
}
