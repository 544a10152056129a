//! Human-editable run manifest (TOML): class names, file paths, optional
//! prompt-pool and vocabulary overrides, temperature override and seed.

use super::StoreError;
use crate::prompt::{Polarity, PromptPool, Vocabulary};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub id_class_names: Vec<String>,
    pub ood_label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub paths: ManifestPaths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PromptOverrides>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub train: PathBuf,
    pub id_test: PathBuf,
    pub ood_test: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negation: Option<Vec<String>>,
}

/// A manifest plus the directory it was loaded from; relative paths
/// resolve against that directory.
#[derive(Debug, Clone)]
pub struct ResolvedManifest {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| StoreError::Manifest(format!("serialize: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<ResolvedManifest, StoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| StoreError::Manifest(format!("parse: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let resolved = ResolvedManifest { manifest, dir };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl ResolvedManifest {
    pub fn validate(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        if m.id_class_names.len() < 2 {
            return Err(StoreError::Manifest(format!(
                "need at least 2 id class names, got {}",
                m.id_class_names.len()
            )));
        }
        for (i, name) in m.id_class_names.iter().enumerate() {
            if m.id_class_names[..i].contains(name) {
                return Err(StoreError::Manifest(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(tau) = m.tau {
            if !(tau > 0.0) {
                return Err(StoreError::Manifest(format!("tau must be positive, got {tau}")));
            }
        }
        for p in [
            Some(&m.paths.train),
            Some(&m.paths.id_test),
            Some(&m.paths.ood_test),
            m.paths.checkpoint.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(StoreError::Manifest(format!(
                    "referenced path {} not found",
                    full.display()
                )));
            }
        }
        // pool overrides must be valid template lists
        self.standard_pool()?;
        self.negation_pool()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn train_path(&self) -> PathBuf {
        self.resolve(&self.manifest.paths.train)
    }

    pub fn id_test_path(&self) -> PathBuf {
        self.resolve(&self.manifest.paths.id_test)
    }

    pub fn ood_test_path(&self) -> PathBuf {
        self.resolve(&self.manifest.paths.ood_test)
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.manifest.paths.checkpoint.as_ref().map(|p| self.resolve(p))
    }

    pub fn standard_pool(&self) -> Result<PromptPool, StoreError> {
        match self.manifest.prompts.as_ref().and_then(|p| p.standard.as_ref()) {
            Some(templates) => Ok(PromptPool::new(templates.clone(), Polarity::Standard)?),
            None => Ok(PromptPool::default_standard()),
        }
    }

    pub fn negation_pool(&self) -> Result<PromptPool, StoreError> {
        match self.manifest.prompts.as_ref().and_then(|p| p.negation.as_ref()) {
            Some(templates) => Ok(PromptPool::new(templates.clone(), Polarity::Negation)?),
            None => Ok(PromptPool::default_negation()),
        }
    }

    /// Vocabulary from the manifest, or rebuilt from the pools and class
    /// names when absent.
    pub fn vocabulary(&self) -> Result<Vocabulary, StoreError> {
        if let Some(words) = &self.manifest.vocabulary {
            return Ok(Vocabulary::from_words(words));
        }
        let std_pool = self.standard_pool()?;
        let no_pool = self.negation_pool()?;
        Ok(build_vocabulary(&std_pool, &no_pool, &self.manifest.id_class_names))
    }
}

/// Deterministic vocabulary: template words of both pools in order, then
/// class names.
pub fn build_vocabulary(
    std_pool: &PromptPool,
    no_pool: &PromptPool,
    class_names: &[String],
) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for t in std_pool.templates().iter().chain(no_pool.templates()) {
        for w in t.split_whitespace() {
            if w != "{}" {
                words.push(w.to_string());
            }
        }
    }
    words.extend(class_names.iter().cloned());
    Vocabulary::from_words(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::write(path, b"x").unwrap();
    }

    fn sample_manifest(dir: &Path) -> Manifest {
        touch(&dir.join("train.clpn"));
        touch(&dir.join("id_test.clpn"));
        touch(&dir.join("ood_test.clpn"));
        Manifest {
            seed: 42,
            id_class_names: vec!["object0".into(), "object1".into()],
            ood_label: "novel".into(),
            tau: None,
            paths: ManifestPaths {
                train: "train.clpn".into(),
                id_test: "id_test.clpn".into(),
                ood_test: "ood_test.clpn".into(),
                checkpoint: None,
            },
            prompts: None,
            vocabulary: None,
        }
    }

    #[test]
    fn round_trip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        let r = Manifest::load(&path).unwrap();
        assert_eq!(r.manifest.seed, 42);
        assert_eq!(r.train_path(), dir.path().join("train.clpn"));
        assert!(r.checkpoint_path().is_none());
    }

    #[test]
    fn missing_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample_manifest(dir.path());
        m.paths.id_test = "nope.clpn".into();
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(StoreError::Manifest(_))));
    }

    #[test]
    fn too_few_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample_manifest(dir.path());
        m.id_class_names = vec!["only".into()];
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(StoreError::Manifest(_))));
    }

    #[test]
    fn pool_overrides_validated() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample_manifest(dir.path());
        m.prompts = Some(PromptOverrides {
            standard: Some(vec!["no placeholder".into()]),
            negation: None,
        });
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());
    }

    #[test]
    fn vocabulary_covers_pools_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        let r = Manifest::load(&path).unwrap();
        let v = r.vocabulary().unwrap();
        assert_ne!(v.lookup("photo"), 0);
        assert_ne!(v.lookup("without"), 0);
        assert_ne!(v.lookup("object0"), 0);
        assert_eq!(v.lookup("zzz"), 0);
    }
}
