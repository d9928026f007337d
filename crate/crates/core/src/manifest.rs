//! Case lists shared by the pipeline stages. Paths are stored relative to
//! the manifest file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::write_json;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestCase>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut ids: Vec<&str> = m.cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("cases", "case ids must be unique"));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_json(path, self)
    }

    pub fn case(&self, id: &str) -> Option<&ManifestCase> {
        self.cases.iter().find(|c| c.id == id)
    }
}

/// Resolves a manifest entry against the manifest's directory.
pub fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest_path.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}

/// `target` expressed relative to `base_dir` when it lies inside it.
pub fn relative_to(base_dir: &Path, target: &Path) -> String {
    target.strip_prefix(base_dir).unwrap_or(target).to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/manifest.json");
        let m = Manifest {
            cases: vec![ManifestCase {
                id: "a".into(),
                image: "a_image.json".into(),
                gt: Some("a_gt.json".into()),
                ..ManifestCase::default()
            }],
        };
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("boxes"));
        assert_eq!(Manifest::load(&path).unwrap(), m);
        assert_eq!(resolve(&path, "a_image.json"), dir.path().join("sub/a_image.json"));
        assert_eq!(relative_to(dir.path(), &dir.path().join("x/y.json")), "x/y.json");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"cases":[{"id":"a","image":"x"},{"id":"a","image":"y"}]}"#).unwrap();
        assert!(Manifest::load(&path).is_err());
    }
}
