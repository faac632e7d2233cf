use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, LabelPool};
use crate::error::{invalid, GedError, Result};
use crate::imageio;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub annotations: Vec<PathBuf>,
}

/// `manifest.json`: relative paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    /// Dataset-wide (min, max) edge-pixel count over every combined label.
    pub granularity_bounds: [u64; 2],
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GedError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.granularity_bounds;
        if lo > hi {
            return Err(invalid(format!("granularity bounds reversed: [{lo}, {hi}]")));
        }
        for entry in &self.entries {
            if entry.annotations.is_empty() {
                return Err(invalid(format!("{}: no annotations listed", entry.id)));
            }
            for p in std::iter::once(&entry.image).chain(&entry.annotations) {
                let resolved = self.resolve(p);
                if !resolved.exists() {
                    return Err(GedError::MissingFile(resolved));
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest as pretty JSON with a trailing newline.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn bounds(&self) -> (u64, u64) {
        (self.granularity_bounds[0], self.granularity_bounds[1])
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<AnnotatedImage> {
        let image = imageio::load_rgb(&self.resolve(&entry.image))?;
        let annotations = entry
            .annotations
            .iter()
            .map(|p| imageio::load_edge_map(&self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        AnnotatedImage::new(entry.id.clone(), image, annotations)
    }

    pub fn load_all(&self) -> Result<Vec<AnnotatedImage>> {
        self.entries.par_iter().map(|e| self.load_sample(e)).collect()
    }
}

/// Min and max edge-pixel count over every combined label of every image.
pub fn dataset_granularity_bounds(samples: &[AnnotatedImage]) -> Result<(u64, u64)> {
    let mut lo = u64::MAX;
    let mut hi = 0;
    for sample in samples {
        for c in LabelPool::build(sample)?.counts() {
            lo = lo.min(c);
            hi = hi.max(c);
        }
    }
    if samples.is_empty() {
        return Err(invalid("no samples to compute bounds from"));
    }
    Ok((lo, hi))
}

/// Reads the optional caption sidecar `{"id": caption}`.
pub fn load_captions(path: &Path) -> Result<HashMap<String, String>> {
    if !path.exists() {
        return Err(GedError::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_field_names() {
        let m = DatasetManifest {
            split: Split::Train,
            granularity_bounds: [3, 9],
            entries: vec![ManifestEntry {
                id: "a".into(),
                image: "images/a.png".into(),
                annotations: vec!["gt/a_0.png".into()],
            }],
            root: PathBuf::new(),
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["split"], "train");
        assert_eq!(v["granularity_bounds"], serde_json::json!([3, 9]));
        assert_eq!(v["entries"][0]["annotations"][0], "gt/a_0.png");
        assert!(v.get("root").is_none());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"{"split":"test","granularity_bounds":[0,1],"entries":[{"id":"x","image":"nope.png","annotations":["gt.png"]}]}"#,
        )
        .unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(GedError::MissingFile(_))));
    }

    #[test]
    fn reversed_bounds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"split":"train","granularity_bounds":[5,1],"entries":[]}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(GedError::Validation(_))));
    }
}
