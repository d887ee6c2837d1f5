//! JSON-lines dataset manifests.
//!
//! One object per line: `image_path`, `mask_path` (optional), `label`,
//! `split`. Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io, Label, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default)]
    pub mask_path: Option<String>,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            root: root.into(),
            entries,
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Entry counts keyed by `"label/split"`.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let key = format!(
                "{}/{}",
                serde_json::to_value(e.label).unwrap().as_str().unwrap(),
                serde_json::to_value(e.split).unwrap().as_str().unwrap()
            );
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }

    /// Decodes an entry; authentic entries without a mask get an all-false one.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let image = io::load_image(&self.resolve(&entry.image_path))?;
        let (_, h, w) = image.dims3()?;
        let mask = match &entry.mask_path {
            Some(m) => {
                let mask = io::decode_mask(&self.resolve(m))?;
                if mask.shape() != [1, h, w] {
                    return Err(Error::Shape(format!(
                        "mask {m} is {:?}, image {} is {h}x{w}",
                        mask.shape(),
                        entry.image_path
                    )));
                }
                mask
            }
            None => Tensor::full(&[1, h, w], false),
        };
        Sample::new(image, mask, entry.image_path.clone())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split)
            .into_iter()
            .map(|e| self.load_sample(e))
            .collect()
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_sample(e)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}", serde_json::to_string(e).expect("entry serializes"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest: every referenced file must exist and
/// manipulated entries must name a mask.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut m = DatasetManifest::new(root, Vec::new());
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry =
            serde_json::from_str(raw).map_err(|err| bad(line, err.to_string()))?;
        if e.label == Label::Manipulated && e.mask_path.is_none() {
            return Err(bad(line, "manipulated entry without mask_path".into()));
        }
        if !m.resolve(&e.image_path).is_file() {
            return Err(bad(line, format!("image not found: {}", e.image_path)));
        }
        if let Some(mp) = &e.mask_path {
            if !m.resolve(mp).is_file() {
                return Err(bad(line, format!("mask not found: {mp}")));
            }
        }
        m.entries.push(e);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn parses_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png", "c.png", "d.png", "cm.png", "dm.png"] {
            touch(dir.path(), f);
        }
        let text = r#"{"image_path":"a.png","label":"authentic","split":"train"}
{"image_path":"b.png","mask_path":null,"label":"authentic","split":"test"}
{"image_path":"c.png","mask_path":"cm.png","label":"manipulated","split":"train"}
{"image_path":"d.png","mask_path":"dm.png","label":"manipulated","split":"test"}
"#;
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, text).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.counts()["manipulated/train"], 1);
        assert_eq!(m.split(Split::Test).len(), 2);
    }

    #[test]
    fn missing_mask_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"image_path\":\"a.png\",\"label\":\"authentic\",\"split\":\"train\"}\n\
             {\"image_path\":\"a.png\",\"mask_path\":\"gone.png\",\"label\":\"manipulated\",\"split\":\"train\"}\n",
        )
        .unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn manipulated_needs_mask() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"image_path\":\"a.png\",\"label\":\"manipulated\",\"split\":\"test\"}\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        assert!(load_manifest(&dir.path().join("nope.jsonl")).is_err());
    }
}
