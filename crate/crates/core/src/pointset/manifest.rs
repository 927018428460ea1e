use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_cloud, CloudFormat, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    /// Cloud file, relative to the manifest directory unless absolute.
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub subject: u32,
    pub pose: u32,
    pub split: Split,
}

/// A dataset: shapes sharing one correspondence convention, each assigned to
/// exactly one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub shapes: Vec<ShapeEntry>,
    pub n_classes: usize,
    #[serde(default = "one")]
    pub units_scale: f64,
    pub format: CloudFormat,
    /// Directory relative paths are resolved against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

fn one() -> f64 {
    1.0
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no shapes".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.shapes {
            if !seen.insert(&s.cloud) {
                return Err(Error::InvalidArgument(format!(
                    "shape {} listed twice",
                    s.cloud.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Indices into `shapes` belonging to one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_shape(&self, index: usize) -> Result<PointCloud> {
        let entry = &self.shapes[index];
        let path = self.resolve(&entry.cloud);
        let mut cloud = load_cloud(&path, self.format)?;
        if let Some(lp) = &entry.labels {
            let lp = self.resolve(lp);
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            let labels = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    l.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::parse(&lp, format!("line {}", i + 1), "not an integer"))
                })
                .collect::<Result<Vec<_>>>()?;
            cloud.labels = Some(labels);
        }
        cloud.validate(Some(self.n_classes))?;
        Ok(cloud)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PointCloud>> {
        self.split_indices(split)
            .into_iter()
            .map(|i| self.load_shape(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_split_lookup() {
        let m = DatasetManifest {
            shapes: vec![
                ShapeEntry {
                    cloud: "a.xyz".into(),
                    labels: None,
                    subject: 0,
                    pose: 0,
                    split: Split::Train,
                },
                ShapeEntry {
                    cloud: "b.xyz".into(),
                    labels: Some("b.labels".into()),
                    subject: 1,
                    pose: 0,
                    split: Split::Test,
                },
            ],
            n_classes: 16,
            units_scale: 1.0,
            format: CloudFormat::XyzAscii,
            root: PathBuf::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.shapes, m.shapes);
        assert_eq!(back.root, dir.path());
        assert_eq!(back.split_indices(Split::Test), vec![1]);
        assert!(back.split_indices(Split::Val).is_empty());
    }

    #[test]
    fn duplicate_shapes_rejected() {
        let e = ShapeEntry {
            cloud: "a.xyz".into(),
            labels: None,
            subject: 0,
            pose: 0,
            split: Split::Train,
        };
        let m = DatasetManifest {
            shapes: vec![
                e.clone(),
                ShapeEntry {
                    split: Split::Test,
                    ..e
                },
            ],
            n_classes: 2,
            units_scale: 1.0,
            format: CloudFormat::XyzAscii,
            root: PathBuf::new(),
        };
        assert!(m.validate().is_err());
    }
}
