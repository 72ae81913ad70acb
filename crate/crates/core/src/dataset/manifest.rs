use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk manifest layout; paths are relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ManifestFile {
    pub objects: Vec<String>,
    pub affordances: Vec<String>,
    pub points: Vec<PointFileEntry>,
    pub images: Vec<ImageFileEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PointFileEntry {
    pub file: String,
    pub object: String,
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ImageFileEntry {
    pub file: String,
    pub object: String,
    pub affordance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEntry {
    pub file: PathBuf,
    pub object: String,
    /// affordance → annotation file
    pub labels: BTreeMap<String, PathBuf>,
}

impl PointEntry {
    /// Instance id derived from the file stem.
    pub fn id(&self) -> String {
        stem(&self.file)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub file: PathBuf,
    pub object: String,
    pub affordance: String,
}

impl ImageEntry {
    /// Image id derived from the file stem; keys transcripts and fixtures.
    pub fn id(&self) -> String {
        stem(&self.file)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Validated dataset manifest with paths resolved against its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub objects: Vec<String>,
    pub affordances: Vec<String>,
    pub points: Vec<PointEntry>,
    pub images: Vec<ImageEntry>,
}

impl Manifest {
    /// (object, affordance) cells that have both images and annotations.
    pub fn cells(&self) -> BTreeSet<(String, String)> {
        self.images
            .iter()
            .map(|i| (i.object.clone(), i.affordance.clone()))
            .collect()
    }

    pub fn image_by_id(&self, id: &str) -> Option<(usize, &ImageEntry)> {
        self.images.iter().enumerate().find(|(_, e)| e.id() == id)
    }

    pub(crate) fn to_file(&self) -> ManifestFile {
        let rel = |p: &Path| {
            p.strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        ManifestFile {
            objects: self.objects.clone(),
            affordances: self.affordances.clone(),
            points: self
                .points
                .iter()
                .map(|p| PointFileEntry {
                    file: rel(&p.file),
                    object: p.object.clone(),
                    labels: p.labels.iter().map(|(a, f)| (a.clone(), rel(f))).collect(),
                })
                .collect(),
            images: self
                .images
                .iter()
                .map(|i| ImageFileEntry {
                    file: rel(&i.file),
                    object: i.object.clone(),
                    affordance: i.affordance.clone(),
                })
                .collect(),
        }
    }

    /// Checks category references, file existence and cell completeness.
    pub fn validate(&self) -> Result<()> {
        let objects: BTreeSet<&str> = self.objects.iter().map(String::as_str).collect();
        let affordances: BTreeSet<&str> = self.affordances.iter().map(String::as_str).collect();
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Validation(format!("{what} file not found: {}", p.display())))
            }
        };

        let mut point_cells = BTreeSet::new();
        for (i, entry) in self.points.iter().enumerate() {
            if !objects.contains(entry.object.as_str()) {
                return Err(Error::Validation(format!(
                    "points[{i}] ({}): unknown object category `{}`",
                    entry.file.display(),
                    entry.object
                )));
            }
            exists(&entry.file, "point")?;
            for (aff, file) in &entry.labels {
                if !affordances.contains(aff.as_str()) {
                    return Err(Error::Validation(format!(
                        "points[{i}] ({}): unknown affordance category `{aff}`",
                        entry.file.display()
                    )));
                }
                exists(file, "annotation")?;
                point_cells.insert((entry.object.clone(), aff.clone()));
            }
        }

        let mut image_cells = BTreeSet::new();
        for (i, entry) in self.images.iter().enumerate() {
            if !objects.contains(entry.object.as_str()) {
                return Err(Error::Validation(format!(
                    "images[{i}] ({}): unknown object category `{}`",
                    entry.file.display(),
                    entry.object
                )));
            }
            if !affordances.contains(entry.affordance.as_str()) {
                return Err(Error::Validation(format!(
                    "images[{i}] ({}): unknown affordance category `{}`",
                    entry.file.display(),
                    entry.affordance
                )));
            }
            exists(&entry.file, "image")?;
            image_cells.insert((entry.object.clone(), entry.affordance.clone()));
        }

        if let Some((o, a)) = point_cells.symmetric_difference(&image_cells).next() {
            let side = if point_cells.contains(&(o.clone(), a.clone())) {
                "annotations but no images"
            } else {
                "images but no annotations"
            };
            return Err(Error::Validation(format!("cell ({o}, {a}) has {side}")));
        }
        Ok(())
    }
}

/// Loads and validates `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = Manifest {
        objects: file.objects,
        affordances: file.affordances,
        points: file
            .points
            .into_iter()
            .map(|p| PointEntry {
                file: root.join(&p.file),
                object: p.object,
                labels: p.labels.into_iter().map(|(a, f)| (a, root.join(f))).collect(),
            })
            .collect(),
        images: file
            .images
            .into_iter()
            .map(|i| ImageEntry {
                file: root.join(&i.file),
                object: i.object,
                affordance: i.affordance,
            })
            .collect(),
        root,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes a manifest with paths relative to `manifest.root`.
pub(crate) fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest.to_file())?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn touch(dir: &Path, name: &str) {
        let p = dir.join(name);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, "").unwrap();
    }

    fn small_manifest(dir: &Path) -> serde_json::Value {
        for f in [
            "p/a.txt", "p/a_grasp.txt", "p/a_pour.txt", "p/b.txt", "p/b_grasp.txt", "p/c.txt",
            "p/c_cut.txt", "p/d.txt", "p/d_grasp.txt", "i/1.png", "i/2.png", "i/3.png", "i/4.png",
        ] {
            touch(dir, f);
        }
        json!({
            "objects": ["mug", "knife"],
            "affordances": ["grasp", "pour", "cut"],
            "points": [
                {"file": "p/a.txt", "object": "mug", "labels": {"grasp": "p/a_grasp.txt", "pour": "p/a_pour.txt"}},
                {"file": "p/b.txt", "object": "mug", "labels": {"grasp": "p/b_grasp.txt"}},
                {"file": "p/c.txt", "object": "knife", "labels": {"cut": "p/c_cut.txt"}},
                {"file": "p/d.txt", "object": "knife", "labels": {"grasp": "p/d_grasp.txt"}}
            ],
            "images": [
                {"file": "i/1.png", "object": "mug", "affordance": "grasp"},
                {"file": "i/2.png", "object": "mug", "affordance": "pour"},
                {"file": "i/3.png", "object": "knife", "affordance": "cut"},
                {"file": "i/4.png", "object": "knife", "affordance": "grasp"}
            ]
        })
    }

    fn write(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn loads_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let v = small_manifest(dir.path());
        let m = load_manifest(&write(dir.path(), &v)).unwrap();
        assert_eq!(m.points.len(), 4);
        assert_eq!(m.images.len(), 4);
        assert_eq!(m.objects, vec!["mug", "knife"]);
        assert_eq!(m.images[2].id(), "3");
        assert!(m.points[0].labels["pour"].ends_with("p/a_pour.txt"));
    }

    #[test]
    fn missing_annotation_file_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = small_manifest(dir.path());
        std::fs::remove_file(dir.path().join("p/b_grasp.txt")).unwrap();
        let err = load_manifest(&write(dir.path(), &v)).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("b_grasp.txt"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_category_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = small_manifest(dir.path());
        v["images"][1]["affordance"] = json!("sit");
        match load_manifest(&write(dir.path(), &v)).unwrap_err() {
            Error::Validation(msg) => assert!(msg.contains("images[1]") && msg.contains("sit"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incomplete_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = small_manifest(dir.path());
        v["images"].as_array_mut().unwrap().remove(2);
        match load_manifest(&write(dir.path(), &v)).unwrap_err() {
            Error::Validation(msg) => assert!(msg.contains("(knife, cut)"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, "{\n  \"objects\": [\"mug\",\n  ]\n}").unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = small_manifest(dir.path());
        let m = load_manifest(&write(dir.path(), &v)).unwrap();
        let out = dir.path().join("copy.json");
        write_manifest(&m, &out).unwrap();
        let again = load_manifest(&out).unwrap();
        assert_eq!(m, again);
    }
}
