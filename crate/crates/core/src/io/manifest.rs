//! TOML dataset manifests.
//!
//! ```toml
//! num_labels = 4
//!
//! [[train]]
//! id = "train-000"
//! image = "images/train-000.nii.gz"
//! labels = "labels/train-000.nii.gz"
//!
//! [[unlabeled]]
//! id = "unlabeled-000"
//! image = "images/unlabeled-000.nii.gz"
//! ```
//!
//! Relative paths resolve against `root`, itself relative to the manifest's
//! directory, or the manifest's directory when `root` is absent.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{read_labelmap, read_volume, write_labelmap, write_volume};
use super::{read_toml, write_toml};
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::volume::{Atlas, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Directory the entry paths are relative to; defaults to the manifest's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub num_labels: usize,
    /// When set, every image must carry exactly this spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub train: Vec<ManifestEntry>,
    #[serde(default)]
    pub validation: Vec<ManifestEntry>,
    #[serde(default)]
    pub test: Vec<ManifestEntry>,
    #[serde(default)]
    pub unlabeled: Vec<ManifestEntry>,
}

impl Manifest {
    fn splits(&self) -> [(&'static str, &[ManifestEntry]); 4] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
            ("unlabeled", &self.unlabeled),
        ]
    }

    /// Ids must be unique across all splits and labelled splits need labels.
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::config("num_labels must be >= 2"));
        }
        let mut ids = BTreeSet::new();
        for (split, entries) in self.splits() {
            for e in entries {
                if !ids.insert(e.id.as_str()) {
                    return Err(Error::input(format!(
                        "subject {} listed more than once (again in {split})",
                        e.id
                    )));
                }
                if split != "unlabeled" && e.labels.is_none() {
                    return Err(Error::input(format!("{split} subject {} has no labels", e.id)));
                }
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = read_toml(path)?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.validate()?;
    write_toml(path, m)
}

fn resolve(base: &Path, p: &Path, id: &str) -> Result<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(Error::MissingFile {
            context: format!("manifest entry {id}"),
            path: full,
        });
    }
    Ok(full)
}

fn load_atlas(base: &Path, e: &ManifestEntry, num_labels: usize) -> Result<Atlas> {
    let image = read_volume(&resolve(base, &e.image, &e.id)?)?;
    let labels_path = e.labels.as_ref().expect("validated");
    let labels = read_labelmap(&resolve(base, labels_path, &e.id)?)?;
    let labels = if labels.num_labels() == num_labels {
        labels
    } else {
        labels.with_num_labels(num_labels)?
    };
    Atlas::new(e.id.clone(), image, labels)
}

/// Load every file a manifest references. Missing files are reported with
/// the entry id and resolved path before any split is returned.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let base_buf = match &m.root {
        Some(r) if r.is_absolute() => r.clone(),
        Some(r) => dir.join(r),
        None => dir.to_path_buf(),
    };
    let base = base_buf.as_path();
    let atlases = |entries: &[ManifestEntry]| -> Result<Vec<Atlas>> {
        entries.iter().map(|e| load_atlas(base, e, m.num_labels)).collect()
    };
    let ds = Dataset {
        train: atlases(&m.train)?,
        validation: atlases(&m.validation)?,
        test: atlases(&m.test)?,
        unlabeled: m
            .unlabeled
            .iter()
            .map(|e| read_volume(&resolve(base, &e.image, &e.id)?))
            .collect::<Result<Vec<Volume>>>()?,
    };
    ds.validate()?;
    if let Some(sp) = &m.spacing {
        let images = ds
            .train
            .iter()
            .chain(&ds.validation)
            .chain(&ds.test)
            .map(|a| &a.image)
            .chain(&ds.unlabeled);
        if let Some(v) = images.into_iter().find(|v| v.spacing() != sp.as_slice()) {
            return Err(Error::input(format!(
                "image spacing {:?} differs from manifest spacing {sp:?}",
                v.spacing()
            )));
        }
    }
    Ok(ds)
}

/// Write every subject as NIfTI under `dir` and a `manifest.toml` that
/// references them. Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    let entry = |a: &Atlas| -> Result<ManifestEntry> {
        let image = PathBuf::from("images").join(format!("{}.nii.gz", a.id));
        let labels = PathBuf::from("labels").join(format!("{}.nii.gz", a.id));
        write_volume(&a.image, &dir.join(&image))?;
        write_labelmap(&a.labels, &dir.join(&labels))?;
        Ok(ManifestEntry {
            id: a.id.clone(),
            image,
            labels: Some(labels),
        })
    };
    let unlabeled = ds
        .unlabeled
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let id = format!("unlabeled-{k:03}");
            let image = PathBuf::from("images").join(format!("{id}.nii.gz"));
            write_volume(v, &dir.join(&image))?;
            Ok(ManifestEntry {
                id,
                image,
                labels: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        root: None,
        num_labels: ds.num_labels(),
        spacing: ds.train.first().map(|a| a.image.spacing().to_vec()),
        train: ds.train.iter().map(entry).collect::<Result<_>>()?,
        validation: ds.validation.iter().map(entry).collect::<Result<_>>()?,
        test: ds.test.iter().map(entry).collect::<Result<_>>()?,
        unlabeled,
    };
    let path = dir.join("manifest.toml");
    write_manifest(&m, &path)?;
    Ok(path)
}
