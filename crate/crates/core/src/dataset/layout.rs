//! On-disk dataset layout: `<root>/<category>/<id>.{img.pgm,density.pfm,fix.pgm}`
//! plus a `manifest.json` index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_image, read_pfm, write_image, write_pfm};
use super::{Blob, Dataset, DatasetSpec, SaliencySample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub category: usize,
    pub image: String,
    pub density: String,
    pub fixations: String,
    #[serde(default)]
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: Option<DatasetSpec>,
    pub seed: Option<u64>,
    pub category_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

fn relative_paths(category: &str, id: &str) -> [String; 3] {
    [
        format!("{category}/{id}.img.pgm"),
        format!("{category}/{id}.density.pfm"),
        format!("{category}/{id}.fix.pgm"),
    ]
}

/// Writes every sample and the manifest below `root`.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<Manifest> {
    for name in &data.category_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(data.len());
    for s in &data.samples {
        let name = data
            .category_names
            .get(s.category)
            .ok_or_else(|| Error::usage(format!("sample {} has unknown category {}", s.id, s.category)))?;
        let [img, den, fix] = relative_paths(name, &s.id);
        write_image(&root.join(&img), &s.image)?;
        write_pfm(&root.join(&den), &s.density)?;
        write_image(&root.join(&fix), &s.fixations)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            category: s.category,
            image: img,
            density: den,
            fixations: fix,
            blobs: s.blobs.clone(),
        });
    }
    let manifest = Manifest {
        spec: data.spec.clone(),
        seed: data.spec.as_ref().map(|s| s.seed),
        category_names: data.category_names.clone(),
        samples: entries,
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&serde_json::to_value(&manifest)?)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        offset: 0,
        message: e.to_string(),
    })
}

/// Loads a dataset written by [`write_dataset`], validating shapes and labels.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let k = manifest.category_names.len();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        if e.category >= k {
            return Err(Error::config(format!("sample {} has category {} of {k}", e.id, e.category)));
        }
        let image = read_image(&root.join(&e.image))?;
        let density = read_pfm(&root.join(&e.density))?;
        let fixations = read_image(&root.join(&e.fixations))?;
        let hw = &image.shape()[1..];
        if &density.shape()[1..] != hw || fixations.shape() != density.shape() {
            return Err(Error::config(format!(
                "sample {}: image {:?}, density {:?} and fixations {:?} disagree",
                e.id,
                image.shape(),
                density.shape(),
                fixations.shape()
            )));
        }
        let fixations = fixations.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        if fixations.sum() == 0.0 {
            return Err(Error::config(format!("sample {} has no fixations", e.id)));
        }
        samples.push(SaliencySample {
            id: e.id,
            category: e.category,
            image,
            density,
            fixations,
            blobs: e.blobs,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        category_names: manifest.category_names,
        samples,
    })
}
