//! Split manifests: the on-disk JSON schema and PNG image IO.
//!
//! Layout: `<root>/<split>/images/<image_id>.png` + `<root>/<split>/manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, BoxCxcywh};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: i64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAnnotation {
    pub image_id: i64,
    /// Normalized (cx, cy, w, h).
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCategory {
    pub id: usize,
    pub name: String,
}

/// The exact JSON written to `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    images: Vec<ManifestImage>,
    annotations: Vec<ManifestAnnotation>,
    categories: Vec<ManifestCategory>,
    seed: u64,
}

/// One split of the benchmark: records plus where they live on disk.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub images: Vec<ManifestImage>,
    pub annotations: Vec<ManifestAnnotation>,
    pub categories: Vec<ManifestCategory>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.split_dir().join("manifest.json")
    }

    pub fn image_path(&self, record: &ManifestImage) -> PathBuf {
        self.split_dir().join("images").join(&record.file_name)
    }

    /// Group annotations per image, in image-record order.
    pub fn annotation_sets(&self) -> Result<Vec<AnnotationSet>> {
        let mut by_image: BTreeMap<i64, AnnotationSet> = self
            .images
            .iter()
            .map(|im| (im.id, AnnotationSet::empty(im.id)))
            .collect();
        for ann in &self.annotations {
            let set = by_image.get_mut(&ann.image_id).ok_or_else(|| {
                Error::Format(format!("annotation references unknown image {}", ann.image_id))
            })?;
            set.boxes.push(BoxCxcywh::new(
                ann.bbox[0] as f32,
                ann.bbox[1] as f32,
                ann.bbox[2] as f32,
                ann.bbox[3] as f32,
            ));
            set.class_ids.push(ann.category_id);
        }
        self.images
            .iter()
            .map(|im| {
                let set = by_image.remove(&im.id).unwrap();
                set.validate()?;
                Ok(set)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for im in &self.images {
            if !seen.insert(im.id) {
                return Err(Error::Format(format!("duplicate image id {}", im.id)));
            }
        }
        let cat_ids: std::collections::BTreeSet<usize> =
            self.categories.iter().map(|c| c.id).collect();
        for ann in &self.annotations {
            if !cat_ids.contains(&ann.category_id) {
                return Err(Error::Format(format!(
                    "annotation category {} not in the class table",
                    ann.category_id
                )));
            }
            if !seen.contains(&ann.image_id) {
                return Err(Error::Format(format!(
                    "annotation references unknown image {}",
                    ann.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let dir = self.split_dir();
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir.clone(), e))?;
        let file = ManifestFile {
            images: self.images.clone(),
            annotations: self.annotations.clone(),
            categories: self.categories.clone(),
            seed: self.seed,
        };
        let path = self.manifest_path();
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load from `<split>/manifest.json` (or a directory containing it).
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let split_dir = manifest_path
            .parent()
            .ok_or_else(|| Error::Format(format!("{} has no parent dir", manifest_path.display())))?;
        let split = split_dir
            .file_name()
            .ok_or_else(|| Error::Format(format!("{} has no split dir", manifest_path.display())))?
            .to_string_lossy()
            .to_string();
        let root = split_dir.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.clone(), e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let manifest = Self {
            root,
            split,
            images: file.images,
            annotations: file.annotations,
            categories: file.categories,
            seed: file.seed,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Write a CHW float image in [0,1] as 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(c, 3, "expected an RGB image");
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                buf.push((img[(ci, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let out: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| Error::Format(format!("{}: png encode: {e}", path.display())))?;
    Ok(())
}

/// Load an 8-bit RGB PNG as CHW floats in [0,1].
pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: png decode: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ci in 0..3 {
            out[(ci, y as usize, x as usize)] = px.0[ci] as f32 / 255.0;
        }
    }
    Ok(out)
}
