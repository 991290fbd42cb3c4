//! In-memory dataset with seeded-shuffle batch iteration.

use std::path::Path;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;

use super::manifest::{load_png, DatasetManifest};
use super::{stream_rng, AnnotationSet, Domain, ImageBatch};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub domain: Domain,
    images: Vec<Array3<f32>>,
    annotations: Vec<AnnotationSet>,
}

impl Dataset {
    /// Load every image of a split into memory. `path` may be the split
    /// directory or its `manifest.json`.
    pub fn load(path: &Path, domain: Domain) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let annotations = manifest.annotation_sets()?;
        let mut images = Vec::with_capacity(manifest.images.len());
        for record in &manifest.images {
            let img_path = manifest.image_path(record);
            if !img_path.exists() {
                return Err(Error::io(
                    img_path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
                ));
            }
            let img = load_png(&img_path)?;
            if img.shape()[1] != record.height as usize || img.shape()[2] != record.width as usize {
                return Err(Error::Format(format!(
                    "{}: decoded size {}x{} disagrees with manifest {}x{}",
                    img_path.display(),
                    img.shape()[2],
                    img.shape()[1],
                    record.width,
                    record.height
                )));
            }
            images.push(img);
        }
        Ok(Self { manifest, domain, images, annotations })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.categories.len()
    }

    pub fn image(&self, i: usize) -> &Array3<f32> {
        &self.images[i]
    }

    pub fn annotations(&self, i: usize) -> &AnnotationSet {
        &self.annotations[i]
    }

    pub fn annotation_sets(&self) -> &[AnnotationSet] {
        &self.annotations
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[1], s[2])
    }

    /// Dataset indices grouped into batches in seeded-shuffle order.
    /// The same (seed, epoch) always produces the same order.
    pub fn batch_indices(&self, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
        assert!(batch_size > 0);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream_rng(&[epoch_seed]);
        order.shuffle(&mut rng);
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Assemble a batch from dataset indices.
    pub fn make_batch(&self, idxs: &[usize]) -> (ImageBatch, Vec<AnnotationSet>) {
        assert!(!idxs.is_empty());
        let (h, w) = self.image_size();
        let mut pixels = Array4::<f32>::zeros((idxs.len(), 3, h, w));
        let mut ids = Vec::with_capacity(idxs.len());
        let mut annots = Vec::with_capacity(idxs.len());
        for (bi, &i) in idxs.iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), bi).assign(&self.images[i]);
            ids.push(self.annotations[i].image_id);
            annots.push(self.annotations[i].clone());
        }
        (
            ImageBatch { pixels, domain: self.domain, image_ids: ids },
            annots,
        )
    }

    /// Batch from raw images (used after augmentation).
    pub fn batch_from_images(
        images: &[Array3<f32>],
        ids: &[i64],
        domain: Domain,
    ) -> ImageBatch {
        let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
        let mut pixels = Array4::<f32>::zeros((images.len(), 3, h, w));
        for (bi, img) in images.iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), bi).assign(img);
        }
        ImageBatch { pixels, domain, image_ids: ids.to_vec() }
    }
}
