//! Benchmark generation: a clean source split plus corrupted target splits
//! drawn from the same layout distribution.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use super::corrupt::{apply_blur, apply_color_shift, apply_fog};
use super::manifest::{
    save_png, DatasetManifest, ManifestAnnotation, ManifestCategory, ManifestImage,
};
use super::shapes::{self, render_image};
use super::{mix_seed, stream_rng, ShiftConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub n_train_source: usize,
    pub n_train_target: usize,
    pub n_val_target: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train_source: 200,
            n_train_target: 200,
            n_val_target: 100,
            image_size: 64,
            n_classes: 5,
            shift: ShiftConfig::default(),
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_source < 1 || self.n_train_target < 1 || self.n_val_target < 1 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.n_classes < 2 || self.n_classes > shapes::MAX_CLASSES {
            return Err(Error::Config(format!(
                "n_classes {} outside [2, {}]",
                self.n_classes,
                shapes::MAX_CLASSES
            )));
        }
        self.shift.validate()
    }
}

pub const SPLIT_SOURCE_TRAIN: &str = "source-train";
pub const SPLIT_TARGET_TRAIN: &str = "target-train";
pub const SPLIT_TARGET_VAL: &str = "target-val";

/// Render the clean layout for an image id (identical for every run with the
/// same generation seed).
fn render_for_id(
    cfg: &GenConfig,
    image_id: i64,
) -> (Array3<f32>, Vec<(usize, super::BoxCxcywh)>) {
    let mut rng = stream_rng(&[cfg.seed, image_id as u64]);
    render_image(&mut rng, cfg.image_size, cfg.n_classes)
}

/// Corrupt one clean render per the shift config. Fog strength carries a
/// +-10% per-image jitter seeded by (shift seed, image id).
pub fn corrupt_image(
    img: &Array3<f32>,
    shift: &ShiftConfig,
    image_id: i64,
) -> Result<Array3<f32>> {
    let mut rng = stream_rng(&[shift.seed, image_id as u64]);
    let jitter: f32 = rng.gen_range(0.9..=1.1);
    let intensity = (shift.fog_intensity * jitter).clamp(0.0, 1.0);
    let mut out = apply_fog(img, intensity)?;
    if shift.color_shift != [0.0; 3] {
        out = apply_color_shift(&out, shift.color_shift);
    }
    if shift.blur_radius > 0.0 {
        out = apply_blur(&out, shift.blur_radius);
    }
    shapes::quantize_image(&mut out);
    Ok(out)
}

fn build_split(
    root: &Path,
    split: &str,
    cfg: &GenConfig,
    id_base: i64,
    count: usize,
    corrupt: bool,
) -> Result<DatasetManifest> {
    let categories = (0..cfg.n_classes)
        .map(|id| ManifestCategory { id, name: shapes::SHAPE_NAMES[id].to_string() })
        .collect();
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        images: Vec::with_capacity(count),
        annotations: Vec::new(),
        categories,
        seed: cfg.seed,
    };
    let images_dir = manifest.split_dir().join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.clone(), e))?;

    for i in 0..count {
        let image_id = id_base + i as i64;
        let (clean, objects) = render_for_id(cfg, image_id);
        let pixels = if corrupt { corrupt_image(&clean, &cfg.shift, image_id)? } else { clean };
        let record = ManifestImage {
            id: image_id,
            file_name: format!("{image_id}.png"),
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
        };
        save_png(&manifest.image_path(&record), &pixels)?;
        for (class_id, bbox) in objects {
            manifest.annotations.push(ManifestAnnotation {
                image_id,
                bbox: [bbox.cx as f64, bbox.cy as f64, bbox.w as f64, bbox.h as f64],
                category_id: class_id,
            });
        }
        manifest.images.push(record);
    }
    manifest.save()?;
    Ok(manifest)
}

/// Generate the three benchmark splits under `root`:
/// clean source-train, corrupted target-train, corrupted target-val.
pub fn generate_synthetic_dataset(
    root: &Path,
    cfg: &GenConfig,
) -> Result<[DatasetManifest; 3]> {
    cfg.validate()?;
    // distinct layout streams per split via id ranges
    let src_base = 0i64;
    let tgt_base = mix_seed(&[1]) as i64 % 1_000_000 + 1_000_000;
    let val_base = tgt_base + cfg.n_train_target as i64;
    let source = build_split(root, SPLIT_SOURCE_TRAIN, cfg, src_base, cfg.n_train_source, false)?;
    let target = build_split(root, SPLIT_TARGET_TRAIN, cfg, tgt_base, cfg.n_train_target, true)?;
    let val = build_split(root, SPLIT_TARGET_VAL, cfg, val_base, cfg.n_val_target, true)?;
    Ok([source, target, val])
}
