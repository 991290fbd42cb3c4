//! Synthetic domain-shift benchmark: generation, persistence, loading, and
//! the weak/strong augmentation policies.

pub mod augment;
pub mod corrupt;
pub mod generate;
pub mod loader;
pub mod manifest;
pub mod shapes;

pub use augment::{augment_strong, augment_weak, StrongExtras, WeakAug};
pub use corrupt::{apply_blur, apply_color_shift, apply_fog};
pub use generate::{generate_synthetic_dataset, GenConfig};
pub use loader::Dataset;
pub use manifest::DatasetManifest;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the shift a batch comes from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Normalized center-format box. All coordinates live in the unit square.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxCxcywh {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn to_xyxy(self) -> [f32; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f32 {
        self.w * self.h
    }

    /// Intersect with the unit square; returns None when nothing remains.
    pub fn clip_unit(self) -> Option<Self> {
        let [x1, y1, x2, y2] = self.to_xyxy();
        let (x1, y1) = (x1.max(0.0), y1.max(0.0));
        let (x2, y2) = (x2.min(1.0), y2.min(1.0));
        if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
            return None;
        }
        Some(Self::from_xyxy(x1, y1, x2, y2))
    }

    /// Fully inside the unit square with positive extent.
    pub fn is_valid(self) -> bool {
        let [x1, y1, x2, y2] = self.to_xyxy();
        self.w > 0.0
            && self.h > 0.0
            && x1 >= -1e-6
            && y1 >= -1e-6
            && x2 <= 1.0 + 1e-6
            && y2 <= 1.0 + 1e-6
    }
}

/// Ground-truth (or pseudo-label) boxes and classes for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub image_id: i64,
    pub boxes: Vec<BoxCxcywh>,
    pub class_ids: Vec<usize>,
}

impl AnnotationSet {
    pub fn empty(image_id: i64) -> Self {
        Self { image_id, boxes: Vec::new(), class_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Format(format!(
                "image {}: {} boxes vs {} class ids",
                self.image_id,
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        for b in &self.boxes {
            if !b.is_valid() {
                return Err(Error::Format(format!(
                    "image {}: box {b:?} outside the unit square or degenerate",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// A batch of images from one domain, shaped (B, 3, H, W) with values in [0,1].
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub domain: Domain,
    pub image_ids: Vec<i64>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Array3<f32> {
        self.pixels.index_axis(ndarray::Axis(0), i).to_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.pixels.shape()[2], self.pixels.shape()[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be a multiple of 32"
            )));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("pixel values outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Parameters of the source-to-target corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub fog_intensity: f32,
    pub color_shift: [f32; 3],
    pub blur_radius: f32,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            fog_intensity: 0.6,
            color_shift: [0.06, 0.02, -0.08],
            blur_radius: 0.4,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_intensity) {
            return Err(Error::Config(format!(
                "fog_intensity {} outside [0,1]",
                self.fog_intensity
            )));
        }
        if self.blur_radius < 0.0 {
            return Err(Error::Config(format!(
                "blur_radius {} must be >= 0",
                self.blur_radius
            )));
        }
        for c in self.color_shift {
            if !(-0.3..=0.3).contains(&c) {
                return Err(Error::Config(format!(
                    "color_shift component {c} outside [-0.3, 0.3]"
                )));
            }
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministically combine seed components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x6a09e667f3bcc909u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Independent RNG stream derived from the given seed components.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
