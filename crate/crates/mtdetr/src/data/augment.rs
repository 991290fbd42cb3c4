//! Weak and strong augmentation policies.
//!
//! Weak: horizontal flip (p=0.5) plus a small (<=5%) random resize-crop;
//! geometry is tracked so annotations stay consistent. Strong adds
//! photometric jitter, random grayscale, Gaussian blur, and random erasing
//! on top of the weak geometry, leaving annotations untouched.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::corrupt::apply_blur;
use super::{AnnotationSet, BoxCxcywh};

pub fn hflip_image(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci, y, x)] = img[(ci, y, w - 1 - x)];
            }
        }
    }
    out
}

pub fn hflip_box(b: BoxCxcywh) -> BoxCxcywh {
    BoxCxcywh::new(1.0 - b.cx, b.cy, b.w, b.h)
}

/// Bilinear resample of the window `[ox, ox+scale] x [oy, oy+scale]`
/// (normalized coordinates) back to the full image size.
pub fn resize_crop_image(img: &Array3<f32>, scale: f32, ox: f32, oy: f32) -> Array3<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if scale == 1.0 && ox == 0.0 && oy == 0.0 {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for y in 0..h {
        let v = (oy + scale * (y as f32 + 0.5) / h as f32) * h as f32 - 0.5;
        let y0 = v.floor();
        let fy = v - y0;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let u = (ox + scale * (x as f32 + 0.5) / w as f32) * w as f32 - 0.5;
            let x0 = u.floor();
            let fx = u - x0;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                let a = img[(ci, y0i, x0i)] * (1.0 - fx) + img[(ci, y0i, x1i)] * fx;
                let b = img[(ci, y1i, x0i)] * (1.0 - fx) + img[(ci, y1i, x1i)] * fx;
                out[(ci, y, x)] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

/// Map a box into the crop frame; clipped to the unit square, dropped when
/// (almost) nothing remains.
pub fn resize_crop_box(b: BoxCxcywh, scale: f32, ox: f32, oy: f32) -> Option<BoxCxcywh> {
    let mapped = BoxCxcywh::new((b.cx - ox) / scale, (b.cy - oy) / scale, b.w / scale, b.h / scale);
    let clipped = mapped.clip_unit()?;
    const MIN_SIDE: f32 = 1e-3;
    if clipped.w < MIN_SIDE || clipped.h < MIN_SIDE {
        return None;
    }
    Some(clipped)
}

/// Sampled weak-augmentation decisions (flip + small resize-crop).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakAug {
    pub flip: bool,
    pub crop_scale: f32,
    pub crop_ox: f32,
    pub crop_oy: f32,
}

impl WeakAug {
    pub fn identity() -> Self {
        Self { flip: false, crop_scale: 1.0, crop_ox: 0.0, crop_oy: 0.0 }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let flip = rng.gen_bool(0.5);
        let crop_scale = rng.gen_range(0.95..=1.0f32);
        let slack = 1.0 - crop_scale;
        let crop_ox = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
        let crop_oy = if slack > 0.0 { rng.gen_range(0.0..=slack) } else { 0.0 };
        Self { flip, crop_scale, crop_ox, crop_oy }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, img: &Array3<f32>, annots: &AnnotationSet) -> (Array3<f32>, AnnotationSet) {
        let mut out = if self.flip { hflip_image(img) } else { img.clone() };
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for (&cls, &b) in annots.class_ids.iter().zip(&annots.boxes) {
            let b = if self.flip { hflip_box(b) } else { b };
            if let Some(b) = resize_crop_box(b, self.crop_scale, self.crop_ox, self.crop_oy) {
                boxes.push(b);
                classes.push(cls);
            }
        }
        if !(self.crop_scale == 1.0 && self.crop_ox == 0.0 && self.crop_oy == 0.0) {
            out = resize_crop_image(&out, self.crop_scale, self.crop_ox, self.crop_oy);
        }
        (
            out,
            AnnotationSet { image_id: annots.image_id, boxes, class_ids: classes },
        )
    }
}

/// Photometric additions applied on top of the weak view for the student.
/// None of these move pixels, so annotations are unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongExtras {
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
    /// Erased rectangles as normalized (x1, y1, x2, y2).
    pub erase: Vec<[f32; 4]>,
}

pub const ERASE_MAX_AREA: f32 = 0.10;

impl StrongExtras {
    pub fn identity() -> Self {
        Self {
            brightness: None,
            contrast: None,
            saturation: None,
            grayscale: false,
            blur_sigma: None,
            erase: Vec::new(),
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let brightness = rng.gen_bool(0.8).then(|| rng.gen_range(0.6..1.4f32));
        let contrast = rng.gen_bool(0.8).then(|| rng.gen_range(0.6..1.4f32));
        let saturation = rng.gen_bool(0.8).then(|| rng.gen_range(0.4..1.6f32));
        let grayscale = rng.gen_bool(0.2);
        let blur_sigma = rng.gen_bool(0.5).then(|| rng.gen_range(0.1..1.2f32));
        let mut erase = Vec::new();
        for _ in 0..2 {
            if rng.gen_bool(0.5) {
                let area = rng.gen_range(0.02..=ERASE_MAX_AREA);
                let aspect = rng.gen_range(0.5..2.0f32);
                let w = (area * aspect).sqrt().min(1.0);
                let h = (area / aspect).sqrt().min(1.0);
                let x1 = rng.gen_range(0.0..=(1.0 - w));
                let y1 = rng.gen_range(0.0..=(1.0 - h));
                erase.push([x1, y1, x1 + w, y1 + h]);
            }
        }
        Self { brightness, contrast, saturation, grayscale, blur_sigma, erase }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, img: &Array3<f32>) -> Array3<f32> {
        let mut out = img.clone();
        if let Some(b) = self.brightness {
            out.mapv_inplace(|v| v * b);
        }
        if let Some(c) = self.contrast {
            let mean = out.mean().unwrap_or(0.5);
            out.mapv_inplace(|v| (v - mean) * c + mean);
        }
        if self.grayscale {
            gray_mix(&mut out, 1.0);
        } else if let Some(s) = self.saturation {
            gray_mix(&mut out, 1.0 - s);
        }
        if let Some(sigma) = self.blur_sigma {
            out.mapv_inplace(|v| v.clamp(0.0, 1.0));
            out = apply_blur(&out, sigma);
        }
        let (h, w) = (out.shape()[1], out.shape()[2]);
        for rect in &self.erase {
            let x1 = (rect[0] * w as f32) as usize;
            let y1 = (rect[1] * h as f32) as usize;
            let x2 = ((rect[2] * w as f32) as usize).min(w);
            let y2 = ((rect[3] * h as f32) as usize).min(h);
            for ci in 0..3 {
                for y in y1..y2 {
                    for x in x1..x2 {
                        out[(ci, y, x)] = 0.5;
                    }
                }
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

/// Blend each pixel toward its luma; `amount`=1 is full grayscale,
/// `amount`<0 oversaturates.
fn gray_mix(img: &mut Array3<f32>, amount: f32) {
    if amount == 0.0 {
        return;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let luma =
                0.299 * img[(0, y, x)] + 0.587 * img[(1, y, x)] + 0.114 * img[(2, y, x)];
            for c in 0..3 {
                let v = img[(c, y, x)];
                img[(c, y, x)] = v + amount * (luma - v);
            }
        }
    }
}

/// Flip + small resize-crop for the teacher view.
pub fn augment_weak(
    rng: &mut ChaCha8Rng,
    img: &Array3<f32>,
    annots: &AnnotationSet,
) -> (Array3<f32>, AnnotationSet) {
    WeakAug::sample(rng).apply(img, annots)
}

/// Weak geometry plus photometric jitter, grayscale, blur, and erasing.
pub fn augment_strong(
    rng: &mut ChaCha8Rng,
    img: &Array3<f32>,
    annots: &AnnotationSet,
) -> (Array3<f32>, AnnotationSet) {
    let (img, annots) = augment_weak(rng, img, annots);
    let extras = StrongExtras::sample(rng);
    (extras.apply(&img), annots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream_rng;
    use ndarray::Array3;

    fn test_image() -> Array3<f32> {
        Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            (((c * 13 + y * 5 + x) % 17) as f32) / 16.0
        })
    }

    #[test]
    fn flip_is_an_involution() {
        let img = test_image();
        assert_eq!(hflip_image(&hflip_image(&img)), img);
        let b = BoxCxcywh::new(0.3, 0.5, 0.2, 0.2);
        assert_eq!(hflip_box(hflip_box(b)), b);
    }

    #[test]
    fn flip_mirrors_box_center() {
        let b = hflip_box(BoxCxcywh::new(0.3, 0.5, 0.2, 0.2));
        assert!((b.cx - 0.7).abs() < 1e-6);
        assert_eq!((b.cy, b.w, b.h), (0.5, 0.2, 0.2));
    }

    #[test]
    fn identity_augs_are_identity() {
        let img = test_image();
        let annots = AnnotationSet {
            image_id: 0,
            boxes: vec![BoxCxcywh::new(0.5, 0.5, 0.25, 0.25)],
            class_ids: vec![2],
        };
        let (out, a2) = WeakAug::identity().apply(&img, &annots);
        assert_eq!(out, img);
        assert_eq!(a2, annots);
        assert_eq!(StrongExtras::identity().apply(&img), img);
    }

    #[test]
    fn strong_output_stays_in_unit_interval() {
        let img = test_image();
        let mut rng = stream_rng(&[42]);
        for _ in 0..1000 {
            let extras = StrongExtras::sample(&mut rng);
            for rect in &extras.erase {
                let area = (rect[2] - rect[0]) * (rect[3] - rect[1]);
                assert!(area <= ERASE_MAX_AREA + 1e-5);
            }
            let out = extras.apply(&img);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augmented_annotations_stay_valid() {
        let img = test_image();
        let annots = AnnotationSet {
            image_id: 1,
            boxes: vec![
                BoxCxcywh::new(0.1, 0.1, 0.18, 0.18),
                BoxCxcywh::new(0.9, 0.85, 0.15, 0.2),
                BoxCxcywh::new(0.5, 0.5, 0.3, 0.3),
            ],
            class_ids: vec![0, 1, 2],
        };
        let mut rng = stream_rng(&[43]);
        for _ in 0..500 {
            let (_, out) = augment_weak(&mut rng, &img, &annots);
            out.validate().unwrap();
            for b in &out.boxes {
                assert!(b.is_valid());
            }
        }
    }

    #[test]
    fn weak_crop_never_exceeds_five_percent() {
        let mut rng = stream_rng(&[44]);
        for _ in 0..500 {
            let aug = WeakAug::sample(&mut rng);
            assert!(aug.crop_scale >= 0.95 && aug.crop_scale <= 1.0);
        }
    }
}
