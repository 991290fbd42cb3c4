//! Overlay renderer: side-by-side panels of ground truth, student
//! predictions, and teacher pseudo labels, with box outlines and score text.

use std::path::Path;

use ndarray::Array3;

use crate::data::{AnnotationSet, BoxCxcywh};
use crate::error::Result;
use crate::eval::DetectionRecord;
use crate::mean_teacher::PseudoLabelSet;

pub const GT_COLOR: [f32; 3] = [0.2, 0.95, 0.2];
pub const STUDENT_COLOR: [f32; 3] = [1.0, 0.6, 0.1];
pub const PSEUDO_COLOR: [f32; 3] = [0.2, 0.9, 1.0];

const UPSCALE: usize = 4;
const SEPARATOR: usize = 2;

// 3x5 bitmap digits
const DIGITS: [[u8; 15]; 10] = [
    [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1],
];

/// Nearest-neighbor upscale.
fn upscale(img: &Array3<f32>, k: usize) -> Array3<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Array3::from_shape_fn((c, h * k, w * k), |(ci, y, x)| img[(ci, y / k, x / k)])
}

fn put_pixel(img: &mut Array3<f32>, y: isize, x: isize, color: [f32; 3]) {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    if y < 0 || x < 0 || y >= h || x >= w {
        return;
    }
    for c in 0..3 {
        img[(c, y as usize, x as usize)] = color[c];
    }
}

/// 1-pixel rectangle outline in normalized box coordinates.
pub fn draw_box(img: &mut Array3<f32>, bbox: BoxCxcywh, color: [f32; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let [x1, y1, x2, y2] = bbox.to_xyxy();
    let px1 = (x1 * w as f32).round() as isize;
    let px2 = (x2 * w as f32).round() as isize - 1;
    let py1 = (y1 * h as f32).round() as isize;
    let py2 = (y2 * h as f32).round() as isize - 1;
    for x in px1..=px2 {
        put_pixel(img, py1, x, color);
        put_pixel(img, py2, x, color);
    }
    for y in py1..=py2 {
        put_pixel(img, y, px1, color);
        put_pixel(img, y, px2, color);
    }
}

/// Draw an integer score percentage (00..99) above a box corner.
pub fn draw_score(img: &mut Array3<f32>, bbox: BoxCxcywh, score: f64, color: [f32; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let [x1, y1, _, _] = bbox.to_xyxy();
    let pct = (score * 100.0).round().clamp(0.0, 99.0) as usize;
    let digits = [pct / 10, pct % 10];
    let base_x = (x1 * w as f32).round() as isize + 1;
    let base_y = (y1 * h as f32).round() as isize - 6;
    for (k, &d) in digits.iter().enumerate() {
        let glyph = DIGITS[d];
        for gy in 0..5 {
            for gx in 0..3 {
                if glyph[gy * 3 + gx] == 1 {
                    put_pixel(
                        img,
                        base_y + gy as isize,
                        base_x + (k * 4 + gx) as isize,
                        color,
                    );
                }
            }
        }
    }
}

/// Compose the three annotated panels side by side.
pub fn composite_panels(
    image: &Array3<f32>,
    gt: &AnnotationSet,
    student: &[DetectionRecord],
    pseudo: &PseudoLabelSet,
    student_score_floor: f64,
) -> Array3<f32> {
    let up = upscale(image, UPSCALE);
    let mut gt_panel = up.clone();
    for &b in &gt.boxes {
        draw_box(&mut gt_panel, b, GT_COLOR);
    }
    let mut student_panel = up.clone();
    for det in student {
        if det.score >= student_score_floor {
            draw_box(&mut student_panel, det.bbox, STUDENT_COLOR);
            draw_score(&mut student_panel, det.bbox, det.score, STUDENT_COLOR);
        }
    }
    let mut pseudo_panel = up;
    for (&b, &s) in pseudo.boxes.iter().zip(&pseudo.scores) {
        draw_box(&mut pseudo_panel, b, PSEUDO_COLOR);
        draw_score(&mut pseudo_panel, b, s, PSEUDO_COLOR);
    }

    let (c, h, w) = (
        gt_panel.shape()[0],
        gt_panel.shape()[1],
        gt_panel.shape()[2],
    );
    let total_w = 3 * w + 2 * SEPARATOR;
    let mut out = Array3::from_elem((c, h, total_w), 1.0f32);
    for (k, panel) in [gt_panel, student_panel, pseudo_panel].iter().enumerate() {
        let x0 = k * (w + SEPARATOR);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ci, y, x0 + x)] = panel[(ci, y, x)];
                }
            }
        }
    }
    out
}

pub fn save_composite(path: &Path, composite: &Array3<f32>) -> Result<()> {
    crate::data::manifest::save_png(path, composite)
}
