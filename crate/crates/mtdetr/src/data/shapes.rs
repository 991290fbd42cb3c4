//! Renderer for the clean (source-domain) images: randomly placed geometric
//! objects on a gradient background, one object class per shape kind.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::BoxCxcywh;

pub const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "ring", "diamond"];
pub const MAX_CLASSES: usize = SHAPE_NAMES.len();

// Base fill colors per class, jittered at render time.
const BASE_COLORS: [[f32; 3]; 5] = [
    [0.86, 0.26, 0.22], // circle: red
    [0.28, 0.78, 0.32], // square: green
    [0.26, 0.42, 0.90], // triangle: blue
    [0.92, 0.80, 0.25], // ring: yellow
    [0.82, 0.30, 0.80], // diamond: magenta
];

#[derive(Clone, Copy, Debug)]
struct Object {
    class_id: usize,
    // all in pixel units
    cx: f32,
    cy: f32,
    half: f32,
    color: [f32; 3],
}

impl Object {
    fn bbox(&self, size: usize) -> BoxCxcywh {
        let s = size as f32;
        BoxCxcywh::new(self.cx / s, self.cy / s, 2.0 * self.half / s, 2.0 * self.half / s)
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let a = self.half;
        match self.class_id {
            0 => dx * dx + dy * dy <= a * a,
            1 => dx.abs() <= a && dy.abs() <= a,
            2 => {
                // isoceles triangle, apex at the top of the box
                if dy < -a || dy > a {
                    return false;
                }
                let frac = (dy + a) / (2.0 * a); // 0 at apex row, 1 at base
                dx.abs() <= a * frac
            }
            3 => {
                let r = (dx * dx + dy * dy).sqrt();
                r <= a && r >= a * 0.55
            }
            4 => dx.abs() + dy.abs() <= a,
            _ => unreachable!("class id out of range"),
        }
    }
}

fn box_iou(a: BoxCxcywh, b: BoxCxcywh) -> f32 {
    let [ax1, ay1, ax2, ay2] = a.to_xyxy();
    let [bx1, by1, bx2, by2] = b.to_xyxy();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Render one image. Returns (pixels CHW in [0,1], per-object annotations).
/// Pixels are quantized to the 8-bit grid so PNG round trips are exact.
pub fn render_image(
    rng: &mut ChaCha8Rng,
    size: usize,
    n_classes: usize,
) -> (Array3<f32>, Vec<(usize, BoxCxcywh)>) {
    assert!(n_classes >= 1 && n_classes <= MAX_CLASSES);
    let s = size as f32;

    // background: vertical gradient between two dark tones
    let top: [f32; 3] = [
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.10..0.30),
    ];
    let bot: [f32; 3] = [
        rng.gen_range(0.15..0.40),
        rng.gen_range(0.15..0.40),
        rng.gen_range(0.15..0.40),
    ];

    // sample non-overlapping objects
    let n_objects = rng.gen_range(1..=3usize);
    let mut objects: Vec<Object> = Vec::new();
    for _ in 0..n_objects {
        let class_id = rng.gen_range(0..n_classes);
        let half = rng.gen_range(0.09 * s..0.20 * s);
        let base = BASE_COLORS[class_id];
        let jitter = |rng: &mut ChaCha8Rng, v: f32| (v + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0);
        let color = [jitter(rng, base[0]), jitter(rng, base[1]), jitter(rng, base[2])];
        for _try in 0..20 {
            let cx = rng.gen_range(half + 1.0..s - half - 1.0);
            let cy = rng.gen_range(half + 1.0..s - half - 1.0);
            let cand = Object { class_id, cx, cy, half, color };
            let bb = cand.bbox(size);
            if objects.iter().all(|o| box_iou(o.bbox(size), bb) < 0.25) {
                objects.push(cand);
                break;
            }
        }
    }

    // rasterize with 2x2 supersampling for soft edges
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        let t = y as f32 / (size - 1) as f32;
        for x in 0..size {
            let mut px = [
                top[0] + (bot[0] - top[0]) * t,
                top[1] + (bot[1] - top[1]) * t,
                top[2] + (bot[2] - top[2]) * t,
            ];
            for obj in &objects {
                let mut cover = 0.0f32;
                for sy in 0..2 {
                    for sx in 0..2 {
                        let fx = x as f32 + 0.25 + 0.5 * sx as f32;
                        let fy = y as f32 + 0.25 + 0.5 * sy as f32;
                        if obj.contains(fx, fy) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - cover) + obj.color[c] * cover;
                    }
                }
            }
            for c in 0..3 {
                img[(c, y, x)] = quantize(px[c]);
            }
        }
    }

    let annots = objects.iter().map(|o| (o.class_id, o.bbox(size))).collect();
    (img, annots)
}

/// Snap a value onto the 8-bit pixel grid.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Quantize a whole image in place.
pub fn quantize_image(img: &mut Array3<f32>) {
    img.mapv_inplace(quantize);
}
