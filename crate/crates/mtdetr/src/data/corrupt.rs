//! Parametric corruptions that turn clean renders into the target domain.

use ndarray::Array3;

use crate::error::{Error, Result};

const FOG_VALUE: f32 = 0.8;

/// Fog strength at row `y`: 1 at the top row, 0.5 at the bottom row.
pub fn fog_gradient(y: usize, height: usize) -> f32 {
    if height <= 1 {
        return 1.0;
    }
    1.0 - 0.5 * (y as f32 / (height - 1) as f32)
}

/// Blend toward a light-gray fog layer modulated by a vertical gradient:
/// `out = (1-intensity) * image + intensity * 0.8 * gradient(y)`.
pub fn apply_fog(image: &Array3<f32>, intensity: f32) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Domain(format!("fog intensity {intensity} outside [0,1]")));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for ci in 0..c {
        for y in 0..h {
            let fog = FOG_VALUE * fog_gradient(y, h);
            for x in 0..w {
                let v = (1.0 - intensity) * image[(ci, y, x)] + intensity * fog;
                out[(ci, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Per-channel additive offset, clamped to [0,1].
pub fn apply_color_shift(image: &Array3<f32>, shift: [f32; 3]) -> Array3<f32> {
    let mut out = image.clone();
    for (ci, &s) in shift.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), ci)
            .mapv_inplace(|v| (v + s).clamp(0.0, 1.0));
    }
    out
}

/// Separable Gaussian blur with standard deviation `sigma` (pixels).
/// `sigma == 0` is the identity.
pub fn apply_blur(image: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    // horizontal pass, clamped borders
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * image[(ci, y, sx as usize)];
                }
                tmp[(ci, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[(ci, sy as usize, x)];
                }
                out[(ci, y, x)] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn fog_zero_is_identity() {
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + y + x) as f32 * 0.07) % 1.0
        });
        let out = apply_fog(&img, 0.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn fog_one_is_pure_fog_layer() {
        let img = Array3::from_elem((3, 8, 8), 0.3f32);
        let out = apply_fog(&img, 1.0).unwrap();
        for y in 0..8 {
            let expect = 0.8 * fog_gradient(y, 8);
            for c in 0..3 {
                for x in 0..8 {
                    assert!((out[(c, y, x)] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fog_half_on_black_top_row() {
        // top row gradient is 1: 0.5*0 + 0.5*0.8*1 = 0.4
        let img = Array3::from_elem((3, 8, 8), 0.0f32);
        let out = apply_fog(&img, 0.5).unwrap();
        for c in 0..3 {
            for x in 0..8 {
                assert!((out[(c, 0, x)] - 0.4).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fog_rejects_out_of_range_intensity() {
        let img = Array3::from_elem((3, 4, 4), 0.5f32);
        assert!(apply_fog(&img, -0.1).is_err());
        assert!(apply_fog(&img, 1.1).is_err());
    }

    #[test]
    fn fog_monotone_in_intensity() {
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) as f32 * 0.013) % 1.0
        });
        let mut prev = -1.0f64;
        for k in 0..=10 {
            let intensity = k as f32 / 10.0;
            let out = apply_fog(&img, intensity).unwrap();
            let mad: f64 = out
                .iter()
                .zip(img.iter())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum::<f64>()
                / img.len() as f64;
            assert!(mad + 1e-9 >= prev, "fog mad not monotone at {intensity}");
            prev = mad;
        }
    }

    #[test]
    fn blur_zero_is_identity_and_blur_preserves_range() {
        let img = Array3::from_shape_fn((3, 8, 8), |(_, y, x)| ((y * x) % 2) as f32);
        assert_eq!(apply_blur(&img, 0.0), img);
        let out = apply_blur(&img, 1.5);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // blurring a checkerboard moves values toward the mean
        assert!(out.iter().any(|&v| v > 0.05 && v < 0.95));
    }
}
