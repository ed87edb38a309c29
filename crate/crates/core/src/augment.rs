//! The "heavier" augmentation family: random affine warps plus contrast and
//! brightness jitter.
//!
//! Geometry works in pixel coordinates `(x, y)` = `(column, row)` with the
//! origin at the top-left pixel centre. The forward map sends a source point
//! `p` to `c + A (p - c) + t`, where `c` is the image centre,
//! `A = rotation · shear · scale · flip` and `t` is the translation in
//! pixels. Output pixels are filled by inverse mapping with bilinear
//! interpolation; reads outside the image take the nearest edge pixel.

use rand::Rng;

use crate::dataset::{CHANNELS, IMAGE_LEN, SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentScheme {
    pub flip_prob: f64,
    /// Degrees, drawn from `[-r, r]`.
    pub rotation_range: f64,
    /// Fraction of image size per axis, drawn from `[-t, t]`.
    pub translate_range: f64,
    /// Scale multiplier drawn from `[1 - s, 1 + s]`.
    pub scale_range: f64,
    /// Degrees, drawn from `[-h, h]`.
    pub shear_range: f64,
    /// Contrast multiplier drawn from `[1 - c, 1 + c]`.
    pub contrast_range: f64,
    /// Additive offset in `[0, 1]` pixel units, drawn from `[-b, b]`.
    pub brightness_range: f64,
}

impl Default for AugmentScheme {
    fn default() -> Self {
        AugmentScheme {
            flip_prob: 0.5,
            rotation_range: 20.0,
            translate_range: 0.15,
            scale_range: 0.2,
            shear_range: 15.0,
            contrast_range: 0.35,
            brightness_range: 0.25,
        }
    }
}

impl AugmentScheme {
    /// Every range zero and no flips: `G` is the identity.
    pub fn none() -> Self {
        AugmentScheme {
            flip_prob: 0.0,
            rotation_range: 0.0,
            translate_range: 0.0,
            scale_range: 0.0,
            shear_range: 0.0,
            contrast_range: 0.0,
            brightness_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("translate_range", self.translate_range),
            ("scale_range", self.scale_range),
            ("shear_range", self.shear_range),
            ("contrast_range", self.contrast_range),
            ("brightness_range", self.brightness_range),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if self.scale_range >= 1.0 {
            return Err(Error::invalid("scale_range must be below 1"));
        }
        if self.contrast_range >= 1.0 {
            return Err(Error::invalid("contrast_range must be below 1"));
        }
        if self.shear_range >= 90.0 {
            return Err(Error::invalid("shear_range must be below 90 degrees"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            rotation: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            shear: 0.0,
            contrast: 1.0,
            brightness: 0.0,
        }
    }

    /// 2×2 linear part `rotation · shear · scale · flip`.
    pub fn linear_part(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotation.to_radians().sin_cos();
        let tan = self.shear.to_radians().tan();
        let f = if self.flip { -1.0 } else { 1.0 };
        let s = self.scale;
        // rotation · shear = [[cos, cos·tan - sin], [sin, sin·tan + cos]]
        let rs = [[cos, cos * tan - sin], [sin, sin * tan + cos]];
        [[rs[0][0] * s * f, rs[0][1] * s], [rs[1][0] * s * f, rs[1][1] * s]]
    }

    /// Homogeneous forward map (source → output) for an image of `width × height`.
    pub fn forward_matrix(&self, width: usize, height: usize) -> [[f64; 3]; 3] {
        let a = self.linear_part();
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let tx = self.translate.0 * width as f64;
        let ty = self.translate.1 * height as f64;
        [
            [a[0][0], a[0][1], cx - a[0][0] * cx - a[0][1] * cy + tx],
            [a[1][0], a[1][1], cy - a[1][0] * cx - a[1][1] * cy + ty],
            [0.0, 0.0, 1.0],
        ]
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Draws each parameter uniformly from its full range. The stream is
/// consumed in the order flip, rotation, tx, ty, scale, shear, contrast,
/// brightness, one draw each.
pub fn sample_train_params<R: Rng + ?Sized>(rng: &mut R, scheme: &AugmentScheme) -> AugmentParams {
    let flip = rng.random::<f64>() < scheme.flip_prob;
    let rotation = uniform(rng, -scheme.rotation_range, scheme.rotation_range);
    let tx = uniform(rng, -scheme.translate_range, scheme.translate_range);
    let ty = uniform(rng, -scheme.translate_range, scheme.translate_range);
    let scale = uniform(rng, 1.0 - scheme.scale_range, 1.0 + scheme.scale_range);
    let shear = uniform(rng, -scheme.shear_range, scheme.shear_range);
    let contrast = uniform(rng, 1.0 - scheme.contrast_range, 1.0 + scheme.contrast_range);
    let brightness = uniform(rng, -scheme.brightness_range, scheme.brightness_range);
    AugmentParams { flip, rotation, translate: (tx, ty), scale, shear, contrast, brightness }
}

/// Evaluation transform: every continuous parameter sits at one endpoint of
/// its halved range, sign chosen uniformly. The flip stays Bernoulli.
pub fn sample_eval_extreme_params<R: Rng + ?Sized>(rng: &mut R, scheme: &AugmentScheme) -> AugmentParams {
    let flip = rng.random::<f64>() < scheme.flip_prob;
    let mut extreme = |range: f64| {
        let half = range / 2.0;
        // `+ 0.0` folds a negated zero range back to +0.
        (if rng.random::<bool>() { half } else { -half }) + 0.0
    };
    let rotation = extreme(scheme.rotation_range);
    let tx = extreme(scheme.translate_range);
    let ty = extreme(scheme.translate_range);
    let scale = 1.0 + extreme(scheme.scale_range);
    let shear = extreme(scheme.shear_range);
    let contrast = 1.0 + extreme(scheme.contrast_range);
    let brightness = extreme(scheme.brightness_range);
    AugmentParams { flip, rotation, translate: (tx, ty), scale, shear, contrast, brightness }
}

/// Applies `params` to a `3×32×32` channel-planar image in `[0, 1]`.
pub fn apply_augmentation(image: &[f32], params: &AugmentParams) -> Vec<f32> {
    assert_eq!(image.len(), IMAGE_LEN, "expected a 3×32×32 image");
    apply_augmentation_with_shape(image, CHANNELS, SIDE, SIDE, params)
}

pub fn apply_augmentation_with_shape(
    image: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    params: &AugmentParams,
) -> Vec<f32> {
    assert_eq!(image.len(), channels * height * width);
    let plane = height * width;
    let mut out = vec![0.0f32; image.len()];

    let a = params.linear_part();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let tx = params.translate.0 * width as f64;
    let ty = params.translate.1 * height as f64;
    let max_x = width as isize - 1;
    let max_y = height as isize - 1;

    for oy in 0..height {
        for ox in 0..width {
            let qx = ox as f64 - cx - tx;
            let qy = oy as f64 - cy - ty;
            let sx = cx + inv[0][0] * qx + inv[0][1] * qy;
            let sy = cy + inv[1][0] * qx + inv[1][1] * qy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let xa = (x0 as isize).clamp(0, max_x) as usize;
            let xb = (x0 as isize + 1).clamp(0, max_x) as usize;
            let ya = (y0 as isize).clamp(0, max_y) as usize;
            let yb = (y0 as isize + 1).clamp(0, max_y) as usize;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for c in 0..channels {
                let src = &image[c * plane..(c + 1) * plane];
                let v = w00 * f64::from(src[ya * width + xa])
                    + w10 * f64::from(src[ya * width + xb])
                    + w01 * f64::from(src[yb * width + xa])
                    + w11 * f64::from(src[yb * width + xb]);
                let v = (v - 0.5) * params.contrast + 0.5 + params.brightness;
                out[c * plane + oy * width + ox] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PLANE;
    use crate::rng::stream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured() -> Vec<f32> {
        (0..IMAGE_LEN).map(|i| ((i * 37 + 11) % 256) as f32 / 255.0).collect()
    }

    fn delta(x: usize, y: usize) -> Vec<f32> {
        let mut img = vec![0.0f32; IMAGE_LEN];
        for c in 0..CHANNELS {
            img[c * PLANE + y * SIDE + x] = 1.0;
        }
        img
    }

    fn argmax_plane(img: &[f32]) -> (usize, usize) {
        let i = img[..PLANE].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        (i % SIDE, i / SIDE)
    }

    #[test]
    fn zero_scheme_samples_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_train_params(&mut rng, &AugmentScheme::none()), AugmentParams::identity());
        for _ in 0..20 {
            assert_eq!(sample_eval_extreme_params(&mut rng, &AugmentScheme::none()), AugmentParams::identity());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = AugmentScheme::default();
        let a = sample_train_params(&mut stream(1, "aug", 0, 0), &s);
        let b = sample_train_params(&mut stream(1, "aug", 0, 0), &s);
        assert_eq!(a, b);
    }

    #[test]
    fn eval_params_take_halved_endpoints() {
        let s = AugmentScheme::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = sample_eval_extreme_params(&mut rng, &s);
            assert!(p.rotation == 10.0 || p.rotation == -10.0);
            assert!((p.scale - 0.9).abs() < 1e-12 || (p.scale - 1.1).abs() < 1e-12);
            assert!(p.translate.0.abs() == 0.075 && p.translate.1.abs() == 0.075);
            assert!(p.shear.abs() == 7.5);
            assert!((p.contrast - 1.175).abs() < 1e-12 || (p.contrast - 0.825).abs() < 1e-12);
            assert!(p.brightness.abs() == 0.125);
        }
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = textured();
        assert_eq!(apply_augmentation(&img, &AugmentParams::identity()), img);
    }

    #[test]
    fn double_flip_restores_image() {
        let img = textured();
        let flip = AugmentParams { flip: true, ..AugmentParams::identity() };
        let once = apply_augmentation(&img, &flip);
        assert_ne!(once, img);
        assert_eq!(apply_augmentation(&once, &flip), img);
    }

    #[test]
    fn photometric_on_constant_image() {
        let img = vec![0.5f32; IMAGE_LEN];
        let p = AugmentParams { contrast: 1.4, brightness: 0.1, ..AugmentParams::identity() };
        for v in apply_augmentation(&img, &p) {
            assert!((f64::from(v) - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_moves_delta() {
        let p = AugmentParams { translate: (0.25, 0.0), ..AugmentParams::identity() };
        let out = apply_augmentation(&delta(8, 8), &p);
        assert_eq!(argmax_plane(&out), (16, 8));
        assert_eq!(out[8 * SIDE + 16], 1.0);
    }

    #[test]
    fn out_of_bounds_reads_extend_edges() {
        // Left column bright; shifting right by 4 pixels replicates it.
        let mut img = vec![0.0f32; IMAGE_LEN];
        for c in 0..CHANNELS {
            for y in 0..SIDE {
                img[c * PLANE + y * SIDE] = 1.0;
            }
        }
        let p = AugmentParams { translate: (4.0 / 32.0, 0.0), ..AugmentParams::identity() };
        let out = apply_augmentation(&img, &p);
        for x in 0..=4 {
            assert_eq!(out[5 * SIDE + x], 1.0, "column {x}");
        }
        assert_eq!(out[5 * SIDE + 5], 0.0);
    }

    #[test]
    fn output_is_clamped() {
        let img = textured();
        let p = AugmentParams { contrast: 1.9, brightness: 0.8, ..AugmentParams::identity() };
        assert!(apply_augmentation(&img, &p).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scheme_validation() {
        assert!(AugmentScheme::default().validate().is_ok());
        assert!(AugmentScheme { scale_range: 1.0, ..AugmentScheme::default() }.validate().is_err());
        assert!(AugmentScheme { flip_prob: 1.5, ..AugmentScheme::default() }.validate().is_err());
        assert!(AugmentScheme { rotation_range: -1.0, ..AugmentScheme::default() }.validate().is_err());
    }
}
