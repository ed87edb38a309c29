//! Browser bindings: augmentation preview, α schedule and an invariance
//! loss explorer. The exported functions are thin wrappers over the
//! `*_impl` functions, which are plain Rust and tested natively.

use dainv::augment::{apply_augmentation, AugmentParams};
use dainv::dataset::{synthetic_records, IMAGE_LEN};
use dainv::objective::{alpha_schedule, invariance_loss, pairwise_distances, GroupIndex, InvarianceVariant};
use dainv::rng::stream;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Synthetic image of class `label` drawn with `seed`.
fn sample_image(label: u32, seed: u32) -> Result<Vec<f32>, String> {
    if label > 9 {
        return Err(format!("label {label} is outside 0..=9"));
    }
    let mut records = synthetic_records(label as usize + 1, u64::from(seed), 0);
    Ok(records.swap_remove(label as usize).pixels)
}

fn write_rgba(image: &[f32], out: &mut [u8], stride: usize, x0: usize) {
    for y in 0..SIDE {
        for x in 0..SIDE {
            let o = 4 * (y * stride + x0 + x);
            for c in 0..3 {
                out[o + c] = (image[c * PLANE + y * SIDE + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out[o + 3] = 255;
        }
    }
}

/// RGBA pixels of a 64×32 strip: the original image, then its augmentation.
#[allow(clippy::too_many_arguments)]
pub fn preview_impl(
    label: u32,
    seed: u32,
    flip: bool,
    rotation: f64,
    translate_x: f64,
    translate_y: f64,
    scale: f64,
    shear: f64,
    contrast: f64,
    brightness: f64,
) -> Result<Vec<u8>, String> {
    if scale.is_nan() || scale <= 0.0 {
        return Err("scale must be positive".into());
    }
    let image = sample_image(label, seed)?;
    debug_assert_eq!(image.len(), IMAGE_LEN);
    let params =
        AugmentParams { flip, rotation, translate: (translate_x, translate_y), scale, shear, contrast, brightness };
    let augmented = apply_augmentation(&image, &params);
    let mut out = vec![0u8; 2 * PLANE * 4];
    write_rgba(&image, &mut out, 2 * SIDE, 0);
    write_rgba(&augmented, &mut out, 2 * SIDE, SIDE);
    Ok(out)
}

pub fn schedule_impl(layers: usize, alpha: f64) -> Result<Vec<f64>, String> {
    alpha_schedule(layers, alpha).map(|s| s.coefficients).map_err(|e| e.to_string())
}

/// Loss and distance matrix of `groups` clusters of `copies` points in
/// `dim` dimensions. Centres are standard normal; copies scatter around
/// their centre with standard deviation `spread`.
///
/// Returns `[verbatim loss, group-mean loss, B×B distances row-major]`.
pub fn explore_impl(groups: usize, copies: usize, dim: usize, spread: f64, seed: u32) -> Result<Vec<f64>, String> {
    if groups < 2 || copies < 2 || dim == 0 {
        return Err("need at least two groups of two copies in one or more dimensions".into());
    }
    if groups * copies > 256 || dim > 4096 {
        return Err("batch limited to 256 points and 4096 dimensions".into());
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err("spread must be a non-negative number".into());
    }
    let mut rng = stream(u64::from(seed), "explore", 0, 0);
    let b = groups * copies;
    let mut x = Vec::with_capacity(b * dim);
    for _ in 0..groups {
        let centre: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..copies {
            x.extend(centre.iter().map(|c| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                c + spread * noise
            }));
        }
    }
    let index = GroupIndex::contiguous(b, copies).map_err(|e| e.to_string())?;
    let verbatim = invariance_loss(&x, b, dim, &index, InvarianceVariant::Verbatim).map_err(|e| e.to_string())?;
    let group_mean = invariance_loss(&x, b, dim, &index, InvarianceVariant::GroupMean).map_err(|e| e.to_string())?;
    let mut out = vec![verbatim, group_mean];
    out.extend(pairwise_distances(&x, b, dim).map_err(|e| e.to_string())?);
    Ok(out)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn preview(
    label: u32,
    seed: u32,
    flip: bool,
    rotation: f64,
    translate_x: f64,
    translate_y: f64,
    scale: f64,
    shear: f64,
    contrast: f64,
    brightness: f64,
) -> Result<Vec<u8>, JsError> {
    preview_impl(label, seed, flip, rotation, translate_x, translate_y, scale, shear, contrast, brightness)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule(layers: usize, alpha: f64) -> Result<Vec<f64>, JsError> {
    schedule_impl(layers, alpha).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn explore(groups: usize, copies: usize, dim: usize, spread: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    explore_impl(groups, copies, dim, spread, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_preview_repeats_the_image() {
        let px = preview_impl(3, 1, false, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(px.len(), 64 * 32 * 4);
        for y in 0..32 {
            let row = &px[y * 64 * 4..(y + 1) * 64 * 4];
            assert_eq!(row[..128], row[128..]);
        }
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }

    #[test]
    fn flipped_preview_mirrors_rows() {
        let px = preview_impl(5, 2, true, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0).unwrap();
        let at = |x: usize, y: usize| &px[4 * (y * 64 + x)..4 * (y * 64 + x) + 4];
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(at(x, y), at(32 + 31 - x, y));
            }
        }
    }

    #[test]
    fn preview_rejects_bad_input() {
        assert!(preview_impl(10, 0, false, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0).is_err());
        assert!(preview_impl(1, 0, false, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn schedule_sums_to_alpha() {
        let s = schedule_impl(9, 0.1).unwrap();
        assert!((s.iter().sum::<f64>() - 0.1).abs() < 1e-12);
        assert!((s[8] / s[0] - 10.0).abs() < 1e-9);
        assert!(schedule_impl(3, 1.5).is_err());
    }

    #[test]
    fn tight_groups_give_small_loss() {
        let tight = explore_impl(4, 3, 16, 0.01, 7).unwrap();
        let loose = explore_impl(4, 3, 16, 3.0, 7).unwrap();
        assert!(tight[0] < 1e-3 && loose[0] > tight[0]);
        assert_eq!(tight.len(), 2 + 144);
        assert!((tight[1] * 4.0 - tight[0]).abs() < 1e-12);
        assert!(explore_impl(1, 3, 4, 0.5, 0).is_err());
    }
}
