//! Post-training measurement: per-layer invariance scores over a test set
//! and top-1 accuracy.
//!
//! For test image `x_i`, evaluation transform `G` and layer `l`, the score is
//! `σ = 1 − d(f(x_i), f(G x_i)) / mean_j d(f(x_i), f(x_j))`, where `j`
//! ranges over a fixed random subset of `R` other test images. Layer 0 is
//! the normalized pixel space and does not depend on the model.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;

use crate::augment::{apply_augmentation, sample_eval_extreme_params, AugmentScheme};
use crate::dataset::{normalize, ChannelStats, ImageRecord, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::network::{forward, Architecture, ModelParams};
use crate::objective::mean_sq_distance;
use crate::rng::stream;
use crate::trainer::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Transforms per test image (`T`).
    pub transforms: usize,
    /// Reference images per test image (`R`).
    pub references: usize,
    pub scheme: AugmentScheme,
    pub seed: u64,
    /// Upper bound on stored clean activations; layers are evaluated in
    /// several passes when all of them do not fit.
    pub memory_budget_bytes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            transforms: 5,
            references: 200,
            scheme: AugmentScheme::default(),
            seed: 0,
            memory_budget_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub image_id: usize,
    pub transform: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let count = v.len();
        if count == 0 {
            return Summary {
                count,
                min: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                max: f64::NAN,
                mean: f64::NAN,
            };
        }
        Summary {
            count,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[count - 1],
            mean: v.iter().sum::<f64>() / count as f64,
        }
    }
}

/// Linear-interpolation quantile of sorted data (`(n − 1)·q` positions).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    /// One score per (image, transform), image-major.
    pub scores: Vec<Score>,
    /// Over every (image, transform) score.
    pub summary: Summary,
    /// Over per-image means of the `T` scores.
    pub pooled: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub layers: Vec<LayerReport>,
    pub images: usize,
    pub transforms: usize,
    pub references: usize,
    pub scheme: AugmentScheme,
    pub checkpoint_id: String,
}

pub fn invariance_score<T: crate::scalar::Scalar>(f_x: &[T], f_gx: &[T], reference_dists: &[f64]) -> Result<f64> {
    if reference_dists.is_empty() {
        return Err(Error::EmptyInput("invariance score needs reference distances"));
    }
    let mean = reference_dists.iter().sum::<f64>() / reference_dists.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateFeatures { layer: 0, image: 0 });
    }
    Ok(1.0 - mean_sq_distance(f_x, f_gx)? / mean)
}

/// Splits layers `0..=depth` into passes whose clean activations for
/// `images` test images fit in `budget` bytes (at least one layer a pass).
fn layer_passes(arch: &Architecture, images: usize, budget: usize) -> Vec<Vec<usize>> {
    let mut passes: Vec<Vec<usize>> = Vec::new();
    let mut used = 0usize;
    for l in 0..=arch.depth() {
        let bytes = images * arch.tap_dim(l) * std::mem::size_of::<f32>();
        match passes.last_mut() {
            Some(p) if used + bytes <= budget => {
                p.push(l);
                used += bytes;
            }
            _ => {
                passes.push(vec![l]);
                used = bytes;
            }
        }
    }
    passes
}

const CHUNK: usize = 16;

/// The `T` evaluation transforms of one test image, normalized. Drawn from a
/// per-image stream so every pass sees the same transforms.
fn transformed(record: &ImageRecord, stats: &ChannelStats, settings: &EvalSettings) -> Vec<f32> {
    let mut rng = stream(settings.seed, "eval-transform", record.seed_id as u64, 0);
    (0..settings.transforms)
        .flat_map(|_| {
            let p = sample_eval_extreme_params(&mut rng, &settings.scheme);
            normalize(&apply_augmentation(&record.pixels, &p), stats)
        })
        .collect()
}

fn prepared(record: &ImageRecord, stats: &ChannelStats) -> Vec<f32> {
    normalize(&record.pixels, stats)
}

pub fn evaluate_invariance(
    params: &ModelParams<f32>,
    testset: &[ImageRecord],
    stats: &ChannelStats,
    settings: &EvalSettings,
    checkpoint_id: &str,
) -> Result<InvarianceReport> {
    let n = testset.len();
    let (t, r) = (settings.transforms, settings.references);
    if t == 0 {
        return Err(Error::invalid("at least one transform per image is required"));
    }
    if r < 2 || r + 1 > n {
        return Err(Error::invalid(format!("references must lie in 2..={} for {n} test images", n.saturating_sub(1))));
    }
    settings.scheme.validate()?;
    let arch = &params.arch;
    if arch.input.len() != IMAGE_LEN {
        return Err(Error::ShapeMismatch("model input is not 3×32×32".into()));
    }
    let depth = arch.depth();

    let refs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut rng = stream(settings.seed, "eval-refs", testset[i].seed_id as u64, 0);
            sample(&mut rng, n - 1, r).into_iter().map(|k| if k >= i { k + 1 } else { k }).collect()
        })
        .collect();
    let mut scores: Vec<Vec<Score>> = vec![Vec::with_capacity(n * t); depth + 1];
    for pass in layer_passes(arch, n, settings.memory_budget_bytes) {
        // Clean activations of every test image for this pass's layers.
        let mut clean: Vec<Vec<f32>> = pass.iter().map(|&l| Vec::with_capacity(n * arch.tap_dim(l))).collect();
        for chunk in testset.chunks(CHUNK) {
            let input: Vec<f32> = chunk.iter().flat_map(|rec| prepared(rec, stats)).collect();
            let acts = forward(params, &input, chunk.len())?;
            for (k, &l) in pass.iter().enumerate() {
                clean[k].extend_from_slice(acts.tap(l));
            }
        }
        for i in 0..n {
            let acts = forward(params, &transformed(&testset[i], stats, settings), t)?;
            for (k, &l) in pass.iter().enumerate() {
                let d = arch.tap_dim(l);
                let f_x = &clean[k][i * d..(i + 1) * d];
                let mut ref_sum = 0.0;
                for &j in &refs[i] {
                    ref_sum += mean_sq_distance(f_x, &clean[k][j * d..(j + 1) * d])?;
                }
                let ref_mean = ref_sum / r as f64;
                if !(ref_mean > 0.0) {
                    return Err(Error::DegenerateFeatures { layer: l, image: testset[i].seed_id });
                }
                for ti in 0..t {
                    let dist = mean_sq_distance(f_x, acts.image_tap(l, ti))?;
                    scores[l].push(Score { image_id: testset[i].seed_id, transform: ti, sigma: 1.0 - dist / ref_mean });
                }
            }
        }
    }

    let layers = scores
        .into_iter()
        .enumerate()
        .map(|(layer, scores)| {
            let all: Vec<f64> = scores.iter().map(|s| s.sigma).collect();
            let pooled: Vec<f64> = all.chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
            LayerReport { layer, summary: Summary::of(&all), pooled: Summary::of(&pooled), scores }
        })
        .collect();
    Ok(InvarianceReport {
        layers,
        images: n,
        transforms: t,
        references: r,
        scheme: settings.scheme,
        checkpoint_id: checkpoint_id.to_string(),
    })
}

/// Top-1 accuracy without test-time augmentation.
pub fn evaluate_accuracy(params: &ModelParams<f32>, testset: &[ImageRecord], stats: &ChannelStats) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty test set"));
    }
    let classes = params.arch.num_classes();
    let mut correct = 0;
    for chunk in testset.chunks(CHUNK) {
        let input: Vec<f32> = chunk.iter().flat_map(|rec| prepared(rec, stats)).collect();
        let acts = forward(params, &input, chunk.len())?;
        for (i, rec) in chunk.iter().enumerate() {
            if argmax(&acts.logits()[i * classes..(i + 1) * classes]) == usize::from(rec.label) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Six significant digits, plain decimal notation where reasonable.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp) as usize, v)
    } else {
        sci
    }
}

pub const INVARIANCE_CSV_HEADER: [&str; 4] = ["layer", "image_id", "transform_index", "sigma"];
pub const SUMMARY_CSV_HEADER: [&str; 11] =
    ["layer", "layer_name", "pooling", "count", "min", "q1", "median", "q3", "max", "mean", "scheme_note"];

/// `layer,image_id,transform_index,sigma`, one row per score, layer-major.
pub fn write_invariance_csv(report: &InvarianceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(INVARIANCE_CSV_HEADER)?;
    for layer in &report.layers {
        for s in &layer.scores {
            w.write_record([
                layer.layer.to_string(),
                s.image_id.to_string(),
                s.transform.to_string(),
                fmt_sig6(s.sigma),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-layer summaries for both poolings: `all` (every image × transform
/// score) and `image_mean` (mean over the transforms of each image).
pub fn write_summary_csv(report: &InvarianceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_CSV_HEADER)?;
    let note = "layer 0 is normalized pixel space";
    for layer in &report.layers {
        for (pooling, s) in [("all", &layer.summary), ("image_mean", &layer.pooled)] {
            w.write_record([
                layer.layer.to_string(),
                Architecture::layer_name(layer.layer),
                pooling.to_string(),
                s.count.to_string(),
                fmt_sig6(s.min),
                fmt_sig6(s.q1),
                fmt_sig6(s.median),
                fmt_sig6(s.q3),
                fmt_sig6(s.max),
                fmt_sig6(s.mean),
                note.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `key=value` metadata describing an evaluation.
pub fn write_eval_meta(report: &InvarianceReport, accuracy: f64, path: &Path) -> Result<()> {
    let s = &report.scheme;
    let mut text = String::new();
    text += &format!("checkpoint_id={}\n", report.checkpoint_id);
    text += &format!("accuracy={}\n", fmt_sig6(accuracy));
    text += &format!("images={}\ntransforms={}\nreferences={}\n", report.images, report.transforms, report.references);
    text += "transform_sampling=halved_range_extremes\npixel_space=normalized\n";
    text += &format!(
        "flip_prob={}\nrotation_range={}\ntranslate_range={}\nscale_range={}\nshear_range={}\ncontrast_range={}\nbrightness_range={}\n",
        s.flip_prob, s.rotation_range, s.translate_range, s.scale_range, s.shear_range, s.contrast_range, s.brightness_range
    );
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let a = [1.0f64, 2.0, 3.0];
        assert_eq!(invariance_score(&a, &a, &[0.5, 1.5]).unwrap(), 1.0);
        let b = [2.0f64, 3.0, 4.0];
        // d(a, b) = 1
        assert_eq!(invariance_score(&a, &b, &[1.0]).unwrap(), 0.0);
        assert_eq!(invariance_score(&a, &b, &[1.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(invariance_score(&a, &b, &[0.0, 0.0]), Err(Error::DegenerateFeatures { .. })));
        assert!(invariance_score(&a, &b, &[]).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let s = Summary::of(&[5.0, 1.0, 3.0]);
        assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 3.0, 5.0, 3.0));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(1.0), "1.00000");
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(-12.5), "-12.5000");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0e-7), "1.00000e-7");
        assert_eq!(fmt_sig6(9.9999996), "10.0000");
    }

    #[test]
    fn passes_respect_budget() {
        let arch = Architecture::all_cnn_c();
        let all = layer_passes(&arch, 10, usize::MAX);
        assert_eq!(all, vec![(0..=9).collect::<Vec<_>>()]);
        let tight = layer_passes(&arch, 10, 10 * 4 * 96 * 32 * 32);
        assert!(tight.len() > 1);
        assert_eq!(tight.concat(), (0..=9).collect::<Vec<_>>());
    }
}
