//! All-CNN-C: nine convolutions, ReLU after all but the last, global average
//! pooling into class logits.
//!
//! Activations are addressed by layer index: 0 is the (normalized) input,
//! `l ∈ 1..=9` the output of `conv{l}` after its ReLU. Layer 9 has no ReLU
//! and its map is taken before pooling.

mod checkpoint;
mod conv;

pub use checkpoint::{checkpoint_id, load_checkpoint, load_checkpoint_for, save_checkpoint};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use conv::{conv_backward, conv_forward, ConvScratch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<ConvSpec>,
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, relu: bool) -> ConvSpec {
    ConvSpec { in_channels, out_channels, kernel, stride, padding: kernel / 2, relu }
}

impl Architecture {
    /// Full-width All-CNN-C on 3×32×32 inputs.
    pub fn all_cnn_c() -> Self {
        Self::all_cnn_c_width(1.0)
    }

    /// All-CNN-C with channel counts scaled by `multiplier` (96 and 192 base
    /// widths; the 10-way readout is unchanged).
    pub fn all_cnn_c_width(multiplier: f64) -> Self {
        let narrow = ((96.0 * multiplier).round() as usize).max(1);
        let wide = ((192.0 * multiplier).round() as usize).max(1);
        Architecture {
            input: Shape { channels: 3, height: 32, width: 32 },
            layers: vec![
                conv(3, narrow, 3, 1, true),
                conv(narrow, narrow, 3, 1, true),
                conv(narrow, narrow, 3, 2, true),
                conv(narrow, wide, 3, 1, true),
                conv(wide, wide, 3, 1, true),
                conv(wide, wide, 3, 2, true),
                conv(wide, wide, 3, 1, true),
                conv(wide, wide, 1, 1, true),
                conv(wide, 10, 1, 1, false),
            ],
        }
    }

    /// Stack of same-padded convolutions, ReLU on all but the last layer.
    pub fn custom(input: Shape, layers: &[(usize, usize, usize)]) -> Result<Self> {
        let mut in_ch = input.channels;
        let n = layers.len();
        let layers = layers
            .iter()
            .enumerate()
            .map(|(i, &(out, kernel, stride))| {
                let spec = conv(in_ch, out, kernel, stride, i + 1 < n);
                in_ch = out;
                spec
            })
            .collect();
        let arch = Architecture { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("architecture has no layers".into()));
        }
        let mut ch = self.input.channels;
        let mut h = self.input.height;
        let mut w = self.input.width;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != ch {
                return Err(Error::ShapeMismatch(format!(
                    "conv{} expects {} input channels, previous layer gives {ch}",
                    i + 1,
                    l.in_channels
                )));
            }
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::ShapeMismatch(format!("conv{} has a zero dimension", i + 1)));
            }
            if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel {
                return Err(Error::ShapeMismatch(format!("conv{} kernel exceeds its input", i + 1)));
            }
            ch = l.out_channels;
            h = l.output_side(h);
            w = l.output_side(w);
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvSpec::param_count).sum()
    }

    /// Shape of activation `l` (0 = input).
    pub fn shape(&self, layer: usize) -> Shape {
        let mut s = self.input;
        for spec in &self.layers[..layer] {
            s = Shape {
                channels: spec.out_channels,
                height: spec.output_side(s.height),
                width: spec.output_side(s.width),
            };
        }
        s
    }

    pub fn shapes(&self) -> Vec<Shape> {
        (0..=self.depth()).map(|l| self.shape(l)).collect()
    }

    /// Flattened length `D^(l)` of activation `l`.
    pub fn tap_dim(&self, layer: usize) -> usize {
        self.shape(layer).len()
    }

    pub fn layer_name(layer: usize) -> String {
        if layer == 0 {
            "input".to_string()
        } else {
            format!("conv{layer}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `out × in × k × k`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layers
            .iter()
            .map(|l| ConvParams { weight: vec![T::ZERO; l.weight_len()], bias: vec![T::ZERO; l.out_channels] })
            .collect();
        ModelParams { arch: arch.clone(), layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        ModelParams {
            arch: self.arch.clone(),
            layers: self.layers.iter().map(|l| ConvParams { weight: conv(&l.weight), bias: conv(&l.bias) }).collect(),
        }
    }

    /// Flat view over every parameter, layer by layer, weights before biases.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> ModelParams<f32> {
    init_params_as(arch, rng)
}

pub fn init_params_as<T: Scalar, R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> ModelParams<T> {
    let mut params = ModelParams::<T>::zeros(arch);
    for (spec, layer) in arch.layers.iter().zip(&mut params.layers) {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut layer.weight {
            *w = T::from_f64(normal.sample(rng));
        }
    }
    params
}

/// Every activation of a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    batch: usize,
    dims: Vec<usize>,
    /// `data[l]` is `batch × dims[l]`.
    data: Vec<Vec<T>>,
    logits: Vec<T>,
    classes: usize,
}

impl<T: Scalar> Activations<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dim(&self, layer: usize) -> usize {
        self.dims[layer]
    }

    /// `batch × D` matrix of activation `layer`.
    pub fn tap(&self, layer: usize) -> &[T] {
        &self.data[layer]
    }

    pub fn image_tap(&self, layer: usize, image: usize) -> &[T] {
        let d = self.dims[layer];
        &self.data[layer][image * d..(image + 1) * d]
    }

    /// `batch × classes`.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn into_taps(self, want: &[usize]) -> ActivationTaps<T> {
        let mut layers = BTreeMap::new();
        let mut data: Vec<Option<Vec<T>>> = self.data.into_iter().map(Some).collect();
        for &l in want {
            if let Some(v) = data.get_mut(l).and_then(Option::take) {
                layers.insert(l, (self.dims[l], v));
            }
        }
        ActivationTaps { batch: self.batch, layers }
    }
}

/// Activations for a requested subset of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTaps<T> {
    pub batch: usize,
    /// layer → (D, `batch × D` values)
    pub layers: BTreeMap<usize, (usize, Vec<T>)>,
}

impl<T> ActivationTaps<T> {
    pub fn image(&self, layer: usize, image: usize) -> Option<&[T]> {
        self.layers.get(&layer).map(|(d, v)| &v[image * d..(image + 1) * d])
    }
}

fn check_input<T>(arch: &Architecture, input: &[T], batch: usize) -> Result<()> {
    let d0 = arch.input.len();
    if input.len() != batch * d0 {
        return Err(Error::ShapeMismatch(format!("input has {} values, expected {batch} × {d0}", input.len())));
    }
    Ok(())
}

/// Forward pass over `batch` channel-planar images, retaining every layer.
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &[T], batch: usize) -> Result<Activations<T>> {
    let arch = &params.arch;
    check_input(arch, input, batch)?;
    let shapes = arch.shapes();
    let dims: Vec<usize> = shapes.iter().map(Shape::len).collect();
    let mut data = Vec::with_capacity(dims.len());
    data.push(input.to_vec());
    let mut scratch = ConvScratch::default();
    for (li, spec) in arch.layers.iter().enumerate() {
        let (d_in, d_out) = (dims[li], dims[li + 1]);
        let mut out = vec![T::ZERO; batch * d_out];
        let prev = &data[li];
        for i in 0..batch {
            let x = &prev[i * d_in..(i + 1) * d_in];
            let y = &mut out[i * d_out..(i + 1) * d_out];
            conv_forward(spec, shapes[li], shapes[li + 1], &params.layers[li], x, y, &mut scratch);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow { layer: li + 1 });
        }
        data.push(out);
    }
    let top = *shapes.last().unwrap();
    let classes = top.channels;
    let plane = top.plane();
    let inv_plane = T::from_f64(1.0 / plane as f64);
    let last = data.last().unwrap();
    let mut logits = vec![T::ZERO; batch * classes];
    for i in 0..batch {
        let map = &last[i * top.len()..(i + 1) * top.len()];
        for c in 0..classes {
            let mut s = T::ZERO;
            for &v in &map[c * plane..(c + 1) * plane] {
                s += v;
            }
            logits[i * classes + c] = s * inv_plane;
        }
    }
    Ok(Activations { batch, dims, data, logits, classes })
}

/// Forward pass returning logits and only the requested taps.
pub fn forward_with_taps<T: Scalar>(
    params: &ModelParams<T>,
    input: &[T],
    batch: usize,
    want_taps: &[usize],
) -> Result<(Vec<T>, ActivationTaps<T>)> {
    let acts = forward(params, input, batch)?;
    let logits = acts.logits.clone();
    Ok((logits, acts.into_taps(want_taps)))
}

/// Gradient of a scalar loss with respect to every parameter.
///
/// `d_logits` is `batch × classes`; each `d_taps` entry is `(layer, batch × D)`
/// and is added to the gradient flowing into that activation. Contributions
/// from several taps accumulate. Images are reduced in index order.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    acts: &Activations<T>,
    d_logits: &[T],
    d_taps: &[(usize, &[T])],
) -> Result<Vec<ConvParams<T>>> {
    let arch = &params.arch;
    let depth = arch.depth();
    let batch = acts.batch;
    if acts.depth() != depth {
        return Err(Error::ShapeMismatch("activations come from a different architecture".into()));
    }
    if d_logits.len() != batch * acts.classes {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient has {} values, expected {batch} × {}",
            d_logits.len(),
            acts.classes
        )));
    }
    let mut tap_grads: Vec<Vec<&[T]>> = vec![Vec::new(); depth + 1];
    for &(layer, g) in d_taps {
        if layer > depth || g.len() != batch * acts.dims[layer] {
            return Err(Error::ShapeMismatch(format!("tap gradient for layer {layer} has wrong shape")));
        }
        tap_grads[layer].push(g);
    }

    let shapes = arch.shapes();
    let mut grads = ModelParams::<T>::zeros(arch).layers;
    let mut scratch = ConvScratch::default();
    let top = shapes[depth];
    let plane = top.plane();
    let inv_plane = T::from_f64(1.0 / plane as f64);

    for i in 0..batch {
        let mut g = vec![T::ZERO; top.len()];
        for c in 0..acts.classes {
            let v = d_logits[i * acts.classes + c] * inv_plane;
            g[c * plane..(c + 1) * plane].iter_mut().for_each(|x| *x = v);
        }
        add_tap_grads(&mut g, &tap_grads[depth], i);

        for l in (1..=depth).rev() {
            let spec = &arch.layers[l - 1];
            if spec.relu {
                for (gv, &a) in g.iter_mut().zip(acts.image_tap(l, i)) {
                    if a <= T::ZERO {
                        *gv = T::ZERO;
                    }
                }
            }
            let want_dx = l > 1;
            let mut dx = if want_dx { vec![T::ZERO; shapes[l - 1].len()] } else { Vec::new() };
            conv_backward(
                spec,
                shapes[l - 1],
                shapes[l],
                &params.layers[l - 1],
                acts.image_tap(l - 1, i),
                &g,
                &mut grads[l - 1],
                want_dx.then_some(dx.as_mut_slice()),
                &mut scratch,
            );
            if want_dx {
                add_tap_grads(&mut dx, &tap_grads[l - 1], i);
                g = dx;
            }
        }
    }
    Ok(grads)
}

fn add_tap_grads<T: Scalar>(g: &mut [T], taps: &[&[T]], image: usize) {
    let d = g.len();
    for t in taps {
        for (gv, &tv) in g.iter_mut().zip(&t[image * d..(image + 1) * d]) {
            *gv += tv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn all_cnn_c_parameter_count() {
        assert_eq!(Architecture::all_cnn_c().param_count(), 1_369_738);
    }

    #[test]
    fn tap_dimensions() {
        let a = Architecture::all_cnn_c();
        assert_eq!(a.tap_dim(0), 3 * 32 * 32);
        assert_eq!(a.tap_dim(1), 96 * 32 * 32);
        assert_eq!(a.tap_dim(3), 96 * 16 * 16);
        assert_eq!(a.tap_dim(6), 192 * 8 * 8);
        assert_eq!(a.tap_dim(7), 192 * 8 * 8);
        assert_eq!(a.tap_dim(9), 10 * 8 * 8);
    }

    #[test]
    fn width_multiplier() {
        let a = Architecture::all_cnn_c_width(0.5);
        assert_eq!(a.layers[0].out_channels, 48);
        assert_eq!(a.layers[3].out_channels, 96);
        assert_eq!(a.num_classes(), 10);
        a.validate().unwrap();
    }

    #[test]
    fn he_init_is_deterministic_and_scaled() {
        let arch = Architecture::all_cnn_c();
        let a = init_params(&arch, &mut stream(5, "init", 0, 0));
        let b = init_params(&arch, &mut stream(5, "init", 0, 0));
        assert_eq!(a, b);
        let w = &a.layers[0].weight;
        assert_eq!(w.len(), 2592);
        let mean = w.iter().map(|&v| f64::from(v)).sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (2.0f64 / 27.0).sqrt();
        assert!((std / expected - 1.0).abs() < 0.1, "std {std} vs {expected}");
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_gives_zero_logits_and_taps() {
        let arch = Architecture::all_cnn_c_width(0.125);
        let params = ModelParams::<f32>::zeros(&arch);
        let input: Vec<f32> = (0..2 * 3072).map(|i| (i % 7) as f32 - 3.0).collect();
        let acts = forward(&params, &input, 2).unwrap();
        assert!(acts.logits().iter().all(|&v| v == 0.0));
        for l in 1..=9 {
            assert!(acts.tap(l).iter().all(|&v| v == 0.0));
        }
        assert_eq!(acts.tap(0), &input[..]);
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let arch = Architecture::all_cnn_c_width(0.125);
        let params = init_params(&arch, &mut stream(1, "init", 0, 0));
        let img: Vec<f32> = (0..3072).map(|i| ((i * 13) % 17) as f32 / 17.0).collect();
        let input: Vec<f32> = img.iter().chain(&img).chain(&img).copied().collect();
        let acts = forward(&params, &input, 3).unwrap();
        let l = acts.logits();
        assert_eq!(l[0..10], l[10..20]);
        assert_eq!(l[0..10], l[20..30]);
        let again = forward(&params, &input, 3).unwrap();
        assert_eq!(again.logits(), l);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let arch = Architecture::all_cnn_c_width(0.125);
        let mut params = ModelParams::<f32>::zeros(&arch);
        params.layers[1].bias[0] = f32::INFINITY;
        let input = vec![0.5f32; 3072];
        assert!(matches!(forward(&params, &input, 1), Err(Error::NumericOverflow { layer: 2 })));
    }

    #[test]
    fn taps_subset() {
        let arch = Architecture::all_cnn_c_width(0.125);
        let params = init_params(&arch, &mut stream(1, "init", 0, 0));
        let input = vec![0.25f32; 2 * 3072];
        let (logits, taps) = forward_with_taps(&params, &input, 2, &[0, 3, 9]).unwrap();
        assert_eq!(logits.len(), 20);
        assert_eq!(taps.layers.keys().copied().collect::<Vec<_>>(), vec![0, 3, 9]);
        assert_eq!(taps.image(3, 1).unwrap().len(), arch.tap_dim(3));
        assert!(taps.image(5, 0).is_none());
    }

    #[test]
    fn backward_rejects_bad_shapes() {
        let arch = Architecture::custom(Shape { channels: 1, height: 4, width: 4 }, &[(2, 3, 1), (3, 1, 1)]).unwrap();
        let params = init_params_as::<f64, _>(&arch, &mut stream(1, "init", 0, 0));
        let acts = forward(&params, &[0.5; 16], 1).unwrap();
        assert!(backward(&params, &acts, &[0.0; 2], &[]).is_err());
        let bad = vec![0.0; 5];
        assert!(backward(&params, &acts, &[0.0; 3], &[(1, &bad)]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = Architecture::custom(Shape { channels: 3, height: 8, width: 8 }, &[(4, 3, 1), (4, 3, 2), (5, 1, 1)])
            .unwrap();
        let params = init_params_as::<f64, _>(&arch, &mut stream(2, "init", 0, 0));
        let input: Vec<f64> = (0..2 * 192).map(|i| (i as f64 * 0.37).sin()).collect();
        let acts = forward(&params, &input, 2).unwrap();
        let grads = backward(&params, &acts, &[0.0; 10], &[]).unwrap();
        assert!(grads.iter().all(|g| g.weight.iter().chain(&g.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn tap_gradient_only_reaches_upstream_layers() {
        let arch = Architecture::all_cnn_c_width(0.125);
        let params = init_params_as::<f32, _>(&arch, &mut stream(3, "init", 0, 0));
        let input: Vec<f32> = (0..3072).map(|i| ((i as f32) * 0.01).cos()).collect();
        let acts = forward(&params, &input, 1).unwrap();
        let ones = vec![1.0f32; arch.tap_dim(1)];
        let grads = backward(&params, &acts, &[0.0; 10], &[(1, &ones)]).unwrap();
        assert!(grads[0].weight.iter().any(|&v| v != 0.0));
        for g in &grads[1..] {
            assert!(g.weight.iter().chain(&g.bias).all(|&v| v == 0.0));
        }
    }
}
