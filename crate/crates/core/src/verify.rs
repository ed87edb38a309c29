//! Numerical verification suites: convolution against a direct loop
//! implementation, objective terms against brute-force formulas, and
//! finite-difference gradients of the full training objective on a small
//! network in `f64`.

use rand::Rng;

use crate::error::Result;
use crate::network::{forward, init_params_as, Architecture, ConvSpec, ModelParams, Shape};
use crate::objective::{
    alpha_schedule, cross_entropy, cross_entropy_with_grad, invariance_loss, invariance_loss_with_grad,
    mean_sq_distance, total_loss, GroupIndex, InvarianceVariant,
};
use crate::rng::stream;
use crate::trainer::{objective_and_grad, objective_value};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }
}

/// Relative error `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Direct convolution of one `C×H×W` image.
pub fn naive_conv(spec: &ConvSpec, ins: Shape, weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let k = spec.kernel;
    let oh = spec.output_side(ins.height);
    let ow = spec.output_side(ins.width);
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias[o];
                for c in 0..spec.in_channels {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= ins.height as isize || ix >= ins.width as isize {
                                continue;
                            }
                            s += weight[((o * spec.in_channels + c) * k + ki) * k + kj]
                                * x[(c * ins.height + iy as usize) * ins.width + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = if spec.relu { s.max(0.0) } else { s };
            }
        }
    }
    out
}

/// Network forward pass against [`naive_conv`] for several layer shapes.
pub fn conv_suite() -> Result<Vec<Check>> {
    let mut rng = stream(11, "verify-conv", 0, 0);
    type Case<'a> = (&'a str, Shape, &'a [(usize, usize, usize)]);
    let cases: [Case; 4] = [
        ("conv 3x3 stride 1", Shape { channels: 3, height: 7, width: 6 }, &[(5, 3, 1)]),
        ("conv 3x3 stride 2", Shape { channels: 4, height: 9, width: 8 }, &[(3, 3, 2)]),
        ("conv 1x1", Shape { channels: 6, height: 5, width: 5 }, &[(4, 1, 1)]),
        ("conv stack with relu", Shape { channels: 3, height: 8, width: 8 }, &[(6, 3, 2), (4, 3, 1), (5, 1, 1)]),
    ];
    let mut checks = Vec::new();
    for (name, input, layers) in cases {
        let arch = Architecture::custom(input, layers)?;
        let mut params: ModelParams<f64> = init_params_as(&arch, &mut rng);
        for layer in &mut params.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let batch = 2;
        let x: Vec<f64> = (0..batch * input.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let acts = forward(&params, &x, batch)?;
        let mut worst = 0.0f64;
        for b in 0..batch {
            let mut h = x[b * input.len()..(b + 1) * input.len()].to_vec();
            let mut shape = input;
            for (l, spec) in arch.layers.iter().enumerate() {
                h = naive_conv(spec, shape, &params.layers[l].weight, &params.layers[l].bias, &h);
                shape = arch.shape(l + 1);
                for (a, e) in acts.image_tap(l + 1, b).iter().zip(&h) {
                    worst = worst.max((a - e).abs());
                }
            }
        }
        checks.push(Check::new(name, worst < 1e-10, format!("max abs diff {worst:.3e}")));
    }
    Ok(checks)
}

/// Brute-force invariance loss from its pairwise definition.
pub fn brute_invariance_loss(
    x: &[f64],
    batch: usize,
    dim: usize,
    groups: &GroupIndex,
    variant: InvarianceVariant,
) -> f64 {
    let d = |i: usize, j: usize| -> f64 {
        (0..dim).map(|k| (x[i * dim + k] - x[j * dim + k]).powi(2)).sum::<f64>() / dim as f64
    };
    let mut num = 0.0;
    for g in 0..groups.num_groups() {
        let m = groups.members(g);
        let mut s = 0.0;
        for &i in m {
            for &j in m {
                s += d(i, j);
            }
        }
        num += s / (m.len() * m.len()) as f64;
    }
    if variant == InvarianceVariant::GroupMean {
        num /= groups.num_groups() as f64;
    }
    let mut den = 0.0;
    for i in 0..batch {
        for j in 0..batch {
            den += d(i, j);
        }
    }
    num / (den / (batch * batch) as f64)
}

/// Objective terms against brute-force formulas on random small instances.
pub fn objective_suite(instances: usize) -> Result<Vec<Check>> {
    let mut rng = stream(12, "verify-objective", 0, 0);
    let (mut msd, mut inv, mut ce, mut total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let m = rng.random_range(1..4usize);
        let k = rng.random_range(2..5usize);
        let batch = m * k;
        let dim = rng.random_range(1..9usize);
        let x: Vec<f64> = (0..batch * dim).map(|_| rng.random_range(-2.0..2.0)).collect();

        let brute =
            x[..dim].iter().zip(&x[(batch - 1) * dim..]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / dim as f64;
        msd = msd.max(rel_err(mean_sq_distance(&x[..dim], &x[(batch - 1) * dim..])?, brute));

        let groups = GroupIndex::contiguous(batch, m)?;
        for variant in [InvarianceVariant::Verbatim, InvarianceVariant::GroupMean] {
            let got = invariance_loss(&x, batch, dim, &groups, variant)?;
            inv = inv.max(rel_err(got, brute_invariance_loss(&x, batch, dim, &groups, variant)));
        }

        let classes = rng.random_range(2..11usize);
        let logits: Vec<f64> = (0..batch * classes).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let mut brute_ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            brute_ce -= (row[y].exp() / z).ln();
        }
        brute_ce /= batch as f64;
        ce = ce.max(rel_err(cross_entropy(&logits, &labels, classes)?, brute_ce));

        let layers = rng.random_range(1..10usize);
        let alpha = rng.random_range(0.01..0.9);
        let schedule = alpha_schedule(layers, alpha)?;
        let terms: Vec<f64> = (0..layers).map(|_| rng.random_range(0.0..3.0)).collect();
        let r = 10f64.powf(1.0 / (layers.max(2) - 1) as f64);
        let a1 = if layers == 1 { alpha } else { alpha * (r - 1.0) / (r.powi(layers as i32) - 1.0) };
        let brute_total =
            (1.0 - alpha) * brute_ce + terms.iter().enumerate().map(|(l, t)| a1 * r.powi(l as i32) * t).sum::<f64>();
        total = total.max(rel_err(total_loss(brute_ce, &terms, &schedule)?, brute_total));
    }
    let tol = 1e-6;
    Ok(vec![
        Check::new("mean squared distance", msd < tol, format!("max rel err {msd:.3e} over {instances}")),
        Check::new("invariance loss", inv < tol, format!("max rel err {inv:.3e} over {instances}")),
        Check::new("cross entropy", ce < tol, format!("max rel err {ce:.3e} over {instances}")),
        Check::new("total loss", total < tol, format!("max rel err {total:.3e} over {instances}")),
    ])
}

/// Central difference of `f` at every coordinate of `x`, compared with
/// `analytic`. Returns `(global relative error, worst coordinate error)`,
/// where the coordinate error is `|a − n| / (max(|a|, |n|) + 1e-6)`.
fn compare_fd(x: &mut [f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<(f64, f64)> {
    let (mut diff2, mut norm2, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x)?;
        x[i] = orig - h;
        let down = f(x)?;
        x[i] = orig;
        let n = (up - down) / (2.0 * h);
        let a = analytic[i];
        diff2 += (a - n).powi(2);
        norm2 += a.abs().max(n.abs()).powi(2);
        worst = worst.max((a - n).abs() / (a.abs().max(n.abs()) + 1e-6));
    }
    let global = if norm2 == 0.0 { 0.0 } else { (diff2 / norm2).sqrt() };
    Ok((global, worst))
}

/// Finite-difference checks of the loss gradients and of the full
/// objective on a two-layer network (8 channels, 8×8 inputs, `B = 8`,
/// `M = 2`, both layers tapped).
pub fn gradient_suite() -> Result<Vec<Check>> {
    const TOL: f64 = 1e-4;
    let mut rng = stream(13, "verify-gradient", 0, 0);
    let mut checks = Vec::new();

    let (batch, dim) = (8, 5);
    let groups = GroupIndex::contiguous(batch, 2)?;
    for variant in [InvarianceVariant::Verbatim, InvarianceVariant::GroupMean] {
        let mut x: Vec<f64> = (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = invariance_loss_with_grad(&x, batch, dim, &groups, variant)?;
        let (global, _) = compare_fd(&mut x, &g, 1e-6, |x| invariance_loss(x, batch, dim, &groups, variant))?;
        checks.push(Check::new(
            &format!("invariance loss gradient ({variant})"),
            global < TOL,
            format!("rel err {global:.3e}"),
        ));
    }

    let classes = 10;
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut logits: Vec<f64> = (0..batch * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, g) = cross_entropy_with_grad(&logits, &labels, classes)?;
    let (global, _) = compare_fd(&mut logits, &g, 1e-6, |z| cross_entropy(z, &labels, classes))?;
    checks.push(Check::new("cross entropy gradient", global < TOL, format!("rel err {global:.3e}")));

    let input = Shape { channels: 3, height: 8, width: 8 };
    let arch = Architecture::custom(input, &[(8, 3, 1), (10, 3, 2)])?;
    let mut params: ModelParams<f64> = init_params_as(&arch, &mut rng);
    for layer in &mut params.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let images: Vec<f64> = (0..batch * input.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tap_layers = [1, 2];
    for variant in [InvarianceVariant::Verbatim, InvarianceVariant::GroupMean] {
        let schedule = alpha_schedule(tap_layers.len(), 0.3)?;
        let eval = objective_and_grad(&params, &images, &labels, &groups, &tap_layers, &schedule, variant)?;
        let analytic: Vec<f64> = eval.grads.iter().flat_map(|g| g.weight.iter().chain(&g.bias).copied()).collect();
        let mut flat: Vec<f64> = params.layers.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect();
        let template = params.clone();
        let (global, worst) = compare_fd(&mut flat, &analytic, 1e-5, |w| {
            let mut p = template.clone();
            let mut it = w.iter();
            for layer in &mut p.layers {
                layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|v| *v = *it.next().unwrap());
            }
            objective_value(&p, &images, &labels, &groups, &tap_layers, &schedule, variant)
        })?;
        checks.push(Check::new(
            &format!("full objective gradient, 2-layer network ({variant})"),
            global < TOL && worst < 1e-3,
            format!("rel err {global:.3e}, worst coordinate {worst:.3e}, {} parameters", analytic.len()),
        ));
    }
    Ok(checks)
}

/// All suites in order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = conv_suite()?;
    checks.extend(objective_suite(200)?);
    checks.extend(gradient_suite()?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for c in run_all().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn brute_loss_worked_example() {
        // Two groups of two 1-d points: {0, 1}, {3, 3}.
        let x = [0.0, 1.0, 3.0, 3.0];
        let g = GroupIndex::contiguous(4, 2).unwrap();
        let l = brute_invariance_loss(&x, 4, 1, &g, InvarianceVariant::Verbatim);
        // numerator 2/4, denominator (2·1 + 4·9 + 4·4)/16
        assert!((l - 0.5 / (54.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 2.0), 0.5);
    }
}
