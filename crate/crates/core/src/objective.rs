//! Loss mathematics: activation distance, the per-layer data augmentation
//! invariance loss, the per-layer coefficient schedule, cross-entropy and
//! the combined objective.
//!
//! Activations of one layer for a batch are a row-major `B × D` matrix.
//! The distance between two rows is their mean squared difference.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Mat, Scalar};

/// Assignment of batch rows to seed groups; every group has the same size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GroupIndex {
    /// Rows `[k·m, (k+1)·m)` form group `k`.
    pub fn contiguous(batch: usize, m: usize) -> Result<Self> {
        if m == 0 || !batch.is_multiple_of(m) {
            return Err(Error::invalid(format!("batch {batch} is not a multiple of group size {m}")));
        }
        Self::from_assignment((0..batch).map(|r| r / m).collect())
    }

    /// Group ids must be `0..K` with every group the same size.
    pub fn from_assignment(group_of: Vec<usize>) -> Result<Self> {
        let k = group_of.iter().max().map_or(0, |&g| g + 1);
        let mut members = vec![Vec::new(); k];
        for (row, &g) in group_of.iter().enumerate() {
            members[g].push(row);
        }
        let size = members.first().map_or(0, Vec::len);
        if members.iter().any(|m| m.len() != size || m.is_empty()) {
            return Err(Error::invalid("groups must be non-empty and of equal size"));
        }
        Ok(GroupIndex { group_of, members })
    }

    pub fn batch_size(&self) -> usize {
        self.group_of.len()
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }

    pub fn group_size(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }

    pub fn group_of(&self, row: usize) -> usize {
        self.group_of[row]
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }
}

/// How the within-group numerator is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InvarianceVariant {
    /// `Σ_k |S_k|⁻² Σ_{i,j∈S_k} d(i, j)`, summed (not averaged) over groups.
    #[default]
    Verbatim,
    /// The verbatim numerator divided by the number of groups.
    GroupMean,
}

impl fmt::Display for InvarianceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvarianceVariant::Verbatim => "verbatim",
            InvarianceVariant::GroupMean => "group_mean",
        })
    }
}

impl FromStr for InvarianceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(InvarianceVariant::Verbatim),
            "group_mean" => Ok(InvarianceVariant::GroupMean),
            _ => Err(Error::invalid(format!("unknown invariance variant `{s}`"))),
        }
    }
}

pub fn mean_sq_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("distance of empty vectors"));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `B × B` matrix of mean squared distances between rows of `x`, from the
/// Gram matrix `X Xᵀ`.
pub fn pairwise_distances<T: Scalar>(x: &[T], batch: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || x.len() != batch * dim {
        return Err(Error::ShapeMismatch(format!("activation matrix is not {batch} × {dim}")));
    }
    let mut gram = vec![T::ZERO; batch * batch];
    let xm = Mat::new(x, batch, dim);
    gemm(T::ONE, xm, xm.t(), T::ZERO, &mut gram);
    let sq: Vec<f64> = (0..batch).map(|i| gram[i * batch + i].to_f64()).collect();
    let inv_d = 1.0 / dim as f64;
    let mut dist = vec![0.0; batch * batch];
    for i in 0..batch {
        for j in 0..batch {
            if i != j {
                let v = sq[i] + sq[j] - 2.0 * gram[i * batch + j].to_f64();
                dist[i * batch + j] = v.max(0.0) * inv_d;
            }
        }
    }
    Ok(dist)
}

struct LossParts {
    numerator: f64,
    denominator: f64,
    /// Weight of each within-group pair in the numerator.
    pair_weight: Vec<f64>,
}

fn loss_parts(dist: &[f64], groups: &GroupIndex, variant: InvarianceVariant) -> Result<LossParts> {
    let b = groups.batch_size();
    if b < 2 || groups.num_groups() < 2 {
        return Err(Error::invalid("invariance loss needs a batch of at least two groups"));
    }
    let denominator = dist.iter().sum::<f64>() / (b * b) as f64;
    if !(denominator > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    let group_scale = match variant {
        InvarianceVariant::Verbatim => 1.0,
        InvarianceVariant::GroupMean => 1.0 / groups.num_groups() as f64,
    };
    let mut numerator = 0.0;
    let mut pair_weight = Vec::with_capacity(groups.num_groups());
    for k in 0..groups.num_groups() {
        let members = groups.members(k);
        let w = group_scale / (members.len() * members.len()) as f64;
        let mut s = 0.0;
        for &i in members {
            for &j in members {
                s += dist[i * b + j];
            }
        }
        numerator += w * s;
        pair_weight.push(w);
    }
    Ok(LossParts { numerator, denominator, pair_weight })
}

fn check_batch(groups: &GroupIndex, batch: usize) -> Result<()> {
    if groups.batch_size() != batch {
        return Err(Error::ShapeMismatch(format!(
            "group index covers {} rows, activations have {batch}",
            groups.batch_size()
        )));
    }
    Ok(())
}

/// Within-group mean distance relative to the all-pairs mean distance.
pub fn invariance_loss<T: Scalar>(
    x: &[T],
    batch: usize,
    dim: usize,
    groups: &GroupIndex,
    variant: InvarianceVariant,
) -> Result<f64> {
    check_batch(groups, batch)?;
    let dist = pairwise_distances(x, batch, dim)?;
    let p = loss_parts(&dist, groups, variant)?;
    Ok(p.numerator / p.denominator)
}

/// Loss and its gradient with respect to `x`. Both the numerator and the
/// denominator contribute to the gradient.
pub fn invariance_loss_with_grad<T: Scalar>(
    x: &[T],
    batch: usize,
    dim: usize,
    groups: &GroupIndex,
    variant: InvarianceVariant,
) -> Result<(f64, Vec<T>)> {
    check_batch(groups, batch)?;
    let dist = pairwise_distances(x, batch, dim)?;
    let p = loss_parts(&dist, groups, variant)?;
    let loss = p.numerator / p.denominator;

    // loss = Σ_ij W_ij d_ij with symmetric W, so
    // ∂loss/∂x_a = (4/D) (rowsum(W)_a x_a − (W X)_a). W is a constant
    // `c` plus `w_g` on within-group pairs, hence
    // (W X)_a = c Σ_j x_j + w_g Σ_{j∈g} x_j.
    let c = -p.numerator / (p.denominator * p.denominator) / (batch * batch) as f64;
    let scale = 4.0 / dim as f64;
    let column_sums = |rows: &mut dyn Iterator<Item = usize>| {
        let mut acc = vec![0.0f64; dim];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(&x[r * dim..(r + 1) * dim]) {
                *a += v.to_f64();
            }
        }
        acc
    };
    let total = column_sums(&mut (0..batch));
    let mut grad = vec![T::ZERO; batch * dim];
    for g in 0..groups.num_groups() {
        let members = groups.members(g);
        let wg = p.pair_weight[g] / p.denominator;
        let group_sum = column_sums(&mut members.iter().copied());
        let rowsum = scale * (c * batch as f64 + wg * members.len() as f64);
        let shared: Vec<f64> = total.iter().zip(&group_sum).map(|(t, s)| scale * (c * t + wg * s)).collect();
        for &a in members {
            let out = &mut grad[a * dim..(a + 1) * dim];
            for ((o, xv), sh) in out.iter_mut().zip(&x[a * dim..(a + 1) * dim]).zip(&shared) {
                *o = T::from_f64(rowsum * xv.to_f64() - sh);
            }
        }
    }
    Ok((loss, grad))
}

/// Per-layer invariance coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    pub alpha: f64,
    pub coefficients: Vec<f64>,
}

impl AlphaSchedule {
    /// Plain cross-entropy: `α = 0`, every coefficient zero.
    pub fn disabled(layers: usize) -> Self {
        AlphaSchedule { alpha: 0.0, coefficients: vec![0.0; layers] }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// Geometric coefficients summing to `alpha` with the last ten times the first.
pub fn alpha_schedule(layers: usize, alpha: f64) -> Result<AlphaSchedule> {
    if layers == 0 {
        return Err(Error::invalid("alpha schedule needs at least one layer"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if layers == 1 {
        return Ok(AlphaSchedule { alpha, coefficients: vec![alpha] });
    }
    let ratio = 10f64.powf(1.0 / (layers - 1) as f64);
    let powers: Vec<f64> = (0..layers).map(|l| ratio.powi(l as i32)).collect();
    let first = alpha / powers.iter().sum::<f64>();
    Ok(AlphaSchedule { alpha, coefficients: powers.iter().map(|p| first * p).collect() })
}

fn check_labels(logits_len: usize, labels: &[usize], classes: usize) -> Result<()> {
    if logits_len != labels.len() * classes {
        return Err(Error::ShapeMismatch(format!(
            "{logits_len} logits for {} labels × {classes} classes",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Batch-mean of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels, classes)?.0)
}

pub fn cross_entropy_with_grad<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> Result<(f64, Vec<T>)> {
    check_labels(logits.len(), labels, classes)?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross-entropy of an empty batch"));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::ZERO; logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].to_f64() - max);
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad[i * classes + c] = T::from_f64((e / z - target) / n);
        }
    }
    Ok((loss / n, grad))
}

/// `(1 − α) · ce + Σ_l α_l · inv_l`.
pub fn total_loss(ce: f64, inv_losses: &[f64], schedule: &AlphaSchedule) -> Result<f64> {
    if inv_losses.len() != schedule.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} invariance losses for {} coefficients",
            inv_losses.len(),
            schedule.len()
        )));
    }
    let aux: f64 = schedule.coefficients.iter().zip(inv_losses).map(|(a, l)| a * l).sum();
    Ok((1.0 - schedule.alpha) * ce + aux)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(mean_sq_distance(&[0.0f64, 0.0], &[2.0, 4.0]).unwrap(), 10.0);
        assert_eq!(mean_sq_distance(&[1.5f64, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(mean_sq_distance(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_worked_example() {
        let x = [0.0f64, 1.0, 4.0, 6.0];
        let groups = GroupIndex::contiguous(4, 2).unwrap();
        let loss = invariance_loss(&x, 4, 1, &groups, InvarianceVariant::Verbatim).unwrap();
        assert!((loss - 2.5 / 11.375).abs() < 1e-12);
        let mean = invariance_loss(&x, 4, 1, &groups, InvarianceVariant::GroupMean).unwrap();
        assert!((mean - 1.25 / 11.375).abs() < 1e-12);
    }

    #[test]
    fn identical_within_groups_is_zero() {
        let x = [1.0f64, 2.0, 1.0, 2.0, -3.0, 0.5, -3.0, 0.5];
        let groups = GroupIndex::contiguous(4, 2).unwrap();
        assert_eq!(invariance_loss(&x, 4, 2, &groups, InvarianceVariant::Verbatim).unwrap(), 0.0);
    }

    #[test]
    fn identical_batch_is_degenerate() {
        let x = [0.7f32; 8];
        let groups = GroupIndex::contiguous(4, 2).unwrap();
        assert!(matches!(invariance_loss(&x, 4, 2, &groups, InvarianceVariant::Verbatim), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn single_group_is_rejected() {
        let x = [0.0f64, 1.0];
        let groups = GroupIndex::contiguous(2, 2).unwrap();
        assert!(invariance_loss(&x, 2, 1, &groups, InvarianceVariant::Verbatim).is_err());
    }

    #[test]
    fn group_index_validation() {
        assert!(GroupIndex::contiguous(6, 4).is_err());
        assert!(GroupIndex::from_assignment(vec![0, 0, 1]).is_err());
        let g = GroupIndex::from_assignment(vec![1, 0, 1, 0]).unwrap();
        assert_eq!(g.members(1), &[0, 2]);
        assert_eq!(g.group_size(), 2);
    }

    #[test]
    fn schedule_examples() {
        let s = alpha_schedule(2, 0.1).unwrap();
        assert!((s.coefficients[0] - 1.0 / 110.0).abs() < 1e-12);
        assert!((s.coefficients[1] - 10.0 / 110.0).abs() < 1e-12);
        let s = alpha_schedule(3, 0.1).unwrap();
        let first = 0.1 / (11.0 + 10f64.sqrt());
        for (c, e) in s.coefficients.iter().zip([first, first * 10f64.sqrt(), first * 10.0]) {
            assert!((c - e).abs() < 1e-12, "{c} vs {e}");
        }
        for (c, e) in s.coefficients.iter().zip([0.0070610, 0.0223295, 0.0706095]) {
            assert!((c - e).abs() < 1e-6, "{c} vs {e}");
        }
        assert_eq!(alpha_schedule(1, 0.1).unwrap().coefficients, vec![0.1]);
        assert!(alpha_schedule(0, 0.1).is_err());
        assert!(alpha_schedule(3, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = [0.0f64; 20];
        let ce = cross_entropy(&uniform, &[3, 7], 10).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let mut sharp = [0.0f64; 10];
        sharp[4] = 30.0;
        assert!(cross_entropy(&sharp, &[4], 10).unwrap() < 1e-9);
        assert!(cross_entropy(&sharp, &[10], 10).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn total_loss_examples() {
        let s = alpha_schedule(2, 0.1).unwrap();
        let t = total_loss(2.302585, &[1.0, 1.0], &s).unwrap();
        assert!((t - 2.1723265).abs() < 1e-9);
        assert_eq!(total_loss(1.7, &[3.0, 4.0], &AlphaSchedule::disabled(2)).unwrap(), 1.7);
        assert!((total_loss(2.0, &[0.0, 0.0], &s).unwrap() - 1.8).abs() < 1e-15);
        assert!(total_loss(2.0, &[0.0], &s).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("group_mean".parse::<InvarianceVariant>().unwrap(), InvarianceVariant::GroupMean);
        assert_eq!(InvarianceVariant::Verbatim.to_string(), "verbatim");
        assert!("mean".parse::<InvarianceVariant>().is_err());
    }
}
