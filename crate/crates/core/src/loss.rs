//! Regression, segmentation and classification losses.
//!
//! The batched functions operate on tensors and are what training
//! differentiates; the slice-based functions evaluate one instance through
//! the same code in double precision.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::augmentation::TrajectoryTarget;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Smooth-L1 transition point of the trajectory term.
    pub beta1: f64,
    /// Smooth-L1 transition point of the y-limit term.
    pub beta2: f64,
    /// Weight of the y-limit term.
    pub lambda: f64,
    /// Upper bound on perspective weights.
    pub w_max: f64,
    /// Replace `w_max` by the 95th percentile of the training targets' weights.
    pub compute_w_max: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta1: 0.005, beta2: 0.015, lambda: 0.5, w_max: 20.0, compute_w_max: true }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.beta1 > 0.0) {
            v.push("loss.beta1 must be positive".into());
        }
        if !(self.beta2 > 0.0) {
            v.push("loss.beta2 must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            v.push("loss.lambda must be non-negative".into());
        }
        if !(self.w_max > 0.0) {
            v.push("loss.w_max must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("smooth-L1 beta must be positive, got {beta}")))
    }
}

/// `0.5 x² / β` inside `|x| < β`, `|x| - 0.5 β` outside.
pub fn smooth_l1(x: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let a = x.abs();
    Ok(if a < beta { 0.5 * x * x / beta } else { a - 0.5 * beta })
}

pub fn smooth_l1_derivative(x: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(if x.abs() < beta { x / beta } else { x.signum() })
}

/// Reciprocal rail width clamped at `w_max`.
pub fn perspective_weight(x_left: f64, x_right: f64, w_max: f64) -> Result<f64> {
    if !(x_right > x_left) {
        return Err(Error::InvalidArgument(format!("rail width must be positive, got {x_left}..{x_right}")));
    }
    Ok((1.0 / (x_right - x_left)).min(w_max))
}

/// Target-side weight; a zero width takes the cap.
fn target_weight(x_left: f64, x_right: f64, w_max: f64) -> f64 {
    perspective_weight(x_left, x_right, w_max).unwrap_or(w_max)
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    if lo == hi {
        return Ok(v[lo]);
    }
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// 95th percentile of the unclamped weights over every valid anchor.
pub fn compute_wmax<'a>(targets: impl IntoIterator<Item = &'a TrajectoryTarget>) -> Result<f64> {
    let mut pool = Vec::new();
    for t in targets {
        for i in 0..t.anchors() {
            if t.mask[i] {
                let width = t.right[i] - t.left[i];
                pool.push(if width > 0.0 { 1.0 / width } else { f64::INFINITY });
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no valid anchors to compute w_max from".into()));
    }
    percentile(&pool, 95.0)
}

/// Anchor `i` (1-based, bottom-up) is valid iff `i ≤ y_lim · H`.
pub fn anchor_mask(y_lim: f64, anchors: usize) -> Vec<bool> {
    (1..=anchors).map(|i| i as f64 <= y_lim * anchors as f64).collect()
}

/// Element-wise smooth L1 written as `0.5 c² / β + (|x| - c)` with `c = min(|x|, β)`.
pub fn smooth_l1_tensor(x: &Tensor, beta: f64) -> candle_core::Result<Tensor> {
    let a = x.abs()?;
    let c = a.minimum(beta)?;
    (c.sqr()?.affine(0.5 / beta, 0.0)? + (a - c)?)?.contiguous()
}

/// Batched regression targets.
#[derive(Debug, Clone)]
pub struct RegressionTargets {
    /// `(N, 2H)` target x-values, left rail first.
    pub x: Tensor,
    /// `(N, 1)` target y-limits.
    pub y_lim: Tensor,
    /// `(N, H)` per-anchor factors `m_i w_i / Σ m`.
    pub coef: Tensor,
}

impl RegressionTargets {
    pub fn new(targets: &[&TrajectoryTarget], w_max: f64, device: &Device, dtype: DType) -> Result<Self> {
        let n = targets.len();
        let h = targets.first().map(|t| t.anchors()).ok_or_else(|| Error::InvalidArgument("empty target batch".into()))?;
        let mut x = Vec::with_capacity(n * 2 * h);
        let mut y = Vec::with_capacity(n);
        let mut coef = Vec::with_capacity(n * h);
        for t in targets {
            if t.anchors() != h || t.right.len() != h || t.mask.len() != h {
                return Err(Error::InvalidArgument(format!("target has {} anchors, batch has {h}", t.anchors())));
            }
            let valid = t.valid_count();
            if valid == 0 {
                return Err(Error::InvalidArgument("target has no valid anchor".into()));
            }
            x.extend(t.left.iter().chain(&t.right));
            y.push(t.y_lim);
            for i in 0..h {
                coef.push(if t.mask[i] { target_weight(t.left[i], t.right[i], w_max) / valid as f64 } else { 0.0 });
            }
        }
        let make = |v: Vec<f64>, shape: (usize, usize)| Tensor::from_vec(v, shape, device)?.to_dtype(dtype);
        Ok(Self { x: make(x, (n, 2 * h))?, y_lim: make(y, (n, 1))?, coef: make(coef, (n, h))? })
    }
}

/// Per-sample trajectory losses `(N)` from predicted x-values `(N, 2H)`.
pub fn trajectory_loss_batch(pred_x: &Tensor, t: &RegressionTargets, beta1: f64) -> candle_core::Result<Tensor> {
    let h = t.coef.dim(1)?;
    let err = smooth_l1_tensor(&(pred_x - &t.x)?, beta1)?;
    let rails = (err.narrow(1, 0, h)? + err.narrow(1, h, h)?)?;
    (rails * &t.coef)?.sum(1)
}

/// Mean composite loss of a batch of prediction vectors `(N, 2H+1)` whose
/// last column is the y-limit after the sigmoid.
pub fn composite_loss_batch(pred: &Tensor, t: &RegressionTargets, config: &LossConfig) -> candle_core::Result<Tensor> {
    let h = t.coef.dim(1)?;
    let traj = trajectory_loss_batch(&pred.narrow(1, 0, 2 * h)?, t, config.beta1)?;
    let ylim = smooth_l1_tensor(&(pred.narrow(1, 2 * h, 1)? - &t.y_lim)?, config.beta2)?.squeeze(1)?;
    (traj + ylim.affine(config.lambda, 0.0)?)?.mean_all()
}

/// Smoothing term keeping the Dice ratio defined for two empty masks.
pub const DICE_SMOOTHING: f64 = 1e-12;

/// Mean over the batch of `1 - 2|P∩T| / (|P| + |T|)` on probabilities `(N, ...)`.
pub fn dice_loss_batch(probs: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let n = probs.dim(0)?;
    let p = probs.reshape((n, ()))?;
    let t = target.reshape((n, ()))?;
    let inter = (&p * &t)?.sum(1)?;
    let total = (p.sum(1)? + t.sum(1)?)?;
    let ratio = (inter.affine(2.0, DICE_SMOOTHING)? / total.affine(1.0, DICE_SMOOTHING)?)?;
    ratio.affine(-1.0, 1.0)?.mean_all()
}

/// Mean cross-entropy over every `(sample, rail, row)` cell of logits
/// `(N, C, H, K)` against class indices `(N, C, H)`.
pub fn cross_entropy_batch(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), k))?;
    let log_p = candle_nn::ops::log_softmax(&flat, 1)?;
    let picked = log_p.gather(&targets.flatten_all()?.unsqueeze(1)?, 1)?;
    picked.neg()?.mean_all()
}

/// Row-classification targets `[left rows.., right rows..]`: the column bin of
/// each valid anchor (off-frame values clamp to the edge bins) and `columns`
/// (background) above the y-limit.
pub fn class_targets(target: &TrajectoryTarget, columns: usize) -> Vec<usize> {
    let bin = |u: f64| ((u * columns as f64).floor().max(0.0) as usize).min(columns - 1);
    let rail = |xs: &[f64]| xs.iter().zip(&target.mask).map(|(&u, &m)| if m { bin(u) } else { columns }).collect::<Vec<_>>();
    let mut out = rail(&target.left);
    out.extend(rail(&target.right));
    out
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trajectory loss of one prediction `[left x.., right x..]` (length `2H`).
pub fn trajectory_loss(pred: &[f64], target: &TrajectoryTarget, config: &LossConfig) -> Result<f64> {
    let h = target.anchors();
    if pred.len() != 2 * h {
        return Err(Error::InvalidArgument(format!("prediction has {} values, expected {}", pred.len(), 2 * h)));
    }
    check_beta(config.beta1)?;
    let t = RegressionTargets::new(&[target], config.w_max, &Device::Cpu, DType::F64)?;
    let p = Tensor::from_slice(pred, (1, 2 * h), &Device::Cpu)?;
    scalar(trajectory_loss_batch(&p, &t, config.beta1)?.squeeze(0)?)
}

pub fn ylim_loss(pred: f64, target: f64, beta2: f64) -> Result<f64> {
    smooth_l1(pred - target, beta2)
}

/// Composite loss of one prediction vector (length `2H + 1`, y-limit last).
pub fn composite_loss(pred: &[f64], target: &TrajectoryTarget, config: &LossConfig) -> Result<f64> {
    let h = target.anchors();
    if pred.len() != 2 * h + 1 {
        return Err(Error::InvalidArgument(format!("prediction has {} values, expected {}", pred.len(), 2 * h + 1)));
    }
    check_beta(config.beta1)?;
    check_beta(config.beta2)?;
    let t = RegressionTargets::new(&[target], config.w_max, &Device::Cpu, DType::F64)?;
    let p = Tensor::from_slice(pred, (1, 2 * h + 1), &Device::Cpu)?;
    scalar(composite_loss_batch(&p, &t, config)?)
}

/// Dice loss of one probability map against a binary mask.
pub fn dice_loss(probs: &[f64], target: &[bool]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::InvalidArgument(format!("{} probabilities for {} mask cells", probs.len(), target.len())));
    }
    let p = Tensor::from_slice(probs, (1, probs.len()), &Device::Cpu)?;
    let t: Vec<f64> = target.iter().map(|&b| b as u8 as f64).collect();
    let t = Tensor::from_vec(t, (1, target.len()), &Device::Cpu)?;
    scalar(dice_loss_batch(&p, &t)?)
}

/// Mean cross-entropy of `classes`-way logits (row-major cells) against class indices.
pub fn rowwise_cross_entropy(logits: &[f64], targets: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(Error::InvalidArgument(format!("{} logits for {} cells of {classes} classes", logits.len(), targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("target class {bad} outside [0, {})", classes)));
    }
    let l = Tensor::from_slice(logits, (targets.len(), classes), &Device::Cpu)?;
    let idx: Vec<u32> = targets.iter().map(|&c| c as u32).collect();
    let t = Tensor::from_vec(idx, targets.len(), &Device::Cpu)?;
    scalar(cross_entropy_batch(&l, &t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn target(left: Vec<f64>, right: Vec<f64>, y_lim: f64) -> TrajectoryTarget {
        let mask = anchor_mask(y_lim, left.len());
        TrajectoryTarget { left, right, y_lim, mask }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 0.005).unwrap(), 0.0);
        assert!((smooth_l1(0.0025, 0.005).unwrap() - 0.000625).abs() < 1e-15);
        assert!((smooth_l1(0.01, 0.005).unwrap() - 0.0075).abs() < 1e-15);
        assert!(smooth_l1(1.0, 0.0).is_err());
        assert!(smooth_l1(1.0, -1.0).is_err());
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        let beta = 0.015;
        for s in [1.0, -1.0] {
            let (a, b) = (s * (beta - 1e-9), s * (beta + 1e-9));
            assert!((smooth_l1(a, beta).unwrap() - smooth_l1(b, beta).unwrap()).abs() < 1e-8);
            assert!((smooth_l1_derivative(a, beta).unwrap() - smooth_l1_derivative(b, beta).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn perspective_weight_examples() {
        assert_eq!(perspective_weight(0.0, 1.0, 20.0).unwrap(), 1.0);
        assert!((perspective_weight(0.45, 0.55, 20.0).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(perspective_weight(0.49, 0.51, 20.0).unwrap(), 20.0);
        assert!(perspective_weight(0.5, 0.5, 20.0).is_err());
    }

    #[test]
    fn wmax_examples() {
        let t = target(vec![0.45; 4], vec![0.55; 4], 1.0);
        assert!((compute_wmax([&t]).unwrap() - 10.0).abs() < 1e-9);
        // Reciprocal widths 1..=100: rank 0.95 · 99 = 94.05 between 95 and 96.
        let targets: Vec<_> = (1..=100).map(|k| target(vec![0.0], vec![1.0 / k as f64], 1.0)).collect();
        assert!((compute_wmax(&targets).unwrap() - 95.05).abs() < 1e-9);
        assert!(compute_wmax(&[target(vec![0.0; 2], vec![0.1; 2], 0.0)]).is_err());
    }

    #[test]
    fn anchor_mask_examples() {
        assert!(anchor_mask(1.0, 64).iter().all(|&m| m));
        assert!(anchor_mask(0.0, 64).iter().all(|&m| !m));
        let half = anchor_mask(0.5, 64);
        assert!(half[..32].iter().all(|&m| m) && half[32..].iter().all(|&m| !m));
    }

    #[test]
    fn trajectory_loss_examples() {
        let cfg = LossConfig { w_max: 20.0, ..Default::default() };
        let t = target(vec![0.25], vec![0.75], 1.0);
        assert_eq!(trajectory_loss(&[0.25, 0.75], &t, &cfg).unwrap(), 0.0);
        let v = trajectory_loss(&[0.26, 0.76], &t, &cfg).unwrap();
        assert!((v - 0.03).abs() < 1e-12, "{v}");
        let none = target(vec![0.25], vec![0.75], 0.0);
        assert!(trajectory_loss(&[0.25, 0.75], &none, &cfg).is_err());
    }

    #[test]
    fn ylim_and_composite_examples() {
        assert!((ylim_loss(0.53, 0.5, 0.015).unwrap() - 0.0225).abs() < 1e-12);
        assert!((ylim_loss(0.5075, 0.5, 0.015).unwrap() - 0.001875).abs() < 1e-12);
        assert_eq!(ylim_loss(0.4, 0.4, 0.015).unwrap(), 0.0);

        let t = target(vec![0.2, 0.3], vec![0.8, 0.7], 1.0);
        let cfg = LossConfig::default();
        assert_eq!(composite_loss(&t.to_vector(), &t, &cfg).unwrap(), 0.0);
        let mut p = t.to_vector();
        p[0] += 0.03;
        p[4] -= 0.2;
        let traj = trajectory_loss(&p[..4], &t, &cfg).unwrap();
        let total = composite_loss(&p, &t, &cfg).unwrap();
        assert!((total - (traj + 0.5 * smooth_l1(-0.2, 0.015).unwrap())).abs() < 1e-12);
        let no_ylim = LossConfig { lambda: 0.0, ..cfg };
        assert!((composite_loss(&p, &t, &no_ylim).unwrap() - traj).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        let n = 8;
        let ones = vec![1.0; n];
        let half: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
        assert!((dice_loss(&ones, &half).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let hard: Vec<f64> = half.iter().map(|&b| b as u8 as f64).collect();
        assert!(dice_loss(&hard, &half).unwrap().abs() < 1e-12);
        assert!(dice_loss(&[0.0; 4], &[false; 4]).unwrap().abs() < 1e-12);
        let other: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let other_f: Vec<f64> = other.iter().map(|&b| b as u8 as f64).collect();
        assert!((dice_loss(&hard, &other).unwrap() - dice_loss(&other_f, &half).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = rowwise_cross_entropy(&vec![0.0; 129 * 3], &[0, 64, 128], 129).unwrap();
        assert!((v - 129f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 129];
        peaked[7] = 50.0;
        assert!(rowwise_cross_entropy(&peaked, &[7], 129).unwrap() < 1e-20);
        assert!(rowwise_cross_entropy(&peaked, &[129], 129).is_err());
        let logits = [0.3, -1.2, 2.0, 0.7];
        let swapped = [0.3, 0.7, 2.0, -1.2];
        let a = rowwise_cross_entropy(&logits, &[2], 4).unwrap();
        let b = rowwise_cross_entropy(&swapped, &[2], 4).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn class_targets_quantize_and_mark_background() {
        let t = target(vec![-0.2, 0.5, 0.5, 0.5], vec![0.999, 1.3, 0.6, 0.6], 0.5);
        let c = class_targets(&t, 128);
        assert_eq!(c, vec![0, 64, 128, 128, 127, 127, 128, 128]);
    }

    proptest! {
        #[test]
        fn masked_anchors_do_not_affect_trajectory_loss(
            ylim in 0.1f64..0.9, noise in prop::collection::vec(-1.0f64..1.0, 16)
        ) {
            let h = 8;
            let left: Vec<f64> = (0..h).map(|i| 0.3 + 0.02 * i as f64).collect();
            let right: Vec<f64> = (0..h).map(|i| 0.7 - 0.02 * i as f64).collect();
            let t = target(left.clone(), right.clone(), ylim.max(0.25));
            let cfg = LossConfig::default();
            let mut pred: Vec<f64> = left.iter().chain(&right).zip(&noise).map(|(x, n)| x + 0.05 * n).collect();
            let base = trajectory_loss(&pred, &t, &cfg).unwrap();
            for i in 0..h {
                if !t.mask[i] {
                    pred[i] += noise[i] * 10.0;
                    pred[h + i] -= noise[h + i] * 10.0;
                }
            }
            prop_assert_eq!(trajectory_loss(&pred, &t, &cfg).unwrap(), base);
        }

        #[test]
        fn loss_grows_with_error_beyond_smooth_zone(e in 0.006f64..0.5, d in 0.001f64..0.1) {
            let t = target(vec![0.3; 4], vec![0.7; 4], 1.0);
            let cfg = LossConfig::default();
            let p = |e: f64| [0.3 + e, 0.3, 0.3, 0.3, 0.7, 0.7, 0.7, 0.7];
            prop_assert!(trajectory_loss(&p(e + d), &t, &cfg).unwrap() > trajectory_loss(&p(e), &t, &cfg).unwrap());
        }

        #[test]
        fn clamped_weights_match_pinned_weights(width in 0.001f64..0.049, err in -0.1f64..0.1) {
            // Width below 1/w_max: the loss equals w_max times the raw rail error sum.
            let cfg = LossConfig { w_max: 20.0, ..Default::default() };
            let t = target(vec![0.5], vec![0.5 + width], 1.0);
            let l = trajectory_loss(&[0.5 + err, 0.5 + width], &t, &cfg).unwrap();
            prop_assert!((l - 20.0 * smooth_l1(err, cfg.beta1).unwrap()).abs() < 1e-12);
        }
    }
}
