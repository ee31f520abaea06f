//! Training loop: one-cycle Adam over online-augmented crops, per-epoch
//! validation and checkpoint selection over the last tenth of the run.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{annotation_mask, annotation_mask_in_view, build_sample, image_to_chw, AugmentationConfig, TrajectoryTarget};
use crate::dataset::LabeledImage;
use crate::geometry::{iou, CropRegion, PathMask};
use crate::inference::decode_output;
use crate::loss::{class_targets, composite_loss_batch, compute_wmax, cross_entropy_batch, dice_loss_batch, LossConfig, RegressionTargets};
use crate::model::layers::{no_grad, sigmoid};
use crate::model::{build_model, BackboneId, BackboneSpec, HeadSpec, Model, ModelSpec, Paradigm};
use crate::{Error, Result};

/// Fraction of the schedule spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Starting rate is `peak / INITIAL_DIV`.
pub const INITIAL_DIV: f64 = 1e3;
/// Final rate is the starting rate divided by this.
pub const FINAL_DIV: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub backbone: BackboneId,
    /// Encoder weights with torchvision names.
    pub pretrained: Option<PathBuf>,
    pub batch_size: usize,
    /// Defaults to the paradigm's budget.
    pub epochs: Option<usize>,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Defaults to the paradigm's standard head with `augmentation.anchors` rows.
    pub head: Option<HeadSpec>,
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Regression,
            backbone: BackboneId::ResNet18,
            pretrained: None,
            batch_size: 8,
            epochs: None,
            peak_lr: 1e-4,
            warmup_fraction: WARMUP_FRACTION,
            seed: 0,
            head: None,
            augmentation: AugmentationConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.paradigm.default_epochs())
    }

    pub fn head_spec(&self) -> HeadSpec {
        if let Some(h) = &self.head {
            return h.clone();
        }
        let mut head = HeadSpec::default_for(self.paradigm);
        match &mut head {
            HeadSpec::Regression(r) => r.anchors = self.augmentation.anchors,
            HeadSpec::Classification(c) => c.anchors = self.augmentation.anchors,
            HeadSpec::Segmentation(_) => {}
        }
        head
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { backbone: BackboneSpec::new(self.backbone), head: self.head_spec(), input_size: self.augmentation.work_size as usize }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs() == 0 {
            v.push("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            v.push("train.peak_lr must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            v.push("train.warmup_fraction must be in (0, 1)".into());
        }
        let head = self.head_spec();
        if head.paradigm() != self.paradigm {
            v.push(format!("train.head is a {} head but train.paradigm is {}", head.paradigm(), self.paradigm));
        }
        if let Some(a) = head.anchors() {
            if a != self.augmentation.anchors {
                v.push(format!("head has {a} anchors but augmentation.anchors is {}", self.augmentation.anchors));
            }
        }
        if let Some(p) = &self.pretrained {
            if !p.is_file() {
                v.push(format!("train.pretrained: {} does not exist", p.display()));
            }
        }
        v.extend(self.augmentation.violations());
        v.extend(self.loss.violations());
        v.extend(self.model_spec().violations());
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

    /// Stable hex digest of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a(serde_json::to_string(self).unwrap_or_default().as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

/// Seed of an image's evaluation crop, independent of dataset order.
pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    derive_seed(seed, &[fnv1a(image_id.as_bytes())])
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

/// One-cycle rate at `step` of `total_steps`: cosine rise from
/// `peak / INITIAL_DIV` to `peak` over the warm-up, then cosine decay to
/// `peak / INITIAL_DIV / FINAL_DIV` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    one_cycle_lr_with(step, total_steps, peak, WARMUP_FRACTION)
}

pub fn one_cycle_lr_with(step: usize, total_steps: usize, peak: f64, warmup: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside a {total_steps}-step schedule")));
    }
    let initial = peak / INITIAL_DIV;
    let last = total_steps - 1;
    let top = ((warmup * total_steps as f64).round() as usize).saturating_sub(1).min(last);
    Ok(if step <= top {
        if top == 0 {
            peak
        } else {
            cos_anneal(initial, peak, step as f64 / top as f64)
        }
    } else {
        cos_anneal(peak, initial / FINAL_DIV, (step - top) as f64 / (last - top) as f64)
    })
}

/// Adam without weight decay. Moments live in host memory next to the
/// variables they update.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>) -> Self {
        let m = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        let v = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        Self { vars, m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var) else { continue };
            let g: Vec<f32> = g.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let mut p: Vec<f32> = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
            var.set(&Tensor::from_vec(p, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// One prepared view: normalized input plus every paradigm's target.
struct Prepared {
    input: Vec<f32>,
    target: TrajectoryTarget,
    crop: CropRegion,
    view_mask: Option<PathMask>,
}

fn prepare(item: &LabeledImage, seed: u64, aug: &AugmentationConfig, paradigm: Paradigm) -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = build_sample(&item.image, &item.annotation, &mut rng, aug)?;
    let view_mask = match paradigm {
        Paradigm::Segmentation => Some(annotation_mask_in_view(&item.annotation, &s.crop, aug.work_size, s.flipped)?),
        _ => None,
    };
    Ok(Prepared { input: image_to_chw(&s.image), target: s.target, crop: s.crop, view_mask })
}

enum Targets {
    Regression(RegressionTargets),
    Classification(Tensor),
    Segmentation(Tensor),
}

fn batch_tensors(items: &[Prepared], head: &HeadSpec, size: usize, w_max: f64, device: &Device) -> Result<(Tensor, Targets)> {
    let n = items.len();
    let input: Vec<f32> = items.iter().flat_map(|p| p.input.iter().copied()).collect();
    let input = Tensor::from_vec(input, (n, 3, size, size), device)?;
    let targets = match head {
        HeadSpec::Regression(_) => {
            let refs: Vec<&TrajectoryTarget> = items.iter().map(|p| &p.target).collect();
            Targets::Regression(RegressionTargets::new(&refs, w_max, device, DType::F32)?)
        }
        HeadSpec::Classification(c) => {
            let idx: Vec<u32> = items.iter().flat_map(|p| class_targets(&p.target, c.columns)).map(|v| v as u32).collect();
            Targets::Classification(Tensor::from_vec(idx, (n, c.rails, c.anchors), device)?)
        }
        HeadSpec::Segmentation(_) => {
            let m: Vec<f32> = items
                .iter()
                .flat_map(|p| p.view_mask.as_ref().map(|m| m.as_slice().to_vec()).unwrap_or_default())
                .map(|b| b as u8 as f32)
                .collect();
            Targets::Segmentation(Tensor::from_vec(m, (n, 1, size, size), device)?)
        }
    };
    Ok((input, targets))
}

/// Mean loss of a batch and the raw model output.
fn batch_loss(model: &Model, input: &Tensor, targets: &Targets, loss: &LossConfig, train: bool) -> Result<(Tensor, Tensor)> {
    let raw = model.forward(input, train)?;
    let value = match targets {
        Targets::Regression(t) => composite_loss_batch(&crate::model::regression_output(&raw)?, t, loss)?,
        Targets::Classification(t) => cross_entropy_batch(&raw, t)?,
        Targets::Segmentation(t) => dice_loss_batch(&sigmoid(&raw)?, t)?,
    };
    Ok((value, raw))
}

/// Validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub loss: f64,
    pub iou: f64,
    /// `(image id, IoU)` in input order.
    pub per_image: Vec<(String, f64)>,
}

impl ValidationReport {
    pub fn median_iou(&self) -> f64 {
        let v: Vec<f64> = self.per_image.iter().map(|p| p.1).collect();
        crate::loss::percentile(&v, 50.0).unwrap_or(f64::NAN)
    }
}

const EVAL_BATCH: usize = 16;

/// Evaluates `model` on crops drawn as in training with jitter and flips
/// off; each image's crop is seeded from `seed` and its id. IoU compares
/// masks in original-image pixels within the crop.
pub fn validate(model: &Model, data: &[LabeledImage], aug: &AugmentationConfig, loss: &LossConfig, seed: u64) -> Result<ValidationReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let aug = aug.evaluation();
    let head = &model.spec().head;
    let size = model.spec().input_size;
    let mut total_loss = 0.0;
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let items =
            chunk.iter().map(|it| prepare(it, image_seed(seed, &it.annotation.image_id), &aug, head.paradigm())).collect::<Result<Vec<_>>>()?;
        let (input, targets) = batch_tensors(&items, head, size, loss.w_max, model.device())?;
        let (value, raw) = no_grad(|| batch_loss(model, &input, &targets, loss, false))?;
        total_loss += value.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        let raw = raw.to_dtype(DType::F64)?;
        for (i, (it, p)) in chunk.iter().zip(&items).enumerate() {
            let row: Vec<f64> = raw.get(i)?.flatten_all()?.to_vec1()?;
            let (w, h) = it.annotation.dims();
            let pred = decode_output(head, &row, &p.crop, (w, h), size)?;
            let mut mask = pred.to_mask(w as usize, h as usize);
            mask.restrict_to(&p.crop);
            per_image.push((it.annotation.image_id.clone(), iou(&mask, &annotation_mask(&it.annotation, &p.crop))?));
        }
    }
    let iou = per_image.iter().map(|p| p.1).sum::<f64>() / per_image.len() as f64;
    Ok(ValidationReport { loss: total_loss / data.len() as f64, iou, per_image })
}

/// Evaluation-crop targets of `data`, used to calibrate `W_max`.
pub fn evaluation_targets(data: &[LabeledImage], aug: &AugmentationConfig, seed: u64) -> Result<Vec<TrajectoryTarget>> {
    let aug = aug.evaluation();
    data.iter().map(|it| Ok(prepare(it, image_seed(seed, &it.annotation.image_id), &aug, Paradigm::Regression)?.target)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    /// Rate of the epoch's last step.
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub config_fingerprint: String,
    pub configured_epochs: usize,
    pub steps_per_epoch: usize,
    pub w_max: f64,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl RunHistory {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

/// Number of final epochs searched for the checkpoint.
pub fn selection_window(epochs: usize) -> usize {
    (epochs as f64 * 0.1).ceil() as usize
}

/// 1-based epoch of the lowest validation loss among the last
/// `ceil(0.1 · epochs)` epochs; the earliest wins ties.
pub fn select_checkpoint(val_losses: &[f64], configured_epochs: usize) -> Result<usize> {
    if configured_epochs == 0 || val_losses.len() != configured_epochs {
        return Err(Error::InvalidArgument(format!("history has {} of {configured_epochs} epochs", val_losses.len())));
    }
    let start = configured_epochs - selection_window(configured_epochs);
    let mut best = start;
    for i in start..configured_epochs {
        if val_losses[i] < val_losses[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Trained model (weights of the selected epoch) and its history.
pub struct TrainOutcome {
    pub model: Model,
    pub history: RunHistory,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const HISTORY_FILE: &str = "history.json";

fn snapshot(model: &Model) -> Result<HashMap<String, Tensor>> {
    model.params().iter().map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?))).collect()
}

/// Trains per `config`. With `out_dir`, the selected checkpoint and the
/// history are written there.
pub fn train(config: &TrainConfig, train_set: &[LabeledImage], val_set: &[LabeledImage], device: &Device, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(format!("need non-empty splits, got {} train / {} val images", train_set.len(), val_set.len())));
    }
    let started = Instant::now();
    let spec = config.model_spec();
    let head = spec.head.clone();
    let size = spec.input_size;
    let model = build_model(&spec.backbone, &head, config.pretrained.as_deref(), size, config.seed, device)?;
    let mut loss_cfg = config.loss.clone();
    if loss_cfg.compute_w_max {
        loss_cfg.w_max = compute_wmax(&evaluation_targets(train_set, &config.augmentation, config.seed)?)?;
        log::info!("w_max from {} training targets: {:.3}", train_set.len(), loss_cfg.w_max);
    }
    let epochs = config.epochs();
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = epochs * steps_per_epoch;
    let first_candidate = epochs - selection_window(epochs) + 1;
    let mut history = RunHistory {
        config_fingerprint: config.fingerprint(),
        configured_epochs: epochs,
        steps_per_epoch,
        w_max: loss_cfg.w_max,
        ..RunHistory::default()
    };
    let mut adam = Adam::new(model.params().trainable());
    let mut best: Option<(f64, HashMap<String, Tensor>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=epochs {
        let t0 = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64, u64::MAX])));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let items = chunk
                .iter()
                .map(|&i| prepare(&train_set[i], derive_seed(config.seed, &[epoch as u64, i as u64]), &config.augmentation, config.paradigm))
                .collect::<Result<Vec<_>>>()?;
            let (input, targets) = batch_tensors(&items, &head, size, loss_cfg.w_max, device)?;
            let (value, _) = batch_loss(&model, &input, &targets, &loss_cfg, true)?;
            let v = value.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b, loss: v });
            }
            lr = one_cycle_lr_with(step, total, config.peak_lr, config.warmup_fraction)?;
            adam.step(&value.backward()?, lr)?;
            loss_sum += v * chunk.len() as f64;
            step += 1;
        }
        let report = validate(&model, val_set, &config.augmentation, &loss_cfg, config.seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: report.loss,
            val_iou: report.iou,
            learning_rate: lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{epochs}: train {:.5} val {:.5} iou {:.4} lr {:.2e} ({:.1}s)",
            record.train_loss,
            record.val_loss,
            record.val_iou,
            lr,
            record.seconds
        );
        if epoch >= first_candidate && best.as_ref().is_none_or(|(l, _)| record.val_loss < *l) {
            best = Some((record.val_loss, snapshot(&model)?));
        }
        history.epochs.push(record);
    }
    let selected = select_checkpoint(&history.val_losses(), epochs)?;
    if let Some((_, weights)) = best {
        model.load_tensors(&weights, "")?;
    }
    history.selected_epoch = Some(selected);
    history.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("selected_epoch".to_owned(), selected.to_string());
        extra.insert("w_max".to_owned(), loss_cfg.w_max.to_string());
        extra.insert("train_config".to_owned(), serde_json::to_string(config)?);
        model.save(&ckpt, &history.config_fingerprint, &extra)?;
        history.checkpoint = Some(ckpt);
        history.save(dir.join(HISTORY_FILE))?;
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_cycle_shape() {
        let total = 1000;
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, 1e-4).unwrap()).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1e-4);
        assert_eq!(lrs.iter().filter(|&&l| l == max).count(), 1);
        assert!(lrs[total - 1] < 1e-7);
        assert!(lrs[0] < 1e-6);
        let top = lrs.iter().position(|&l| l == max).unwrap();
        assert_eq!(top, 299);
        assert!(lrs[..=top].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[top..].windows(2).all(|w| w[1] < w[0]));
        assert!(one_cycle_lr(total, total, 1e-4).is_err());
    }

    proptest! {
        #[test]
        fn one_cycle_is_unimodal(total in 3usize..3000, peak in 1e-6f64..1.0) {
            let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, peak).unwrap()).collect();
            let top = lrs.iter().enumerate().fold(0, |b, (i, &l)| if l > lrs[b] { i } else { b });
            prop_assert_eq!(lrs[top], peak);
            prop_assert!(lrs[..=top].windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(lrs[top..].windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(lrs[0] < peak / 100.0 || top == 0);
            prop_assert!(lrs[total - 1] < peak / 100.0);
        }

        #[test]
        fn selection_stays_in_the_last_decile(losses in proptest::collection::vec(0.0f64..10.0, 1..500)) {
            let n = losses.len();
            let e = select_checkpoint(&losses, n).unwrap();
            prop_assert!(e > n - selection_window(n) && e <= n);
            let window = &losses[n - selection_window(n)..];
            let min = window.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(losses[e - 1], min);
        }
    }

    #[test]
    fn checkpoint_selection_examples() {
        let mut losses: Vec<f64> = (0..400).map(|e| 1.0 + 0.001 * (e % 7) as f64).collect();
        losses[99] = 0.1;
        losses[379] = 0.5;
        assert_eq!(select_checkpoint(&losses, 400).unwrap(), 380);
        let decreasing: Vec<f64> = (0..50).map(|e| 1.0 / (e + 1) as f64).collect();
        assert_eq!(select_checkpoint(&decreasing, 50).unwrap(), 50);
        let ten = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 5.0];
        assert_eq!(select_checkpoint(&ten, 10).unwrap(), 10);
        assert!(select_checkpoint(&ten[..9], 10).is_err());
    }

    #[test]
    fn adam_matches_reference_update() {
        let dev = Device::Cpu;
        let var = Var::new(&[1.0f32, -2.0], &dev).unwrap();
        let mut adam = Adam::new(vec![var.clone()]);
        let mut reference = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            // loss = sum(x^2) → grad 2x.
            let grads = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&grads, 0.1).unwrap();
            for i in 0..2 {
                let g = 2.0 * reference[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got: Vec<f32> = var.as_tensor().to_vec1().unwrap();
        for i in 0..2 {
            assert!((got[i] as f64 - reference[i]).abs() < 1e-5, "{got:?} vs {reference:?}");
        }
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let cfg = TrainConfig { epochs: Some(0), batch_size: 0, peak_lr: -1.0, ..TrainConfig::default() };
        let Err(Error::InvalidConfig(v)) = cfg.validate() else { panic!("expected invalid config") };
        assert_eq!(v.len(), 3, "{v:?}");
        assert_eq!(TrainConfig { paradigm: Paradigm::Classification, ..TrainConfig::default() }.epochs(), 200);
        assert_eq!(TrainConfig { paradigm: Paradigm::Segmentation, ..TrainConfig::default() }.epochs(), 300);
        assert_eq!(TrainConfig::default().epochs(), 400);
    }

    #[test]
    fn seeds_are_order_independent() {
        assert_eq!(image_seed(3, "a"), image_seed(3, "a"));
        assert_ne!(image_seed(3, "a"), image_seed(3, "b"));
        assert_ne!(image_seed(3, "a"), image_seed(4, "a"));
    }
}

