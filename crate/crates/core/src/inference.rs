//! Decoding network outputs into ego-paths, adaptive cropping for video,
//! latency measurement and overlays.

use std::time::Instant;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::augmentation::{crop_and_resize, image_to_chw};
use crate::geometry::{from_normalized, rasterize_path, CropRegion, CropTransform, PathMask, Point};
use crate::loss::anchor_mask;
use crate::model::{layers::no_grad, HeadSpec, Model, Paradigm};
use crate::{Error, Result};

/// A decoded ego-path in original-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPathPrediction {
    pub paradigm: Paradigm,
    /// Left-rail points, bottom-up.
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    /// Pixel mask for segmentation outputs, which have no rail points.
    #[serde(skip)]
    pub mask: Option<PathMask>,
}

impl EgoPathPrediction {
    pub fn empty(paradigm: Paradigm) -> Self {
        Self { paradigm, left: Vec::new(), right: Vec::new(), mask: None }
    }

    pub fn is_empty(&self) -> bool {
        match &self.mask {
            Some(m) => m.is_empty(),
            None => self.left.len() < 2,
        }
    }

    /// Path area as a `width × height` mask.
    pub fn to_mask(&self, width: usize, height: usize) -> PathMask {
        if let Some(m) = &self.mask {
            return m.clone();
        }
        let lx: Vec<f64> = self.left.iter().map(|p| p.x).collect();
        let rx: Vec<f64> = self.right.iter().map(|p| p.x).collect();
        let rows: Vec<f64> = self.left.iter().map(|p| p.y).collect();
        rasterize_path(&lx, &rx, &rows, rows.len(), width, height)
    }

    /// `(min_x, min_y, max_x, max_y)` over the path, in pixels.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        if let Some(m) = &self.mask {
            return m.bounding_box().map(|(a, b, c, d)| (a as f64, b as f64, c as f64, d as f64));
        }
        if self.is_empty() {
            return None;
        }
        let init = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        Some(self.left.iter().chain(&self.right).fold(init, |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y))))
    }
}

/// Decodes a regression vector `[left x.., right x.., y_lim]` predicted on
/// `crop`. Anchors above the predicted y-limit are dropped.
pub fn decode_regression(vector: &[f64], crop: &CropRegion) -> Result<EgoPathPrediction> {
    if vector.len() < 3 || vector.len() % 2 == 0 {
        return Err(Error::InvalidArgument(format!("regression vector of length {} is not 2H+1", vector.len())));
    }
    crop.validate()?;
    let h = (vector.len() - 1) / 2;
    let y_lim = vector[2 * h];
    let mut out = EgoPathPrediction::empty(Paradigm::Regression);
    for (i, keep) in anchor_mask(y_lim, h).into_iter().enumerate() {
        if !keep {
            break;
        }
        let v = i as f64 / h as f64;
        out.left.push(from_normalized(crop, vector[i], v));
        out.right.push(from_normalized(crop, vector[h + i], v));
    }
    Ok(out)
}

/// First index of the maximum; ties go to the lower index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decodes a row-classification grid `(C, H, W+1)` given row-major. The path
/// ends at the first row, bottom-up, where a rail falls in the background
/// class; a background row sandwiched between two valid rows is bridged.
pub fn decode_classification(grid: &[f64], rails: usize, anchors: usize, columns: usize, crop: &CropRegion) -> Result<EgoPathPrediction> {
    let k = columns + 1;
    if rails != 2 || grid.len() != rails * anchors * k || anchors == 0 {
        return Err(Error::InvalidArgument(format!("grid of length {} is not 2×{anchors}×{k}", grid.len())));
    }
    crop.validate()?;
    let cls: Vec<Vec<usize>> =
        (0..rails).map(|c| (0..anchors).map(|r| argmax(&grid[(c * anchors + r) * k..(c * anchors + r + 1) * k])).collect()).collect();
    let invalid: Vec<bool> = (0..anchors).map(|r| cls[0][r] == columns || cls[1][r] == columns).collect();
    let bridged: Vec<bool> = (0..anchors)
        .map(|r| if r == 0 || r + 1 == anchors { invalid[r] } else { invalid[r] && (invalid[r - 1] || invalid[r + 1]) })
        .collect();
    let valid = bridged.iter().position(|&b| b).unwrap_or(anchors);
    let center = |col: usize| (col as f64 + 0.5) / columns as f64;
    let u = |rail: usize, r: usize| {
        let c = cls[rail][r];
        if c < columns {
            center(c)
        } else {
            0.5 * (center(cls[rail][r - 1]) + center(cls[rail][r + 1]))
        }
    };
    let mut out = EgoPathPrediction::empty(Paradigm::Classification);
    for r in 0..valid {
        let v = r as f64 / anchors as f64;
        out.left.push(from_normalized(crop, u(0, r), v));
        out.right.push(from_normalized(crop, u(1, r), v));
    }
    Ok(out)
}

/// Thresholds `size × size` mask logits at probability 0.5 and maps the
/// result back onto the `dims` image through `crop` (nearest neighbour).
pub fn decode_segmentation(logits: &[f64], size: usize, crop: &CropRegion, dims: (u32, u32)) -> Result<PathMask> {
    if logits.len() != size * size || size == 0 {
        return Err(Error::InvalidArgument(format!("{} logits do not form a {size}×{size} mask", logits.len())));
    }
    let t = CropTransform::new(*crop, size as u32, size as u32)?;
    let (x, y, w, h) = crop.pixel_rect(dims.0, dims.1);
    let mut mask = PathMask::empty(dims.0 as usize, dims.1 as usize);
    let clamp = |v: f64| (v.round().max(0.0) as usize).min(size - 1);
    for row in y..y + h {
        for col in x..x + w {
            let q = t.to_working(Point::new(col as f64, row as f64));
            if logits[clamp(q.y) * size + clamp(q.x)] > 0.0 {
                mask.set(col as usize, row as usize, true);
            }
        }
    }
    Ok(mask)
}

/// Decodes one sample of raw model output (as returned by [`Model::forward`]).
pub fn decode_output(head: &HeadSpec, raw: &[f64], crop: &CropRegion, dims: (u32, u32), input_size: usize) -> Result<EgoPathPrediction> {
    match head {
        HeadSpec::Regression(_) => {
            let mut v = raw.to_vec();
            if let Some(last) = v.last_mut() {
                *last = 1.0 / (1.0 + (-*last).exp());
            }
            decode_regression(&v, crop)
        }
        HeadSpec::Classification(c) => decode_classification(raw, c.rails, c.anchors, c.columns, crop),
        HeadSpec::Segmentation(_) => {
            let mask = decode_segmentation(raw, input_size, crop, dims)?;
            Ok(EgoPathPrediction { paradigm: Paradigm::Segmentation, left: Vec::new(), right: Vec::new(), mask: Some(mask) })
        }
    }
}

/// Network input `(1, 3, R, R)` for `crop` of `image`.
pub fn prepare_input(image: &RgbImage, crop: &CropRegion, model: &Model) -> Result<Tensor> {
    let r = model.spec().input_size;
    let view = crop_and_resize(image, crop, r as u32);
    Ok(Tensor::from_vec(image_to_chw(&view), (1, 3, r, r), model.device())?)
}

/// Runs `model` on `crop` of `image` and decodes the result.
pub fn predict(model: &Model, image: &RgbImage, crop: &CropRegion) -> Result<EgoPathPrediction> {
    let x = prepare_input(image, crop, model)?;
    let raw = model.forward(&x, false)?;
    let raw: Vec<f64> = raw.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    decode_output(&model.spec().head, &raw, crop, image.dimensions(), model.spec().input_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveCropConfig {
    /// Weight of the newest frame in the running average.
    pub ema_factor: f64,
    /// Weight of the all-time average in the blended extremes.
    pub global_blend: f64,
    /// Left, top and right margins as fractions of the blended box size.
    pub margins: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_fraction: f64,
}

impl Default for AdaptiveCropConfig {
    fn default() -> Self {
        Self { ema_factor: 0.1, global_blend: 0.2, margins: 0.15, min_fraction: 0.2 }
    }
}

impl AdaptiveCropConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.ema_factor > 0.0 && self.ema_factor <= 1.0) {
            v.push("adaptive_crop.ema_factor must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.global_blend) {
            v.push("adaptive_crop.global_blend must be in [0, 1]".into());
        }
        if !(self.margins >= 0.0) {
            v.push("adaptive_crop.margins must be non-negative".into());
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            v.push("adaptive_crop.min_fraction must be in (0, 1]".into());
        }
        v
    }
}

/// Crop tracking state for one video stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CropState {
    pub crop: CropRegion,
    /// Running average of the predicted box `(min_x, min_y, max_x, max_y)`.
    pub running: Option<[f64; 4]>,
    /// Sum of all predicted boxes and their count.
    pub global_sum: [f64; 4],
    pub global_count: usize,
    pub frame: usize,
    pub dims: (u32, u32),
    pub config: AdaptiveCropConfig,
}

impl CropState {
    /// The first frame sees the whole image.
    pub fn new(dims: (u32, u32), config: AdaptiveCropConfig) -> Self {
        Self { crop: CropRegion::full(dims.0, dims.1), running: None, global_sum: [0.0; 4], global_count: 0, frame: 0, dims, config }
    }
}

/// Fits `[lo, hi)` of at least `min` length inside `[0, limit]`.
fn fit_span(lo: f64, hi: f64, min: f64, limit: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (lo.max(0.0), hi.min(limit));
    if hi - lo < min {
        let mid = 0.5 * (lo + hi);
        lo = (mid - 0.5 * min).max(0.0);
        hi = (lo + min).min(limit);
        lo = hi - min;
    }
    (lo.round().max(0.0), hi.round().min(limit))
}

/// Refines the crop around the running average of predicted boxes, blended
/// with their all-time average so a few degenerate frames cannot collapse it.
/// The bottom border sits on the predicted rail base; the other borders get
/// margins.
pub fn adaptive_crop_update(state: &CropState, prediction: &EgoPathPrediction) -> CropState {
    let mut next = state.clone();
    next.frame += 1;
    let Some((x0, y0, x1, y1)) = prediction.bounding_box() else { return next };
    let bbox = [x0, y0, x1, y1];
    let cfg = &state.config;
    let running = match state.running {
        None => bbox,
        Some(r) => std::array::from_fn(|i| r[i] + cfg.ema_factor * (bbox[i] - r[i])),
    };
    next.running = Some(running);
    for (s, b) in next.global_sum.iter_mut().zip(bbox) {
        *s += b;
    }
    next.global_count += 1;
    let g = next.global_count as f64;
    let blended: [f64; 4] = std::array::from_fn(|i| (1.0 - cfg.global_blend) * running[i] + cfg.global_blend * next.global_sum[i] / g);
    let (w, h) = (blended[2] - blended[0], blended[3] - blended[1]);
    let (iw, ih) = (state.dims.0 as f64, state.dims.1 as f64);
    let (left, right) = fit_span(blended[0] - cfg.margins * w + 0.5, blended[2] + cfg.margins * w + 0.5, cfg.min_fraction * iw, iw);
    let (top, bottom) = fit_span(blended[1] - cfg.margins * h + 0.5, blended[3] + 0.5, cfg.min_fraction * ih, ih);
    next.crop = CropRegion { left, top, right, bottom };
    next
}

/// Forward-pass latency statistics in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Times single-image forward passes only (no pre- or post-processing),
/// discarding `warmup` leading runs.
pub fn benchmark_latency(model: &Model, iterations: usize, warmup: usize) -> Result<LatencyReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one iteration".into()));
    }
    let r = model.spec().input_size;
    let x = Tensor::zeros((1, 3, r, r), DType::F32, model.device())?;
    let mut times = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let start = Instant::now();
        let out = no_grad(|| model.forward(&x, false))?;
        model.device().synchronize()?;
        drop(out);
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let pct = |q| crate::loss::percentile(&times, q);
    Ok(LatencyReport {
        iterations,
        warmup,
        mean_ms: mean,
        std_ms: std,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        p50_ms: pct(50.0)?,
        p90_ms: pct(90.0)?,
        p99_ms: pct(99.0)?,
        max_ms: times.iter().copied().fold(0.0, f64::max),
    })
}

const FILL: [u8; 3] = [0, 220, 80];
const RAIL: [u8; 3] = [255, 40, 40];
const FILL_ALPHA: f32 = 0.4;
/// Rail stroke radius in pixels.
pub const STROKE: i64 = 1;

fn blend(p: &mut Rgb<u8>, c: [u8; 3], alpha: f32) {
    for k in 0..3 {
        p[k] = (p[k] as f32 * (1.0 - alpha) + c[k] as f32 * alpha).round() as u8;
    }
}

fn draw_segment(img: &mut RgbImage, a: Point, b: Point) {
    let steps = ((b.x - a.x).abs().max((b.y - a.y).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = ((a.x + t * (b.x - a.x)).round() as i64, (a.y + t * (b.y - a.y)).round() as i64);
        for dy in -STROKE..=STROKE {
            for dx in -STROKE..=STROKE {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, Rgb(RAIL));
                }
            }
        }
    }
}

/// Shades the predicted path and draws its rails.
pub fn render_overlay(image: &RgbImage, prediction: &EgoPathPrediction) -> RgbImage {
    let mut out = image.clone();
    if prediction.is_empty() {
        return out;
    }
    let mask = prediction.to_mask(image.width() as usize, image.height() as usize);
    for (c, r, p) in out.enumerate_pixels_mut() {
        if mask.get(c as usize, r as usize) {
            blend(p, FILL, FILL_ALPHA);
        }
    }
    for rail in [&prediction.left, &prediction.right] {
        for w in rail.windows(2) {
            draw_segment(&mut out, w[0], w[1]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::TrajectoryTarget;
    use crate::geometry::{rasterize_polygon, Polyline};

    fn crop() -> CropRegion {
        CropRegion::new(10.0, 20.0, 110.0, 120.0).unwrap()
    }

    #[test]
    fn regression_truncates_at_the_y_limit() {
        let h = 64;
        let mut v: Vec<f64> = (0..h).map(|_| 0.3).chain((0..h).map(|_| 0.7)).collect();
        v.push(1.0);
        assert_eq!(decode_regression(&v, &crop()).unwrap().left.len(), 64);
        *v.last_mut().unwrap() = 0.5;
        let p = decode_regression(&v, &crop()).unwrap();
        assert_eq!((p.left.len(), p.right.len()), (32, 32));
        *v.last_mut().unwrap() = 0.0;
        assert!(decode_regression(&v, &crop()).unwrap().is_empty());
        assert!(decode_regression(&v[1..], &crop()).is_err());
    }

    #[test]
    fn identity_crop_keeps_crop_coordinates() {
        let full = CropRegion::full(100, 100);
        let p = decode_regression(&[0.25, 0.75, 1.0], &full).unwrap();
        // u = 0.25 of a 100 px crop starting at -0.5.
        assert_eq!(p.left[0], Point::new(24.5, 99.5));
        assert_eq!(p.right[0], Point::new(74.5, 99.5));
    }

    #[test]
    fn regression_round_trip_reproduces_the_target() {
        let left = Polyline::new([Point::new(30.0, 125.0), Point::new(55.0, 40.0)]).unwrap();
        let right = Polyline::new([Point::new(90.0, 125.0), Point::new(62.0, 40.0)]).unwrap();
        let c = crop();
        let t = TrajectoryTarget::from_rails(&left, &right, &c, 64, 0.1).unwrap();
        let p = decode_regression(&t.to_vector(), &c).unwrap();
        assert_eq!(p.left.len(), t.valid_count());
        for pt in &p.left {
            assert!((left.x_at(pt.y).unwrap() - pt.x).abs() < 1e-9);
        }
        for pt in &p.right {
            assert!((right.x_at(pt.y).unwrap() - pt.x).abs() < 1e-9);
        }
    }

    fn grid_with(cols: impl Fn(usize, usize) -> usize, anchors: usize, columns: usize) -> Vec<f64> {
        let k = columns + 1;
        let mut g = vec![0.0; 2 * anchors * k];
        for c in 0..2 {
            for r in 0..anchors {
                g[(c * anchors + r) * k + cols(c, r)] = 5.0;
            }
        }
        g
    }

    #[test]
    fn classification_decoding_rules() {
        let full = CropRegion::full(128, 64);
        let bg = grid_with(|_, _| 128, 64, 128);
        assert!(decode_classification(&bg, 2, 64, 128, &full).unwrap().is_empty());
        let centered = grid_with(|_, _| 64, 64, 128);
        let p = decode_classification(&centered, 2, 64, 128, &full).unwrap();
        assert_eq!(p.left.len(), 64);
        // Bin 64 of 128 has center 64.5 / 128 of the width.
        assert!(p.left.iter().all(|q| (q.x - (-0.5 + 64.5)).abs() < 1e-12));
        // Ties go to the lower column.
        let mut tie = vec![0.0; 2 * 4 * 9];
        for cell in 0..8 {
            tie[cell * 9 + 2] = 1.0;
            tie[cell * 9 + 5] = 1.0;
        }
        let p = decode_classification(&tie, 2, 4, 8, &CropRegion::full(8, 8)).unwrap();
        assert!(p.left.iter().all(|q| (q.x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn classification_bridges_single_background_rows() {
        let full = CropRegion::full(16, 16);
        let g = grid_with(|c, r| if r == 3 && c == 0 { 8 } else if r >= 6 { 8 } else { 2 + c * 3 }, 10, 8);
        let p = decode_classification(&g, 2, 10, 8, &full).unwrap();
        assert_eq!(p.left.len(), 6);
        let g = grid_with(|_, r| if r == 3 || r == 4 { 8 } else { 3 }, 10, 8);
        assert_eq!(decode_classification(&g, 2, 10, 8, &full).unwrap().left.len(), 3);
    }

    #[test]
    fn segmentation_thresholds_and_embeds() {
        let c = CropRegion::new(20.0, 10.0, 84.0, 74.0).unwrap();
        let dims = (100, 90);
        let none = decode_segmentation(&vec![f64::NEG_INFINITY; 32 * 32], 32, &c, dims).unwrap();
        assert!(none.is_empty());
        let all = decode_segmentation(&vec![f64::INFINITY; 32 * 32], 32, &c, dims).unwrap();
        assert_eq!(all.count(), 64 * 64);
        assert_eq!(all.bounding_box(), Some((20, 10, 83, 73)));
        // A centered square covering a quarter of the view.
        let square: Vec<f64> = (0..32 * 32).map(|i| if (8..24).contains(&(i / 32)) && (8..24).contains(&(i % 32)) { 1.0 } else { -1.0 }).collect();
        let m = decode_segmentation(&square, 32, &c, dims).unwrap();
        let expected = 16.0 * 16.0 * 4.0;
        assert!((m.count() as f64 - expected).abs() <= 4.0 * 32.0 * 2.0, "{}", m.count());
    }

    fn constant_prediction(x0: f64, y0: f64, x1: f64, y1: f64) -> EgoPathPrediction {
        EgoPathPrediction {
            paradigm: Paradigm::Regression,
            left: vec![Point::new(x0, y1), Point::new(x0 + 5.0, y0)],
            right: vec![Point::new(x1, y1), Point::new(x1 - 5.0, y0)],
            mask: None,
        }
    }

    #[test]
    fn adaptive_crop_starts_full_and_converges() {
        let state = CropState::new((400, 300), AdaptiveCropConfig::default());
        assert_eq!(state.crop, CropRegion::full(400, 300));
        let pred = constant_prediction(150.0, 120.0, 250.0, 299.5);
        let mut s = state;
        let mut prev = s.crop;
        for _ in 0..50 {
            s = adaptive_crop_update(&s, &pred);
            let change = [s.crop.left - prev.left, s.crop.top - prev.top, s.crop.right - prev.right, s.crop.bottom - prev.bottom];
            prev = s.crop;
            if change.iter().all(|d| d.abs() < 1.0) {
                break;
            }
        }
        assert_eq!(s.crop, CropRegion { left: 136.0, top: 94.0, right: 266.0, bottom: 300.0 });
    }

    #[test]
    fn adaptive_crop_respects_the_floor() {
        let mut s = CropState::new((400, 300), AdaptiveCropConfig::default());
        for k in 0..100 {
            let p = constant_prediction(200.0, 150.0 + k as f64 * 0.1, 200.5, 150.5 + k as f64 * 0.1);
            s = adaptive_crop_update(&s, &p);
            assert!(s.crop.width() >= 80.0 && s.crop.height() >= 60.0);
            assert!(s.crop.intersects_image(400, 300));
        }
        let before = s.clone();
        let after = adaptive_crop_update(&before, &EgoPathPrediction::empty(Paradigm::Regression));
        assert_eq!(after.crop, before.crop);
        assert_eq!(after.frame, before.frame + 1);
    }

    #[test]
    fn overlay_is_local_and_deterministic() {
        let img = RgbImage::from_pixel(60, 40, Rgb([10, 10, 10]));
        assert_eq!(render_overlay(&img, &EgoPathPrediction::empty(Paradigm::Regression)), img);
        let p = constant_prediction(20.0, 10.0, 40.0, 35.0);
        let a = render_overlay(&img, &p);
        assert_eq!(a, render_overlay(&img, &p));
        let (x0, y0, x1, y1) = p.bounding_box().unwrap();
        let s = STROKE as f64 + 0.5;
        for (c, r, px) in a.enumerate_pixels() {
            if px != img.get_pixel(c, r) {
                let (c, r) = (c as f64, r as f64);
                assert!(c >= x0 - s && c <= x1 + s && r >= y0 - s && r <= y1 + s);
            }
        }
        assert_ne!(a, img);
    }

    #[test]
    fn prediction_mask_matches_polygon_fill() {
        let p = constant_prediction(20.0, 10.0, 40.0, 35.0);
        let poly = [p.left[0], p.left[1], p.right[1], p.right[0]];
        assert_eq!(p.to_mask(60, 40), rasterize_polygon(&poly, 60, 40));
    }
}
