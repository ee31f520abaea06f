//! Crop-based augmentation and regression targets.
//!
//! A training view is produced by cropping around the ego-path, resizing to
//! the working resolution, jittering colors and optionally mirroring. The
//! rails are then resampled at `H` row anchors spread bottom-up over the
//! crop: anchor `i` (0-based) sits at normalized height `i / H`.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{EgoPathAnnotation, DEFAULT_ANCHORS};
use crate::geometry::{rasterize_path, rasterize_rails, CropRegion, CropTransform, PathMask, Point, Polyline};
use crate::loss::anchor_mask;
use crate::{Error, Result};

/// Per-channel normalization applied to network inputs.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Left, top and right margins as fractions of the ROI size.
    pub margins: [f64; 3],
    /// Standard deviations of the left, top and right border shifts, as fractions of the ROI size.
    pub shift_std: [f64; 3],
    /// Shifts are clipped at this many standard deviations.
    pub shift_clip: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub flip_probability: f64,
    /// Side of the square working resolution.
    pub work_size: u32,
    pub anchors: usize,
    /// Longest downward extension of a rail, as a fraction of crop height.
    pub max_extrapolation: f64,
    pub max_retries: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            margins: [0.1, 0.1, 0.1],
            shift_std: [0.1, 0.15, 0.1],
            shift_clip: 2.0,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            hue: 0.02,
            flip_probability: 0.5,
            work_size: 512,
            anchors: DEFAULT_ANCHORS,
            max_extrapolation: 0.1,
            max_retries: 10,
        }
    }
}

impl AugmentationConfig {
    /// No randomness at all: fixed crop, no jitter, no flip.
    pub fn deterministic() -> Self {
        Self { shift_std: [0.0; 3], ..Self::default() }.evaluation()
    }

    /// Same crop distribution with photometric jitter and flips disabled.
    pub fn evaluation(&self) -> Self {
        Self { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0, flip_probability: 0.0, ..self.clone() }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.shift_std.iter().any(|s| !(*s >= 0.0)) {
            v.push("augmentation.shift_std must be non-negative".into());
        }
        if self.margins.iter().any(|m| !(*m >= 0.0)) {
            v.push("augmentation.margins must be non-negative".into());
        }
        if !(self.shift_clip > 0.0) {
            v.push("augmentation.shift_clip must be positive".into());
        }
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&r) {
                v.push(format!("augmentation.{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            v.push("augmentation.hue must lie in [0, 0.5]".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            v.push("augmentation.flip_probability must lie in [0, 1]".into());
        }
        if self.work_size == 0 {
            v.push("augmentation.work_size must be positive".into());
        }
        if self.anchors < 2 {
            v.push("augmentation.anchors must be at least 2".into());
        }
        if !(self.max_extrapolation >= 0.0) {
            v.push("augmentation.max_extrapolation must be non-negative".into());
        }
        if self.max_retries == 0 {
            v.push("augmentation.max_retries must be positive".into());
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

/// Normalized bottom-up height of each of `anchors` anchors.
pub fn anchor_heights(anchors: usize) -> Vec<f64> {
    (0..anchors).map(|i| i as f64 / anchors as f64).collect()
}

/// Pixel rows of the anchors in an image `height` pixels tall.
pub fn anchor_rows(anchors: usize, height: u32) -> Vec<f64> {
    anchor_heights(anchors).into_iter().map(|t| (1.0 - t) * height as f64 - 0.5).collect()
}

/// Regression ground truth for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTarget {
    /// Normalized left-rail x per anchor, bottom-up.
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub y_lim: f64,
    pub mask: Vec<bool>,
}

impl TrajectoryTarget {
    /// Resamples a rail pair (original pixels) at the anchors of `crop`.
    pub fn from_rails(left: &Polyline, right: &Polyline, crop: &CropRegion, anchors: usize, max_extrapolation: f64) -> Result<Self> {
        crop.validate()?;
        let (w, h) = (crop.width(), crop.height());
        let edge = crop.bottom - 0.5;
        let y_top = left.top().y.max(right.top().y);
        let y_lim = ((edge - y_top) / h).clamp(0.0, 1.0);
        let mask = anchor_mask(y_lim, anchors);
        let cap = max_extrapolation * h;
        let x_at = |rail: &Polyline, y: f64| -> Result<f64> {
            if let Some(x) = rail.x_at(y) {
                return Ok(x);
            }
            let (a, b) = (rail.points()[0], rail.points()[1]);
            if y > a.y && y - a.y <= cap + 1e-9 {
                return Ok(a.x + (y - a.y) * (a.x - b.x) / (a.y - b.y));
            }
            Err(Error::InvalidAnnotation {
                id: String::new(),
                reason: format!("rail undefined at row {y:.1} (ends at {:.1}, extension cap {cap:.1} px)", a.y),
            })
        };
        let mut lx = Vec::with_capacity(anchors);
        let mut rx = Vec::with_capacity(anchors);
        let valid = mask.iter().filter(|&&m| m).count();
        if valid < 2 {
            return Err(Error::InvalidAnnotation { id: String::new(), reason: format!("{valid} valid anchor(s) in crop") });
        }
        for (t, &m) in anchor_heights(anchors).iter().zip(&mask) {
            if !m {
                let (l, r) = (*lx.last().unwrap(), *rx.last().unwrap());
                lx.push(l);
                rx.push(r);
                continue;
            }
            let y = edge - t * h;
            let l = (x_at(left, y)? - (crop.left - 0.5)) / w;
            let r = (x_at(right, y)? - (crop.left - 0.5)) / w;
            lx.push(l.min(r));
            rx.push(l.max(r));
        }
        Ok(Self { left: lx, right: rx, y_lim, mask })
    }

    pub fn anchors(&self) -> usize {
        self.left.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Layout shared with the regression head: left x-values, right x-values, y-limit.
    pub fn to_vector(&self) -> Vec<f64> {
        self.left.iter().chain(&self.right).copied().chain([self.y_lim]).collect()
    }

    /// The target of the horizontally mirrored view.
    pub fn mirrored(&self) -> Self {
        Self {
            left: self.right.iter().map(|x| 1.0 - x).collect(),
            right: self.left.iter().map(|x| 1.0 - x).collect(),
            y_lim: self.y_lim,
            mask: self.mask.clone(),
        }
    }

    /// Path mask over a `width × height` view of the crop.
    pub fn rasterize(&self, width: u32, height: u32) -> PathMask {
        let rows = anchor_rows(self.anchors(), height);
        let px = |xs: &[f64]| xs.iter().map(|u| u * width as f64 - 0.5).collect::<Vec<_>>();
        rasterize_path(&px(&self.left), &px(&self.right), &rows, self.valid_count(), width as usize, height as usize)
    }
}

fn clipped_normal(rng: &mut impl Rng, std: f64, clip: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z.clamp(-clip, clip) * std
}

/// Draws a training crop around the ego-path: the rail bounding box is
/// widened to center the rail base, padded by margins, and its left, top and
/// right borders are shifted at random. The bottom border stays at the rail
/// base, which always remains strictly inside.
pub fn compute_crop(annotation: &EgoPathAnnotation, rng: &mut impl Rng, config: &AugmentationConfig) -> CropRegion {
    let (img_w, img_h) = annotation.dims();
    let pts = || annotation.left_rail.points().iter().chain(annotation.right_rail.points());
    let min_x = pts().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = pts().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = pts().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let (lb, rb) = (annotation.left_rail.bottom(), annotation.right_rail.bottom());
    let mid = 0.5 * (lb.x + rb.x);
    let half = (mid - min_x).max(max_x - mid).max(0.5);
    let (roi_w, roi_h) = (2.0 * half, (max_y - min_y).max(1.0));

    let [ml, mt, mr] = config.margins;
    let [sl, st, sr] = config.shift_std;
    let clip = config.shift_clip;
    let mut l = mid - half - ml * roi_w + clipped_normal(rng, sl * roi_w, clip);
    let mut t = min_y - mt * roi_h + clipped_normal(rng, st * roi_h, clip);
    let mut r = mid + half + mr * roi_w + clipped_normal(rng, sr * roi_w, clip);

    // Keep both rail bases strictly inside the continuous extent.
    const EPS: f64 = 0.25;
    l = l.min(lb.x.min(rb.x) - EPS);
    r = r.max(lb.x.max(rb.x) + EPS);
    t = t.min(lb.y.min(rb.y) - EPS);

    let crop = CropRegion {
        left: (l + 0.5).floor().max(0.0),
        top: (t + 0.5).floor().max(0.0),
        right: (r + 0.5).ceil().min(img_w as f64),
        bottom: (max_y.floor() + 1.0).min(img_h as f64),
    };
    if crop.validate().is_err() || !crop.contains(lb) || !crop.contains(rb) {
        return CropRegion::full(img_w, img_h);
    }
    crop
}

/// Multiplicative color factors and hue rotation for one jitter draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn sample(rng: &mut impl Rng, config: &AugmentationConfig) -> Self {
        let mut factor = |range: f64| 1.0 + range * rng.random_range(-1.0..=1.0);
        let brightness = factor(config.brightness).max(0.0);
        let contrast = factor(config.contrast).max(0.0);
        let saturation = factor(config.saturation).max(0.0);
        let hue = config.hue * rng.random_range(-1.0..=1.0);
        Self { brightness, contrast, saturation, hue }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rotate_hue(p: [f64; 3], shift: f64) -> [f64; 3] {
    let [r, g, b] = p.map(|c| c / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return p;
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let (s, v) = (delta / max, max);
    let h = (h + shift).rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let (p0, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match sector as i32 {
        0 => [v, t, p0],
        1 => [q, v, p0],
        2 => [p0, v, t],
        3 => [p0, q, v],
        4 => [t, p0, v],
        _ => [v, p0, q],
    };
    rgb.map(|c| c * 255.0)
}

/// Brightness, contrast, saturation then hue, clamping after each step.
pub fn apply_jitter(image: &RgbImage, f: &JitterFactors) -> RgbImage {
    if *f == JitterFactors::IDENTITY {
        return image.clone();
    }
    let clamp = |p: [f64; 3]| p.map(|c| c.clamp(0.0, 255.0));
    let mut px: Vec<[f64; 3]> = image.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    if f.brightness != 1.0 {
        px.iter_mut().for_each(|p| *p = clamp(p.map(|c| c * f.brightness)));
    }
    if f.contrast != 1.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len().max(1) as f64;
        px.iter_mut().for_each(|p| *p = clamp(p.map(|c| f.contrast * c + (1.0 - f.contrast) * mean)));
    }
    if f.saturation != 1.0 {
        px.iter_mut().for_each(|p| {
            let g = luma(*p);
            *p = clamp(p.map(|c| f.saturation * c + (1.0 - f.saturation) * g));
        });
    }
    if f.hue != 0.0 {
        px.iter_mut().for_each(|p| *p = clamp(rotate_hue(*p, f.hue)));
    }
    let mut out = RgbImage::new(image.width(), image.height());
    for (dst, p) in out.pixels_mut().zip(px) {
        dst.0 = p.map(|c| c.round() as u8);
    }
    out
}

pub fn photometric_jitter(image: &RgbImage, rng: &mut impl Rng, config: &AugmentationConfig) -> RgbImage {
    apply_jitter(image, &JitterFactors::sample(rng, config))
}

/// Mirrors image and annotation with probability `p`.
pub fn horizontal_flip(image: &RgbImage, annotation: &EgoPathAnnotation, rng: &mut impl Rng, p: f64) -> (RgbImage, EgoPathAnnotation) {
    if rng.random_bool(p.clamp(0.0, 1.0)) {
        (imageops::flip_horizontal(image), annotation.mirrored())
    } else {
        (image.clone(), annotation.clone())
    }
}

/// One augmented view at working resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub target: TrajectoryTarget,
    pub crop: CropRegion,
    pub flipped: bool,
}

/// Crops and resizes `image` to a `size × size` view.
pub fn crop_and_resize(image: &RgbImage, crop: &CropRegion, size: u32) -> RgbImage {
    let (x, y, w, h) = crop.pixel_rect(image.width(), image.height());
    let view = imageops::crop_imm(image, x, y, w.max(1), h.max(1));
    if w == size && h == size {
        return view.to_image();
    }
    imageops::resize(&*view, size, size, FilterType::Triangle)
}

/// Draws a crop, resamples the rails, then resizes, jitters and maybe flips.
/// Crops leaving fewer than two valid anchors are redrawn up to
/// `config.max_retries` times.
pub fn build_sample(image: &RgbImage, annotation: &EgoPathAnnotation, rng: &mut impl Rng, config: &AugmentationConfig) -> Result<Sample> {
    if image.dimensions() != annotation.dims() {
        let (iw, ih) = image.dimensions();
        return Err(Error::DimensionMismatch {
            expected: (annotation.image_width as usize, annotation.image_height as usize),
            got: (iw as usize, ih as usize),
        });
    }
    let mut drawn = None;
    for _ in 0..config.max_retries {
        let crop = compute_crop(annotation, rng, config);
        let target = TrajectoryTarget::from_rails(&annotation.left_rail, &annotation.right_rail, &crop, config.anchors, config.max_extrapolation);
        match target {
            Ok(t) => {
                drawn = Some((crop, t));
                break;
            }
            Err(e) => log::debug!("{}: crop {crop:?} rejected: {e}", annotation.image_id),
        }
    }
    let Some((crop, target)) = drawn else {
        return Err(Error::SampleExhausted { id: annotation.image_id.clone(), attempts: config.max_retries });
    };
    let view = crop_and_resize(image, &crop, config.work_size);
    let view = photometric_jitter(&view, rng, config);
    let flipped = rng.random_bool(config.flip_probability.clamp(0.0, 1.0));
    let (view, target) = if flipped { (imageops::flip_horizontal(&view), target.mirrored()) } else { (view, target) };
    Ok(Sample { image: view, target, crop, flipped })
}

/// Mask of the annotated path in original-image pixels, limited to `crop`.
pub fn annotation_mask(annotation: &EgoPathAnnotation, crop: &CropRegion) -> PathMask {
    let (w, h) = annotation.dims();
    let mut mask = rasterize_rails(&annotation.left_rail, &annotation.right_rail, w as usize, h as usize);
    mask.restrict_to(crop);
    mask
}

/// Mask of the annotated path in the working view of `crop`.
pub fn annotation_mask_in_view(annotation: &EgoPathAnnotation, crop: &CropRegion, size: u32, flipped: bool) -> Result<PathMask> {
    let t = CropTransform::new(*crop, size, size)?;
    let map = |p: Point| {
        let q = t.to_working(p);
        if flipped {
            Point::new(size as f64 - 1.0 - q.x, q.y)
        } else {
            q
        }
    };
    let (mut l, mut r) = (annotation.left_rail.map(map)?, annotation.right_rail.map(map)?);
    if flipped {
        std::mem::swap(&mut l, &mut r);
    }
    Ok(rasterize_rails(&l, &r, size as usize, size as usize))
}

/// Normalized planar CHW data for a network input.
pub fn image_to_chw(image: &RgbImage) -> Vec<f32> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (p[c] as f32 / 255.0 - INPUT_MEAN[c]) / INPUT_STD[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::synth::{generate_synthetic_scene, SynthConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight_annotation() -> EgoPathAnnotation {
        // Rails converging symmetrically about x = 99.5 in a 200×100 image.
        let left = Polyline::new([Point::new(79.5, 90.0), Point::new(94.5, 30.0)]).unwrap();
        let right = Polyline::new([Point::new(119.5, 90.0), Point::new(104.5, 30.0)]).unwrap();
        EgoPathAnnotation::new("s", left, right, (200, 100)).unwrap()
    }

    fn scene(seed: u64) -> crate::synth::SyntheticScene {
        generate_synthetic_scene(&mut ChaCha8Rng::seed_from_u64(seed), &SynthConfig::default(), "t").unwrap()
    }

    #[test]
    fn deterministic_crop_is_centered_bounding_box() {
        let cfg = AugmentationConfig { margins: [0.0; 3], ..AugmentationConfig::deterministic() };
        let crop = compute_crop(&straight_annotation(), &mut ChaCha8Rng::seed_from_u64(0), &cfg);
        // Box spans x in [79.5, 119.5] and y in [30, 90]; pixel edges round outward.
        assert_eq!(crop, CropRegion { left: 79.0, top: 30.0, right: 121.0, bottom: 91.0 });
    }

    #[test]
    fn crop_is_reproducible_and_keeps_base_inside() {
        let ann = scene(4).annotation;
        let cfg = AugmentationConfig { shift_std: [0.5, 0.5, 0.5], ..AugmentationConfig::default() };
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let c = compute_crop(&ann, &mut a, &cfg);
            assert_eq!(c, compute_crop(&ann, &mut b, &cfg));
            assert!(c.contains(ann.left_rail.bottom()) && c.contains(ann.right_rail.bottom()));
            assert!(c.left >= 0.0 && c.top >= 0.0 && c.right <= ann.image_width as f64 && c.bottom <= ann.image_height as f64);
        }
    }

    #[test]
    fn full_image_annotation_falls_back_to_full_crop() {
        let left = Polyline::new([Point::new(-3.0, 99.0), Point::new(-2.0, 0.0)]).unwrap();
        let right = Polyline::new([Point::new(203.0, 99.0), Point::new(202.0, 0.0)]).unwrap();
        let ann = EgoPathAnnotation::new("f", left, right, (200, 100)).unwrap();
        let crop = compute_crop(&ann, &mut ChaCha8Rng::seed_from_u64(0), &AugmentationConfig::default());
        assert_eq!(crop, CropRegion::full(200, 100));
    }

    #[test]
    fn zero_jitter_is_identity_and_brightness_brightens() {
        let img = scene(2).image;
        let cfg = AugmentationConfig { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0, ..Default::default() };
        assert_eq!(photometric_jitter(&img, &mut ChaCha8Rng::seed_from_u64(3), &cfg), img);

        let gray = RgbImage::from_pixel(4, 3, image::Rgb([100, 100, 100]));
        let bright = apply_jitter(&gray, &JitterFactors { brightness: 2.0, ..JitterFactors::IDENTITY });
        assert_eq!(bright.dimensions(), (4, 3));
        assert!(bright.pixels().all(|p| p.0 == [200, 200, 200]));
        let saturated = apply_jitter(&RgbImage::from_pixel(1, 1, image::Rgb([200, 200, 200])), &JitterFactors { brightness: 2.0, ..JitterFactors::IDENTITY });
        assert_eq!(saturated.get_pixel(0, 0).0, [255, 255, 255]);
    }

    #[test]
    fn jitter_is_reproducible() {
        let img = scene(2).image;
        let cfg = AugmentationConfig::default();
        let a = photometric_jitter(&img, &mut ChaCha8Rng::seed_from_u64(8), &cfg);
        let b = photometric_jitter(&img, &mut ChaCha8Rng::seed_from_u64(8), &cfg);
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn hue_rotation_by_full_turn_is_identity() {
        for p in [[200.0, 30.0, 90.0], [10.0, 250.0, 120.0], [5.0, 5.0, 5.0]] {
            let q = rotate_hue(p, 1.0);
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-9);
            }
        }
        // A third of a turn maps red to green.
        let g = rotate_hue([255.0, 0.0, 0.0], 1.0 / 3.0);
        assert!(g[0].abs() < 1e-9 && (g[1] - 255.0).abs() < 1e-9 && g[2].abs() < 1e-9);
    }

    #[test]
    fn flip_behaviour() {
        let s = scene(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, ann) = horizontal_flip(&s.image, &s.annotation, &mut rng, 0.0);
        assert_eq!((img, ann), (s.image.clone(), s.annotation.clone()));
        let (img1, ann1) = horizontal_flip(&s.image, &s.annotation, &mut rng, 1.0);
        ann1.validate().unwrap();
        let (img2, ann2) = horizontal_flip(&img1, &ann1, &mut rng, 1.0);
        assert_eq!(img2, s.image);
        for (a, b) in ann2.left_rail.points().iter().zip(s.annotation.left_rail.points()) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
    }

    #[test]
    fn centered_straight_track_targets_are_symmetric() {
        let ann = straight_annotation();
        let img = RgbImage::new(200, 100);
        let cfg = AugmentationConfig { work_size: 64, anchors: 16, ..AugmentationConfig::deterministic() };
        let s = build_sample(&img, &ann, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        for i in 0..16 {
            if s.target.mask[i] {
                assert!((s.target.left[i] + s.target.right[i] - 1.0).abs() < 1e-9, "anchor {i}");
            }
        }
        assert_eq!(s.image.dimensions(), (64, 64));
    }

    #[test]
    fn early_end_limits_targets() {
        // Rails covering only the lower half of a full-height crop.
        let left = Polyline::new([Point::new(40.0, 99.0), Point::new(45.0, 49.5)]).unwrap();
        let right = Polyline::new([Point::new(60.0, 99.0), Point::new(55.0, 49.5)]).unwrap();
        let crop = CropRegion::full(100, 100);
        let t = TrajectoryTarget::from_rails(&left, &right, &crop, 64, 0.1).unwrap();
        assert!((t.y_lim - 0.5).abs() < 1e-12);
        assert_eq!(t.valid_count(), 32);
        assert!(t.mask[..32].iter().all(|&m| m) && t.mask[32..].iter().all(|&m| !m));
        // Placeholders repeat the last valid value.
        assert!(t.left[32..].iter().all(|&x| x == t.left[31]));
        // The bottom anchor is half a pixel below the rail end, inside the extension cap.
        assert!((t.left[0] - (40.0 - 0.5 * 5.0 / 49.5 + 0.5) / 100.0).abs() < 1e-12);
    }

    #[test]
    fn rails_far_above_crop_bottom_are_rejected() {
        let left = Polyline::new([Point::new(40.0, 70.0), Point::new(45.0, 10.0)]).unwrap();
        let right = Polyline::new([Point::new(60.0, 70.0), Point::new(55.0, 10.0)]).unwrap();
        assert!(TrajectoryTarget::from_rails(&left, &right, &CropRegion::full(100, 100), 64, 0.1).is_err());
        assert!(TrajectoryTarget::from_rails(&left, &right, &CropRegion::full(100, 100), 64, 0.3).is_ok());
    }

    #[test]
    fn target_reconstructs_cropped_annotation() {
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let s = scene(100 + seed);
            let sample = build_sample(&s.image, &s.annotation, &mut rng, &cfg).unwrap();
            let from_target = sample.target.rasterize(cfg.work_size, cfg.work_size);
            let reference = annotation_mask_in_view(&s.annotation, &sample.crop, cfg.work_size, sample.flipped).unwrap();
            let v = iou(&from_target, &reference).unwrap();
            assert!(v >= 0.98, "scene {seed}: IoU {v}");
        }
    }

    #[test]
    fn deterministic_config_gives_identical_samples() {
        let s = scene(21);
        let cfg = AugmentationConfig { work_size: 96, ..AugmentationConfig::deterministic() };
        let a = build_sample(&s.image, &s.annotation, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let b = build_sample(&s.image, &s.annotation, &mut ChaCha8Rng::seed_from_u64(2), &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn chw_layout_and_normalization() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([255, 0, 0]) } else { image::Rgb([0, 0, 255]) });
        let d = image_to_chw(&img);
        assert_eq!(d.len(), 6);
        assert!((d[0] - (1.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((d[5] - (1.0 - 0.406) / 0.225).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn samples_satisfy_target_invariants(seed in 0u64..10_000) {
            let s = scene(seed % 64);
            let cfg = AugmentationConfig { work_size: 32, ..AugmentationConfig::default() };
            let sample = build_sample(&s.image, &s.annotation, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            let t = &sample.target;
            prop_assert!(t.y_lim > 0.0 && t.y_lim <= 1.0);
            prop_assert_eq!(&t.mask, &anchor_mask(t.y_lim, cfg.anchors));
            for i in 0..t.anchors() {
                prop_assert!(t.left[i].is_finite() && t.right[i].is_finite());
                if t.mask[i] {
                    prop_assert!(t.left[i] <= t.right[i]);
                }
            }
            prop_assert!(sample.crop.contains(s.annotation.left_rail.bottom()));
            prop_assert!(sample.crop.contains(s.annotation.right_rail.bottom()));
        }
    }
}
