//! Learning-free geometry: rail polylines, crop transforms, path masks and IoU.
//!
//! Coordinates are image pixels with the center of pixel `(col, row)` at
//! `(col, row)`, so an image of width `W` spans `[-0.5, W - 0.5]`
//! horizontally. Crop regions are integer pixel bounds with exclusive
//! `right`/`bottom` edges.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A 2-D point in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// A rail polyline, normalized to run bottom-to-top with strictly
/// decreasing `y` (image rows grow downward).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "Vec<Point>")]
pub struct Polyline {
    points: Vec<Point>,
}

impl Polyline {
    /// Validates and normalizes raw points: sorts bottom-to-top and merges
    /// points sharing a row by averaging their `x`.
    pub fn new(points: impl IntoIterator<Item = Point>) -> Result<Self> {
        let mut pts: Vec<Point> = points.into_iter().collect();
        if pts.len() < 2 {
            return Err(Error::DegeneratePolyline(format!("{} point(s), need at least 2", pts.len())));
        }
        if let Some(p) = pts.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegeneratePolyline(format!("non-finite point ({}, {})", p.x, p.y)));
        }
        pts.sort_by(|a, b| b.y.total_cmp(&a.y));
        let mut merged: Vec<Point> = Vec::with_capacity(pts.len());
        let mut run = 1usize;
        for p in pts {
            match merged.last_mut() {
                Some(last) if last.y == p.y => {
                    last.x = (last.x * run as f64 + p.x) / (run + 1) as f64;
                    run += 1;
                }
                _ => {
                    merged.push(p);
                    run = 1;
                }
            }
        }
        if merged.len() < 2 {
            return Err(Error::DegeneratePolyline(format!("all points lie on row y = {}", merged[0].y)));
        }
        Ok(Self { points: merged })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Lowest point in the image (largest `y`).
    pub fn bottom(&self) -> Point {
        self.points[0]
    }

    /// Highest point in the image (smallest `y`).
    pub fn top(&self) -> Point {
        *self.points.last().expect("polyline has at least two points")
    }

    /// Linearly interpolated `x` at row `y`, or `None` outside the y-span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        const EPS: f64 = 1e-9;
        if y > self.bottom().y + EPS || y < self.top().y - EPS {
            return None;
        }
        // Points are sorted by decreasing y.
        let idx = self.points.partition_point(|p| p.y > y);
        if idx == 0 {
            return Some(self.points[0].x);
        }
        if idx >= self.points.len() {
            return Some(self.top().x);
        }
        let (a, b) = (self.points[idx - 1], self.points[idx]);
        let t = (a.y - y) / (a.y - b.y);
        Some(a.x + t * (b.x - a.x))
    }

    /// Applies `f` to every point and re-normalizes.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)))
    }

    /// Mirror image about the vertical centerline of an image `width` pixels wide.
    pub fn mirrored(&self, width: f64) -> Self {
        Self { points: self.points.iter().map(|p| Point::new(width - 1.0 - p.x, p.y)).collect() }
    }
}

impl From<Polyline> for Vec<Point> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl<'de> Deserialize<'de> for Polyline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pts = Vec::<Point>::deserialize(d)?;
        Polyline::new(pts).map_err(serde::de::Error::custom)
    }
}

/// Interpolated `x` of `polyline` at each row; rows outside its span are `None`.
pub fn resample_at_rows(polyline: &Polyline, rows: &[f64]) -> Vec<Option<f64>> {
    rows.iter().map(|&y| polyline.x_at(y)).collect()
}

/// Axis-aligned crop rectangle in original-image pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl CropRegion {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let crop = Self { left, top, right, bottom };
        crop.validate()?;
        Ok(crop)
    }

    /// The whole `width × height` image.
    pub fn full(width: u32, height: u32) -> Self {
        Self { left: 0.0, top: 0.0, right: width as f64, bottom: height as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.left, self.top, self.right, self.bottom].iter().all(|v| v.is_finite());
        if !finite || self.left >= self.right || self.top >= self.bottom {
            return Err(Error::InvalidCrop(format!("{self:?} has zero or negative area")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn intersects_image(&self, width: u32, height: u32) -> bool {
        self.left < width as f64 && self.right > 0.0 && self.top < height as f64 && self.bottom > 0.0
    }

    /// Integer bounds clipped to the image, as `(x, y, w, h)`.
    pub fn pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let l = self.left.round().clamp(0.0, width as f64) as u32;
        let r = self.right.round().clamp(0.0, width as f64) as u32;
        let t = self.top.round().clamp(0.0, height as f64) as u32;
        let b = self.bottom.round().clamp(0.0, height as f64) as u32;
        (l, t, r.saturating_sub(l), b.saturating_sub(t))
    }

    /// Whether the point lies strictly within the crop's continuous extent.
    pub fn contains(&self, p: Point) -> bool {
        p.x > self.left - 0.5 && p.x < self.right - 0.5 && p.y > self.top - 0.5 && p.y < self.bottom - 0.5
    }
}

/// Affine map between a crop resized to a working resolution and the
/// original image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub crop: CropRegion,
    pub work_width: u32,
    pub work_height: u32,
}

impl CropTransform {
    pub fn new(crop: CropRegion, work_width: u32, work_height: u32) -> Result<Self> {
        crop.validate()?;
        if work_width == 0 || work_height == 0 {
            return Err(Error::InvalidCrop(format!("working resolution {work_width}x{work_height}")));
        }
        Ok(Self { crop, work_width, work_height })
    }

    fn scale(&self) -> (f64, f64) {
        (self.crop.width() / self.work_width as f64, self.crop.height() / self.work_height as f64)
    }

    pub fn to_original(&self, p: Point) -> Point {
        let (sx, sy) = self.scale();
        Point::new(self.crop.left - 0.5 + (p.x + 0.5) * sx, self.crop.top - 0.5 + (p.y + 0.5) * sy)
    }

    pub fn to_working(&self, p: Point) -> Point {
        let (sx, sy) = self.scale();
        Point::new((p.x - self.crop.left + 0.5) / sx - 0.5, (p.y - self.crop.top + 0.5) / sy - 0.5)
    }
}

/// Normalized crop coordinates: `u` spans the crop width left-to-right and
/// `v` its height bottom-to-top, both over `[0, 1]`.
pub fn to_normalized(crop: &CropRegion, p: Point) -> (f64, f64) {
    ((p.x - (crop.left - 0.5)) / crop.width(), ((crop.bottom - 0.5) - p.y) / crop.height())
}

pub fn from_normalized(crop: &CropRegion, u: f64, v: f64) -> Point {
    Point::new(crop.left - 0.5 + u * crop.width(), crop.bottom - 0.5 - v * crop.height())
}

/// Maps working-resolution points into original-image coordinates.
pub fn transform_path(path: &[Point], crop: &CropRegion, work_dims: (u32, u32)) -> Result<Vec<Point>> {
    let t = CropTransform::new(*crop, work_dims.0, work_dims.1)?;
    Ok(path.iter().map(|&p| t.to_original(p)).collect())
}

/// Inverse of [`transform_path`].
pub fn inverse_transform_path(path: &[Point], crop: &CropRegion, work_dims: (u32, u32)) -> Result<Vec<Point>> {
    let t = CropTransform::new(*crop, work_dims.0, work_dims.1)?;
    Ok(path.iter().map(|&p| t.to_working(p)).collect())
}

/// Binary mask over an image grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl PathMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|r| (0..width).map(move |c| (c, r))).map(|(c, r)| f(c, r)).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Clears every pixel whose center falls outside `crop`.
    pub fn restrict_to(&mut self, crop: &CropRegion) {
        for r in 0..self.height {
            for c in 0..self.width {
                let inside =
                    (c as f64) >= crop.left && (c as f64) < crop.right && (r as f64) >= crop.top && (r as f64) < crop.bottom;
                if !inside {
                    self.data[r * self.width + c] = false;
                }
            }
        }
    }

    /// Tight bounding box `(min_col, min_row, max_col, max_row)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(c, r) {
                    bb = Some(match bb {
                        None => (c, r, c, r),
                        Some((a, b, d, e)) => (a.min(c), b.min(r), d.max(c), e.max(r)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            image::Luma([if self.get(c as usize, r as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |c, r| img.get_pixel(c as u32, r as u32)[0] >= 128)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Even-odd scanline fill of a closed polygon, sampling pixel centers.
///
/// A pixel belongs to the mask when its center lies inside the polygon, with
/// half-open edge rules so shared boundaries are never double counted.
pub fn rasterize_polygon(vertices: &[Point], width: usize, height: usize) -> PathMask {
    let mut mask = PathMask::empty(width, height);
    if vertices.len() < 3 {
        return mask;
    }
    let (ymin, ymax) = vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let r0 = ymin.ceil().max(0.0) as usize;
    let r1 = (ymax.floor().min(height as f64 - 1.0)).max(-1.0);
    if r1 < 0.0 || r0 >= height {
        return mask;
    }
    let mut xs = Vec::with_capacity(8);
    for row in r0..=r1 as usize {
        let y = row as f64;
        xs.clear();
        for i in 0..vertices.len() {
            let a = vertices[i];
            let b = vertices[(i + 1) % vertices.len()];
            if (a.y <= y && y < b.y) || (b.y <= y && y < a.y) {
                xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = pair[0].ceil().max(0.0);
            let c1 = (pair[1].ceil() - 1.0).min(width as f64 - 1.0);
            if c1 < c0 {
                continue;
            }
            for c in c0 as usize..=c1 as usize {
                mask.data[row * width + c] = true;
            }
        }
    }
    mask
}

/// Closed outline of the region between two rails: left rail bottom-to-top,
/// then right rail top-to-bottom.
pub fn path_outline(left: &[Point], right: &[Point]) -> Vec<Point> {
    left.iter().copied().chain(right.iter().rev().copied()).collect()
}

/// Mask of the area between two annotated rails, taken directly from their points.
pub fn rasterize_rails(left: &Polyline, right: &Polyline, width: usize, height: usize) -> PathMask {
    rasterize_polygon(&path_outline(left.points(), right.points()), width, height)
}

/// Fills the region between per-anchor rail positions over the first
/// `valid_count` anchors. Inverted pairs are swapped row by row.
pub fn rasterize_path(
    left_xs: &[f64],
    right_xs: &[f64],
    anchor_rows: &[f64],
    valid_count: usize,
    width: usize,
    height: usize,
) -> PathMask {
    let n = valid_count.min(left_xs.len()).min(right_xs.len()).min(anchor_rows.len());
    if n < 2 {
        return PathMask::empty(width, height);
    }
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let (l, r) = if left_xs[i] <= right_xs[i] { (left_xs[i], right_xs[i]) } else { (right_xs[i], left_xs[i]) };
        left.push(Point::new(l, anchor_rows[i]));
        right.push(Point::new(r, anchor_rows[i]));
    }
    rasterize_polygon(&path_outline(&left, &right), width, height)
}

/// Intersection over union of two equally sized masks; two empty masks score 1.
pub fn iou(a: &PathMask, b: &PathMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch { expected: a.dims(), got: b.dims() });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[(f64, f64)]) -> Polyline {
        Polyline::new(points.iter().map(|&(x, y)| Point::new(x, y))).unwrap()
    }

    /// Crossing-number point-in-polygon test at a single point.
    fn point_in_polygon(poly: &[Point], x: f64, y: f64) -> bool {
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[j]);
            if (a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    #[test]
    fn resample_examples() {
        let vertical = line(&[(5.0, 0.0), (5.0, 100.0)]);
        assert_eq!(resample_at_rows(&vertical, &[100.0, 50.0, 0.0]), vec![Some(5.0); 3]);
        let diagonal = line(&[(0.0, 0.0), (100.0, 100.0)]);
        assert_eq!(resample_at_rows(&diagonal, &[50.0]), vec![Some(50.0)]);
        let short = line(&[(0.0, 0.0), (10.0, 100.0)]);
        assert_eq!(resample_at_rows(&short, &[120.0]), vec![None]);
    }

    #[test]
    fn degenerate_polylines_are_rejected() {
        assert!(Polyline::new([Point::new(1.0, 5.0), Point::new(9.0, 5.0)]).is_err());
        assert!(Polyline::new([Point::new(1.0, 5.0)]).is_err());
        assert!(Polyline::new([Point::new(1.0, 5.0), Point::new(f64::NAN, 6.0)]).is_err());
    }

    #[test]
    fn polyline_normalizes_order_and_duplicates() {
        let p = line(&[(0.0, 10.0), (2.0, 50.0), (4.0, 50.0), (1.0, 30.0)]);
        let ys: Vec<f64> = p.points().iter().map(|p| p.y).collect();
        assert_eq!(ys, vec![50.0, 30.0, 10.0]);
        assert_eq!(p.bottom().x, 3.0);
    }

    #[test]
    fn rectangle_rasterization() {
        let rows: Vec<f64> = (0..10).map(|i| 15.0 - i as f64).collect();
        let mask = rasterize_path(&[2.0; 10], &[7.0; 10], &rows, 10, 12, 20);
        // Half-open rule: rows 6..=14 and columns 2..=6.
        assert_eq!(mask.count(), 9 * 5);
        assert_eq!(mask.bounding_box(), Some((2, 6, 6, 14)));
    }

    #[test]
    fn empty_path_gives_empty_mask() {
        let mask = rasterize_path(&[], &[], &[], 0, 8, 8);
        assert!(mask.is_empty());
        let mask = rasterize_path(&[1.0], &[5.0], &[3.0], 1, 8, 8);
        assert!(mask.is_empty());
    }

    #[test]
    fn trapezoid_matches_point_in_polygon_oracle() {
        let left = [Point::new(10.0, 60.0), Point::new(28.0, 12.0)];
        let right = [Point::new(55.0, 60.0), Point::new(34.0, 12.0)];
        let poly = path_outline(&left, &right);
        let mask = rasterize_polygon(&poly, 64, 64);
        let oracle = PathMask::from_fn(64, 64, |c, r| point_in_polygon(&poly, c as f64, r as f64));
        let diff = mask.as_slice().iter().zip(oracle.as_slice()).filter(|(a, b)| a != b).count();
        // Only pixels whose centers sit exactly on an edge may disagree.
        assert!(diff <= 2 * 49, "diff {diff}");
        assert!((mask.count() as i64 - oracle.count() as i64).abs() <= 49 * 2);
    }

    #[test]
    fn iou_examples() {
        let block = PathMask::from_fn(20, 20, |c, r| (2..12).contains(&c) && (2..12).contains(&r));
        let shifted = PathMask::from_fn(20, 20, |c, r| (2..12).contains(&c) && (7..17).contains(&r));
        let far = PathMask::from_fn(20, 20, |c, r| (14..18).contains(&c) && (14..18).contains(&r));
        assert_eq!(iou(&block, &block).unwrap(), 1.0);
        assert_eq!(iou(&block, &far).unwrap(), 0.0);
        assert!((iou(&block, &shifted).unwrap() - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&PathMask::empty(3, 3), &PathMask::empty(3, 3)).unwrap(), 1.0);
        assert!(iou(&block, &PathMask::empty(3, 3)).is_err());
    }

    #[test]
    fn transform_examples() {
        let crop = CropRegion::new(100.0, 100.0, 612.0, 612.0).unwrap();
        let out = transform_path(&[Point::new(256.0, 256.0)], &crop, (512, 512)).unwrap();
        assert_eq!(out[0], Point::new(356.0, 356.0));
        let identity = CropRegion::full(640, 480);
        let pts = [Point::new(3.0, 7.5), Point::new(639.0, 0.0)];
        assert_eq!(transform_path(&pts, &identity, (640, 480)).unwrap(), pts.to_vec());
        assert!(CropRegion::new(5.0, 0.0, 5.0, 10.0).is_err());
        let zero_area = CropRegion { left: 5.0, top: 0.0, right: 5.0, bottom: 10.0 };
        assert!(transform_path(&pts, &zero_area, (10, 10)).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = PathMask::from_fn(9, 5, |c, r| (c + r) % 3 == 0);
        let path = dir.path().join("mask.png");
        mask.save_png(&path).unwrap();
        let back = PathMask::from_image(&image::open(&path).unwrap().to_luma8());
        assert_eq!(back, mask);
    }

    fn mask_strategy() -> impl Strategy<Value = PathMask> {
        proptest::collection::vec(any::<bool>(), 48).prop_map(|bits| {
            let mut m = PathMask::empty(8, 6);
            m.data = bits;
            m
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in mask_strategy(), b in mask_strategy()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn resampling_commutes_with_scaling(
            xs in proptest::collection::vec(-50.0f64..150.0, 4),
            scale in 0.25f64..4.0,
            row in 0.0f64..90.0,
        ) {
            let pts: Vec<Point> = xs.iter().enumerate().map(|(i, &x)| Point::new(x, i as f64 * 30.0)).collect();
            let base = Polyline::new(pts.clone()).unwrap();
            let scaled = base.map(|p| Point::new(p.x * scale, p.y * scale)).unwrap();
            let a = resample_at_rows(&base, &[row])[0].unwrap();
            let b = resample_at_rows(&scaled, &[row * scale])[0].unwrap();
            prop_assert!((a * scale - b).abs() < 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn transform_round_trip(
            l in -100.0f64..500.0, t in -100.0f64..500.0,
            w in 1.0f64..900.0, h in 1.0f64..900.0,
            ww in 1u32..1024, wh in 1u32..1024,
            x in -50.0f64..1100.0, y in -50.0f64..1100.0,
        ) {
            let crop = CropRegion::new(l, t, l + w, t + h).unwrap();
            let fwd = transform_path(&[Point::new(x, y)], &crop, (ww, wh)).unwrap();
            let back = inverse_transform_path(&fwd, &crop, (ww, wh)).unwrap();
            prop_assert!((back[0].x - x).abs() < 1e-6 && (back[0].y - y).abs() < 1e-6);
        }
    }
}
