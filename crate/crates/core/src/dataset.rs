//! Ego-path annotations: loading, automatic ego-pair selection and splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point, Polyline};
use crate::{Error, Result};

/// Anchor count used when checking that two rails overlap enough to be useful.
pub const DEFAULT_ANCHORS: usize = 64;

/// Image size of the RailSem19 frames, used when a record omits its dimensions.
pub const DEFAULT_IMAGE_DIMS: (u32, u32) = (1920, 1080);

/// The left and right rails of one image's ego-path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPathAnnotation {
    pub image_id: String,
    pub left_rail: Polyline,
    pub right_rail: Polyline,
    pub image_width: u32,
    pub image_height: u32,
}

impl EgoPathAnnotation {
    pub fn new(image_id: impl Into<String>, left_rail: Polyline, right_rail: Polyline, dims: (u32, u32)) -> Result<Self> {
        let ann = Self { image_id: image_id.into(), left_rail, right_rail, image_width: dims.0, image_height: dims.1 };
        ann.validate()?;
        Ok(ann)
    }

    /// Checks rail ordering and vertical overlap.
    pub fn validate(&self) -> Result<()> {
        let reject = |reason: String| Err(Error::InvalidAnnotation { id: self.image_id.clone(), reason });
        if self.image_width == 0 || self.image_height == 0 {
            return reject("zero image dimensions".into());
        }
        let lo = self.left_rail.bottom().y.min(self.right_rail.bottom().y);
        let hi = self.left_rail.top().y.max(self.right_rail.top().y);
        let min_overlap = 2.0 * self.image_height as f64 / DEFAULT_ANCHORS as f64;
        if lo - hi < min_overlap {
            return reject(format!("rails overlap over {:.1} px, need {min_overlap:.1}", (lo - hi).max(0.0)));
        }
        let shared = self.left_rail.points().iter().chain(self.right_rail.points()).map(|p| p.y).filter(|&y| y <= lo && y >= hi);
        for y in shared {
            if let (Some(l), Some(r)) = (self.left_rail.x_at(y), self.right_rail.x_at(y)) {
                if l > r {
                    return reject(format!("left rail right of right rail at y = {y} ({l} > {r})"));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.image_width, self.image_height)
    }

    /// The annotation mirrored about the vertical centerline, with rail labels swapped.
    pub fn mirrored(&self) -> Self {
        let w = self.image_width as f64;
        Self {
            image_id: self.image_id.clone(),
            left_rail: self.right_rail.mirrored(w),
            right_rail: self.left_rail.mirrored(w),
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }
}

/// Outcome of [`auto_select_ego_pair`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPairSelection {
    pub index: usize,
    /// Distance gap in pixels between the winner and the runner-up
    /// (infinite when there is a single candidate).
    pub margin: f64,
    /// Set when the margin is below 5% of the image width.
    pub ambiguous: bool,
}

/// Fraction of the image width under which a selection is flagged for review.
pub const AMBIGUITY_MARGIN: f64 = 0.05;

/// Bottom midpoint and rail spacing of a pair, at the lowest row both rails reach.
fn pair_base(pair: &(Polyline, Polyline)) -> (f64, f64) {
    let y = pair.0.bottom().y.min(pair.1.bottom().y);
    let l = pair.0.x_at(y).unwrap_or(pair.0.bottom().x);
    let r = pair.1.x_at(y).unwrap_or(pair.1.bottom().x);
    ((l + r) / 2.0, (r - l).abs())
}

/// Picks the pair whose base midpoint lies nearest the image's vertical
/// centerline; ties go to the wider (closer) pair.
pub fn auto_select_ego_pair(pairs: &[(Polyline, Polyline)], dims: (u32, u32)) -> Option<EgoPairSelection> {
    let center = (dims.0 as f64 - 1.0) / 2.0;
    let mut scored: Vec<(usize, f64, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (mid, spacing) = pair_base(p);
            (i, (mid - center).abs(), spacing)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    let best = *scored.first()?;
    let margin = scored.get(1).map_or(f64::INFINITY, |s| s.1 - best.1);
    Some(EgoPairSelection { index: best.0, margin, ambiguous: margin < AMBIGUITY_MARGIN * dims.0 as f64 })
}

#[derive(Deserialize)]
struct RawRecord {
    left_rail: Vec<[f64; 2]>,
    right_rail: Vec<[f64; 2]>,
    #[serde(default)]
    image_width: Option<u32>,
    #[serde(default)]
    image_height: Option<u32>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    left_rail: &'a Polyline,
    right_rail: &'a Polyline,
    image_width: u32,
    image_height: u32,
}

/// Result of loading an annotation file.
#[derive(Debug, Clone, Default)]
pub struct LoadedAnnotations {
    pub annotations: BTreeMap<String, EgoPathAnnotation>,
    /// Records that parsed but broke an annotation invariant.
    pub rejected: Vec<(String, String)>,
}

/// Reads an annotation file: a JSON object mapping image ids to
/// `{left_rail: [[x, y], ...], right_rail: [[x, y], ...]}`.
///
/// Records set to `null` are unannotated images and skipped. Records lacking
/// dimensions get `default_dims`.
pub fn load_annotations(path: impl AsRef<Path>, default_dims: (u32, u32)) -> Result<LoadedAnnotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, default_dims).map_err(|records| Error::MalformedAnnotations { path: path.to_owned(), records })
}

fn parse_annotations(text: &str, default_dims: (u32, u32)) -> std::result::Result<LoadedAnnotations, Vec<String>> {
    let root: serde_json::Value = serde_json::from_str(text).map_err(|e| vec![format!("not valid JSON: {e}")])?;
    let serde_json::Value::Object(map) = root else {
        return Err(vec!["top level must be an object keyed by image id".into()]);
    };
    let mut out = LoadedAnnotations::default();
    let mut malformed = Vec::new();
    for (id, value) in map {
        if value.is_null() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                malformed.push(format!("{id}: {e}"));
                continue;
            }
        };
        let dims = (raw.image_width.unwrap_or(default_dims.0), raw.image_height.unwrap_or(default_dims.1));
        let rails = Polyline::new(raw.left_rail.into_iter().map(Point::from))
            .and_then(|l| Polyline::new(raw.right_rail.into_iter().map(Point::from)).map(|r| (l, r)));
        match rails.and_then(|(l, r)| EgoPathAnnotation::new(id.clone(), l, r, dims)) {
            Ok(ann) => {
                out.annotations.insert(id, ann);
            }
            Err(e) => out.rejected.push((id, e.to_string())),
        }
    }
    if malformed.is_empty() {
        Ok(out)
    } else {
        Err(malformed)
    }
}

/// Writes annotations in the format read by [`load_annotations`].
pub fn save_annotations<'a>(path: impl AsRef<Path>, annotations: impl IntoIterator<Item = &'a EgoPathAnnotation>) -> Result<()> {
    let map: BTreeMap<&str, RawRecordOut<'_>> = annotations
        .into_iter()
        .map(|a| {
            (
                a.image_id.as_str(),
                RawRecordOut { left_rail: &a.left_rail, right_rail: &a.right_rail, image_width: a.image_width, image_height: a.image_height },
            )
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Disjoint train/validation/test id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded shuffle into train/val/test. Validation and test sizes are rounded
/// to nearest; the remainder goes to training.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n);
    let n_test = ((n as f64 * ratios[2]).round() as usize).min(n - n_val);
    let test = sorted.split_off(n - n_test);
    let val = sorted.split_off(n - n_test - n_val);
    Ok(DatasetSplit { seed, ratios, train: sorted, val, test })
}

/// Every candidate rail pair of one image, as consumed by automatic annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RailPairsRecord {
    pub image_width: u32,
    pub image_height: u32,
    /// `[left, right]` point lists.
    pub pairs: Vec<[Vec<Point>; 2]>,
}

impl RailPairsRecord {
    pub fn polylines(&self) -> Result<Vec<(Polyline, Polyline)>> {
        self.pairs.iter().map(|[l, r]| Ok((Polyline::new(l.iter().copied())?, Polyline::new(r.iter().copied())?))).collect()
    }
}

/// Reads a JSON object mapping image ids to [`RailPairsRecord`]s.
pub fn load_rail_pairs(path: impl AsRef<Path>) -> Result<BTreeMap<String, RailPairsRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_rail_pairs(path: impl AsRef<Path>, records: &BTreeMap<String, RailPairsRecord>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

/// An image with its ego-path label.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub annotation: EgoPathAnnotation,
}

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Locates the image file of `id` in `dir`: the id itself if it names a
/// file, else `id` with a known extension.
pub fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    let direct = dir.join(id);
    if direct.is_file() {
        return Some(direct);
    }
    IMAGE_EXTENSIONS.iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

/// Loads the images of `ids` from `dir` and pairs them with their annotations.
pub fn load_labeled_images(dir: &Path, annotations: &BTreeMap<String, EgoPathAnnotation>, ids: &[String]) -> Result<Vec<LabeledImage>> {
    ids.iter()
        .map(|id| {
            let annotation = annotations
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no annotation for image {id}")))?
                .clone();
            let path = find_image(dir, id).ok_or_else(|| Error::InvalidArgument(format!("no image file for {id} in {}", dir.display())))?;
            let image = image::open(&path)?.to_rgb8();
            if image.dimensions() != annotation.dims() {
                return Err(Error::DimensionMismatch {
                    expected: (annotation.image_width as usize, annotation.image_height as usize),
                    got: (image.width() as usize, image.height() as usize),
                });
            }
            Ok(LabeledImage { image, annotation })
        })
        .collect()
}
