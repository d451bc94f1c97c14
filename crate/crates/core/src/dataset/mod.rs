//! Image/mask loading, preprocessing to the canonical square size, edge-band
//! targets, cross-validation folds, and the synthetic corpus.
//!
//! On-disk layout, for both raw and prepared datasets:
//!
//! ```text
//! <root>/images/<stem>.png   8-bit grayscale
//! <root>/masks/<stem>.png    8-bit, foreground > 127
//! ```
//!
//! A prepared dataset adds `edges/`, optionally `superpixels/`, and a
//! `manifest.json` carrying the hash of the preprocessing parameters.

mod edge;
mod folds;
mod prepared;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use edge::{boundary, make_edge_target, BAND_RADIUS};
pub use folds::{make_folds, FoldSplit};
pub use prepared::{
    load_prepared, prepare_dataset, Manifest, PrepareOutcome, PrepareParams, PreparedDataset,
    MANIFEST_FILE,
};
pub use synthetic::{ellipse_for, synthetic_pair, Ellipse, AXIS_RANGE};

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::superpixel::{superpixel_channel, SlicParams};

/// Fraction of mid-gray mask pixels (64..=191) above which a mask is
/// rejected as not binary.
pub const MAX_INDETERMINATE_FRACTION: f64 = 0.01;

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryData {
    Files { image: PathBuf, mask: PathBuf },
    Synthetic { seed: u64, index: u64, size: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub data: EntryData,
    pub label: Option<String>,
}

/// An image in `[0, 1]` and its binary mask, at original resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub image: Plane<f32>,
    pub mask: Plane<bool>,
}

impl Entry {
    pub fn load(&self) -> Result<RawPair> {
        match &self.data {
            EntryData::Files { image, mask } => {
                let img = read_gray(image)?;
                let raw_mask = read_gray_u8(mask)?;
                let mask = binarize_mask(&raw_mask)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", mask.display())))?;
                if img.dims() != mask.dims() {
                    return Err(Error::Dataset(format!(
                        "{}: image is {}×{} but mask is {}×{}",
                        self.id,
                        img.width(),
                        img.height(),
                        mask.width(),
                        mask.height()
                    )));
                }
                Ok(RawPair { image: img, mask })
            }
            EntryData::Synthetic { seed, index, size } => Ok(synthetic_pair(*seed, *index, *size)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<Entry>,
    pub source: SourceTag,
    /// Files without a counterpart of the same stem.
    pub orphans: Vec<PathBuf>,
    /// Matched pairs refused at validation, with the reason.
    pub rejected: Vec<(String, String)>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for item in rd {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Index `<root>/images` against `<root>/masks` by file stem. Each matched
/// pair is decoded and validated; unmatched files land in `orphans` and bad
/// pairs in `rejected`, both logged.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let images = if img_dir.is_dir() {
        stems(&img_dir)?
    } else {
        BTreeMap::new()
    };
    let masks = if mask_dir.is_dir() {
        stems(&mask_dir)?
    } else {
        BTreeMap::new()
    };
    let mut index = DatasetIndex {
        entries: Vec::new(),
        source: SourceTag::Real,
        orphans: Vec::new(),
        rejected: Vec::new(),
    };
    for (stem, image) in &images {
        let Some(mask) = masks.get(stem) else {
            index.orphans.push(image.clone());
            continue;
        };
        let entry = Entry {
            id: stem.clone(),
            data: EntryData::Files {
                image: image.clone(),
                mask: mask.clone(),
            },
            label: None,
        };
        match entry.load() {
            Ok(_) => index.entries.push(entry),
            Err(e) => {
                log::warn!("rejecting {stem}: {e}");
                index.rejected.push((stem.clone(), e.to_string()));
            }
        }
    }
    index.orphans.extend(
        masks
            .iter()
            .filter(|(s, _)| !images.contains_key(*s))
            .map(|(_, p)| p.clone()),
    );
    for o in &index.orphans {
        log::warn!("no counterpart for {}", o.display());
    }
    if index.entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples found in {} ({} orphans, {} rejected)",
            root.display(),
            index.orphans.len(),
            index.rejected.len()
        )));
    }
    Ok(index)
}

/// A synthetic corpus of `count` samples at side `size`.
pub fn generate_synthetic(count: usize, size: usize, seed: u64) -> Result<DatasetIndex> {
    if count == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    let width = count.saturating_sub(1).to_string().len();
    Ok(DatasetIndex {
        entries: (0..count)
            .map(|i| Entry {
                id: format!("synth_{i:0width$}"),
                data: EntryData::Synthetic {
                    seed,
                    index: i as u64,
                    size,
                },
                label: None,
            })
            .collect(),
        source: SourceTag::Synthetic,
        orphans: Vec::new(),
        rejected: Vec::new(),
    })
}

/// One preprocessed training example; all planes `size × size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Plane<f32>,
    pub superpixel: Option<Plane<f32>>,
    pub mask: Plane<bool>,
    pub edge: Plane<bool>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.width()
    }

    /// Compute the region-mean channel from the stored image.
    pub fn with_superpixels(mut self, params: &SlicParams) -> Result<Sample> {
        let mut sp = superpixel_channel(&self.image, params)?;
        sp.quantize_u8();
        self.superpixel = Some(sp);
        Ok(self)
    }

    /// Flip left to right, all planes together.
    pub fn flipped(&self) -> Sample {
        fn flip<T: Copy>(p: &Plane<T>) -> Plane<T> {
            Plane::from_fn(p.width(), p.height(), |x, y| p.get(p.width() - 1 - x, y))
        }
        Sample {
            id: self.id.clone(),
            image: flip(&self.image),
            superpixel: self.superpixel.as_ref().map(flip),
            mask: flip(&self.mask),
            edge: flip(&self.edge),
        }
    }
}

pub fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Config(format!(
            "canonical size must be a positive multiple of 16, got {size}"
        )));
    }
    Ok(())
}

/// Bilinear resize to `size × size`, min–max normalize and quantize to 8
/// bits. Shared by training and inference.
pub fn preprocess_image(id: &str, image: &Plane<f32>, size: usize) -> Result<Plane<f32>> {
    check_size(size)?;
    if image.is_empty() {
        return Err(Error::Shape(format!("{id}: empty image")));
    }
    let mut image = image.resize_bilinear(size, size);
    if !image.normalize_min_max() {
        log::warn!("{id}: constant image, normalized to zeros");
    }
    image.quantize_u8();
    Ok(image)
}

/// Resize to `size × size` (bilinear image, nearest mask), min–max normalize
/// and quantize the image to 8 bits, and derive the edge band.
pub fn preprocess_sample(id: impl Into<String>, raw: &RawPair, size: usize) -> Result<Sample> {
    check_size(size)?;
    let id = id.into();
    if raw.image.dims() != raw.mask.dims() {
        return Err(Error::Shape(format!(
            "{id}: image {:?} and mask {:?} differ in size",
            raw.image.dims(),
            raw.mask.dims()
        )));
    }
    let image = preprocess_image(&id, &raw.image, size)?;
    let mask = raw.mask.resize_nearest(size, size);
    let edge = make_edge_target(&mask, BAND_RADIUS);
    Ok(Sample {
        id,
        image,
        superpixel: None,
        mask,
        edge,
    })
}

/// Mask threshold at 0.5 (values > 127), refusing masks with too many
/// mid-gray pixels.
pub fn binarize_mask(raw: &Plane<u8>) -> Result<Plane<bool>> {
    let gray = raw
        .data()
        .iter()
        .filter(|&&v| (64..=191).contains(&v))
        .count();
    let fraction = gray as f64 / raw.len().max(1) as f64;
    if fraction >= MAX_INDETERMINATE_FRACTION {
        return Err(Error::Dataset(format!(
            "mask is not binary: {:.1}% of pixels are mid-gray",
            100.0 * fraction
        )));
    }
    Ok(raw.map(|v| v > 127))
}

pub fn read_gray_u8(path: &Path) -> Result<Plane<u8>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Plane::from_vec(w as usize, h as usize, luma.into_raw())
}

/// Decode to intensities in `[0, 1]`; 16-bit sources keep their precision.
pub fn read_gray(path: &Path) -> Result<Plane<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    Plane::from_vec(
        w as usize,
        h as usize,
        luma.into_raw()
            .into_iter()
            .map(|v| f32::from(v) / 65535.0)
            .collect(),
    )
}

pub fn write_gray(path: &Path, plane: &Plane<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(
        plane.width() as u32,
        plane.height() as u32,
        plane.data().to_vec(),
    )
    .ok_or_else(|| Error::Shape("plane does not match its dimensions".into()))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_binary(path: &Path, plane: &Plane<bool>) -> Result<()> {
    write_gray(path, &plane.map(|b| if b { 255 } else { 0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocessing_shapes_and_ranges() {
        let raw = RawPair {
            image: Plane::from_fn(76, 57, |x, y| (x + y) as f32),
            mask: Plane::from_fn(76, 57, |x, y| {
                (30..50).contains(&x) && (20..40).contains(&y)
            }),
        };
        let s = preprocess_sample("a", &raw, 32).unwrap();
        assert_eq!(s.image.dims(), (32, 32));
        assert_eq!(s.mask.dims(), (32, 32));
        assert_eq!(s.edge.dims(), (32, 32));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.edge.count() > 0);
        assert!(preprocess_sample("a", &raw, 30).is_err());
    }

    #[test]
    fn identity_resize_keeps_the_mask() {
        let mask = Plane::from_fn(32, 32, |x, y| x * y % 5 == 0);
        let raw = RawPair {
            image: Plane::from_fn(32, 32, |x, _| x as f32),
            mask: mask.clone(),
        };
        assert_eq!(preprocess_sample("b", &raw, 32).unwrap().mask, mask);
    }

    #[test]
    fn empty_mask_gives_empty_edge() {
        let raw = RawPair {
            image: Plane::filled(16, 16, 0.5),
            mask: Plane::filled(16, 16, false),
        };
        let s = preprocess_sample("c", &raw, 16).unwrap();
        assert_eq!(s.edge.count(), 0);
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gray_masks_are_rejected() {
        let ok = Plane::from_fn(10, 10, |x, _| if x < 5 { 0u8 } else { 255 });
        assert_eq!(binarize_mask(&ok).unwrap().count(), 50);
        let soft = Plane::from_fn(10, 10, |x, _| (x * 25) as u8);
        assert!(binarize_mask(&soft).is_err());
    }
}
