//! Corpus manifests: loading, validating, splitting and persisting the
//! image/mask corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageDecoder, ImageEncoder, ImageFormat, ImageReader};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{decode_mask, BinaryMask};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Published corpus split: 486 samples, 405 train, 25 validation, the
/// remainder test.
pub const REFERENCE_CORPUS_SIZE: usize = 486;
pub const REFERENCE_TRAIN_COUNT: usize = 405;
pub const REFERENCE_VAL_COUNT: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// An 8-bit raster held in interleaved row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width as usize * height as usize * channels as usize],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        match img {
            DynamicImage::ImageLuma8(g) => Ok(Self {
                width: g.width(),
                height: g.height(),
                channels: 1,
                data: g.into_raw(),
            }),
            DynamicImage::ImageRgb8(rgb) => Ok(Self {
                width: rgb.width(),
                height: rgb.height(),
                channels: 3,
                data: rgb.into_raw(),
            }),
            other => Err(Error::UnsupportedFormat(format!(
                "images must be 8-bit 1- or 3-channel, got {:?}",
                other.color()
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::DecodeFailure(e.to_string()))?;
        Self::from_dynamic(img)
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(&self.data, self.width, self.height, color)
            .expect("png encoding into memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_png_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixel_path: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub gt_mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    samples: Vec<ImageSample>,
    split_counts: BTreeMap<Split, usize>,
    schema_version: u32,
    base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    samples: Vec<ImageSample>,
}

impl Manifest {
    /// Validates samples (unique ids, non-zero dims, channels) and sorts by id.
    pub fn from_samples(mut samples: Vec<ImageSample>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateId(pair[0].id.clone()));
            }
        }
        for s in &samples {
            if s.width == 0 || s.height == 0 {
                return Err(Error::InvalidArgument(format!("sample `{}` has zero size", s.id)));
            }
            if s.channels != 1 && s.channels != 3 {
                return Err(Error::UnsupportedFormat(format!(
                    "sample `{}` has {} channels",
                    s.id, s.channels
                )));
            }
        }
        let mut split_counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in &samples {
            *split_counts.entry(s.split).or_default() += 1;
        }
        Ok(Self {
            samples,
            split_counts,
            schema_version: MANIFEST_SCHEMA_VERSION,
            base_dir: base_dir.into(),
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn split_counts(&self) -> &BTreeMap<Split, usize> {
        &self.split_counts
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.split_counts.get(&split).copied().unwrap_or(0)
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load_image(&self, sample: &ImageSample) -> Result<RasterImage> {
        let path = self.resolve(&sample.pixel_path);
        if !path.exists() {
            return Err(Error::MissingFile {
                id: sample.id.clone(),
                path,
            });
        }
        RasterImage::load(&path)
    }

    pub fn load_gt(&self, sample: &ImageSample) -> Result<BinaryMask> {
        let rel = sample
            .gt_mask_path
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(sample.id.clone()))?;
        decode_mask(&self.resolve(rel))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            schema_version: self.schema_version,
            samples: self.samples.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates a manifest file; relative sample paths resolve
    /// against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        if file.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported manifest schema version {}",
                file.schema_version
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::from_samples(file.samples, base)?;
        for s in &manifest.samples {
            let paths = std::iter::once(&s.pixel_path).chain(s.gt_mask_path.as_ref());
            for p in paths {
                let resolved = manifest.resolve(p);
                if !resolved.exists() {
                    return Err(Error::MissingFile {
                        id: s.id.clone(),
                        path: resolved,
                    });
                }
            }
        }
        Ok(manifest)
    }
}

fn raster_header(path: &Path) -> Result<(u32, u32, u8)> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoder = reader
        .into_decoder()
        .map_err(|e| Error::DecodeFailure(format!("{}: {e}", path.display())))?;
    let (w, h) = decoder.dimensions();
    let channels = match decoder.color_type() {
        image::ColorType::L8 => 1,
        image::ColorType::Rgb8 => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {other:?}",
                path.display()
            )))
        }
    };
    Ok((w, h, channels))
}

/// Builds a manifest from `<image_dir>/<id>.png` and optional
/// `<mask_dir>/<id>.png` for every id named in `split_spec`.
pub fn build_manifest(
    image_dir: &Path,
    mask_dir: &Path,
    split_spec: &BTreeMap<String, Split>,
) -> Result<Manifest> {
    let canonical = |dir: &Path| std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    let image_dir = canonical(image_dir);
    let mask_dir = canonical(mask_dir);
    let mut samples = Vec::with_capacity(split_spec.len());
    for (id, &split) in split_spec {
        let pixel_path = image_dir.join(format!("{id}.png"));
        if !pixel_path.is_file() {
            return Err(Error::MissingFile {
                id: id.clone(),
                path: pixel_path,
            });
        }
        let (width, height, channels) = raster_header(&pixel_path)?;
        let mask_path = mask_dir.join(format!("{id}.png"));
        let gt_mask_path = if mask_path.is_file() {
            let (mw, mh, _) = raster_header(&mask_path)?;
            if (mw, mh) != (width, height) {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    image_w: width,
                    image_h: height,
                    mask_w: mw,
                    mask_h: mh,
                });
            }
            Some(mask_path)
        } else {
            None
        };
        samples.push(ImageSample {
            id: id.clone(),
            width,
            height,
            channels,
            pixel_path,
            split,
            gt_mask_path,
        });
    }
    Manifest::from_samples(samples, image_dir)
}

/// Seeded assignment of `n_train` train and `n_val` validation ids; all
/// remaining ids go to test.
pub fn split_spec_by_counts(
    ids: &[String],
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        let mut seen = BTreeSet::new();
        let dup = ids.iter().find(|id| !seen.insert(*id)).cloned().unwrap_or_default();
        return Err(Error::DuplicateId(dup));
    }
    if n_train + n_val > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_train} train + {n_val} val exceeds {} ids",
            ids.len()
        )));
    }
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect())
}

/// Train/val counts for a corpus of `n` samples in the published
/// 405:25:remainder proportions (floored; test takes the remainder).
pub fn reference_split_counts(n: usize) -> (usize, usize) {
    (
        n * REFERENCE_TRAIN_COUNT / REFERENCE_CORPUS_SIZE,
        n * REFERENCE_VAL_COUNT / REFERENCE_CORPUS_SIZE,
    )
}
