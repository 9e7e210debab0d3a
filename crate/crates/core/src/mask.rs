//! Binary foreground/background masks, their raster file encoding and the
//! run-length wire format used by the annotation service.
//!
//! Raster files are 8-bit single-channel PNG with the strict value set
//! `{0, 255}`. The RLE string is `"W,H;"` followed by comma-separated run
//! lengths over row-major pixels, alternating and starting with background.

use std::collections::VecDeque;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const FOREGROUND_VALUE: u8 = 255;
pub const BACKGROUND_VALUE: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a mask from a predicate over `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count_foreground() as f64 / self.data.len() as f64
    }

    /// Foreground pixels as `(x, y)` in row-major order.
    pub fn foreground_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Foreground IoU; two empty masks count as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_same_dims(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// 8-connected foreground components, ordered by their first pixel in
    /// row-major order.
    pub fn connected_components(&self) -> Vec<BinaryMask> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut label = vec![usize::MAX; self.data.len()];
        let mut components = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut comp = BinaryMask::new(self.width, self.height);
            label[start] = id;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                comp.data[i] = true;
                let (x, y) = ((i as i64) % w, (i as i64) / w);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if self.data[j] && label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
            components.push(comp);
        }
        components
    }

    /// Nearest-neighbour resample sampling at pixel centres.
    pub fn resize_nearest(&self, width: u32, height: u32) -> BinaryMask {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        BinaryMask::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as u32).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as u32).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) {
                FOREGROUND_VALUE
            } else {
                BACKGROUND_VALUE
            }])
        })
    }

    /// Strict conversion: only 8-bit single-channel rasters holding 0/255.
    pub fn from_dynamic_image(img: &DynamicImage) -> Result<Self> {
        let gray = match img {
            DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::UnsupportedFormat(format!(
                    "mask must be 8-bit single-channel, got {:?}",
                    other.color()
                )))
            }
        };
        let mut data = Vec::with_capacity(gray.len());
        for (x, y, p) in gray.enumerate_pixels() {
            match p.0[0] {
                FOREGROUND_VALUE => data.push(true),
                BACKGROUND_VALUE => data.push(false),
                value => return Err(Error::InvalidPixelValue { value, x, y }),
            }
        }
        Self::from_vec(gray.width(), gray.height(), data)
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut buf, ImageFormat::Png)
            .expect("png encoding into memory cannot fail");
        buf.into_inner()
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
        Self::from_dynamic_image(&img)
    }

    pub fn to_rle(&self) -> String {
        encode_rle(self)
    }

    pub fn from_rle(s: &str) -> Result<Self> {
        decode_rle(s)
    }
}

// Serialised through the RLE wire format.
impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rle())
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        decode_rle(&s).map_err(de::Error::custom)
    }
}

/// Reads a mask raster. Only lossless 8-bit single-channel files are accepted.
pub fn decode_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    if format != ImageFormat::Png {
        return Err(Error::UnsupportedFormat(format!("{format:?} is not a lossless mask format")));
    }
    BinaryMask::from_png_bytes(&bytes)
}

pub fn encode_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, mask.to_png_bytes()).map_err(|e| Error::io(path, e))
}

pub fn encode_rle(mask: &BinaryMask) -> String {
    let mut out = format!("{},{};", mask.width, mask.height);
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &v in &mask.data {
        if v == current {
            run += 1;
        } else {
            runs.push(run);
            current = v;
            run = 1;
        }
    }
    runs.push(run);
    let body: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
    out.push_str(&body.join(","));
    out
}

pub fn decode_rle(s: &str) -> Result<BinaryMask> {
    let bad = |why: &str| Error::InvalidArgument(format!("malformed RLE mask: {why}"));
    let (dims, body) = s.split_once(';').ok_or_else(|| bad("missing ';'"))?;
    let (w, h) = dims.split_once(',').ok_or_else(|| bad("missing dimensions"))?;
    let width: u32 = w.trim().parse().map_err(|_| bad("width"))?;
    let height: u32 = h.trim().parse().map_err(|_| bad("height"))?;
    let total = width as usize * height as usize;
    let mut data = Vec::with_capacity(total);
    let mut value = false;
    if !body.trim().is_empty() {
        for tok in body.split(',') {
            let run: usize = tok.trim().parse().map_err(|_| bad("run length"))?;
            if data.len() + run > total {
                return Err(bad("runs exceed W*H"));
            }
            data.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
    }
    if data.len() != total {
        return Err(bad("runs do not sum to W*H"));
    }
    BinaryMask::from_vec(width, height, data)
}
