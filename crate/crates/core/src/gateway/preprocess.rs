//! Foundation-model input convention: scale the longest side to
//! `target_side` (bilinear, aspect preserved) and zero-pad bottom/right to a
//! square.

use serde::{Deserialize, Serialize};

use crate::data::RasterImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::prompt::Prompt;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocParams {
    pub target_side: u32,
    pub scale: f64,
    pub pad_right: u32,
    pub pad_bottom: u32,
    pub orig_width: u32,
    pub orig_height: u32,
}

impl PreprocParams {
    pub fn new(orig_width: u32, orig_height: u32, target_side: u32) -> Result<Self> {
        if orig_width == 0 || orig_height == 0 || target_side == 0 {
            return Err(Error::ShapeError(format!(
                "cannot preprocess {orig_width}x{orig_height} to side {target_side}"
            )));
        }
        let scale = target_side as f64 / orig_width.max(orig_height) as f64;
        let (w, h) = scaled_dims(orig_width, orig_height, scale, target_side);
        Ok(Self {
            target_side,
            scale,
            pad_right: target_side - w,
            pad_bottom: target_side - h,
            orig_width,
            orig_height,
        })
    }

    /// Size of the image content inside the padded square.
    pub fn content_dims(&self) -> (u32, u32) {
        (
            self.target_side - self.pad_right,
            self.target_side - self.pad_bottom,
        )
    }

    pub fn image_to_model(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale, y * self.scale)
    }

    pub fn model_to_image(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale, y / self.scale)
    }

    pub fn prompt_to_model(&self, prompt: &Prompt) -> Prompt {
        let mut p = prompt.clone();
        if let Some([x, y]) = p.point {
            let (mx, my) = self.image_to_model(x, y);
            p.point = Some([mx, my]);
        }
        if let Some([x0, y0, x1, y1]) = p.bbox {
            let (a, b) = self.image_to_model(x0, y0);
            let (c, d) = self.image_to_model(x1, y1);
            p.bbox = Some([a, b, c, d]);
        }
        p
    }

    /// Maps a square model-frame mask (any resolution covering the padded
    /// square) back to original image coordinates.
    pub fn mask_to_image(&self, model_mask: &BinaryMask) -> BinaryMask {
        let res_x = model_mask.width() as f64 / self.target_side as f64;
        let res_y = model_mask.height() as f64 / self.target_side as f64;
        BinaryMask::from_fn(self.orig_width, self.orig_height, |x, y| {
            let (mx, my) = self.image_to_model(x as f64 + 0.5, y as f64 + 0.5);
            let fx = ((mx * res_x) as u32).min(model_mask.width() - 1);
            let fy = ((my * res_y) as u32).min(model_mask.height() - 1);
            model_mask.get(fx, fy)
        })
    }

    /// Maps an image mask into a `frame_w`x`frame_h` raster covering the
    /// padded model square; padding is background.
    pub fn mask_to_frame(&self, image_mask: &BinaryMask, frame_w: u32, frame_h: u32) -> BinaryMask {
        let sx = self.target_side as f64 / frame_w as f64;
        let sy = self.target_side as f64 / frame_h as f64;
        BinaryMask::from_fn(frame_w, frame_h, |u, v| {
            let (ix, iy) = self.model_to_image((u as f64 + 0.5) * sx, (v as f64 + 0.5) * sy);
            if ix < 0.0 || iy < 0.0 || ix >= self.orig_width as f64 || iy >= self.orig_height as f64 {
                return false;
            }
            image_mask.get(ix as u32, iy as u32)
        })
    }
}

fn scaled_dims(w: u32, h: u32, scale: f64, target: u32) -> (u32, u32) {
    let sw = ((w as f64 * scale).round() as u32).clamp(1, target);
    let sh = ((h as f64 * scale).round() as u32).clamp(1, target);
    (sw, sh)
}

/// Model-space input: `side`x`side` pixels, interleaved channels, values
/// in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub preproc: PreprocParams,
}

impl ModelInput {
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect()
    }

    /// 8-bit quantisation of the model input, for adapters that take rasters.
    pub fn to_raster(&self) -> RasterImage {
        RasterImage {
            width: self.width as u32,
            height: self.height as u32,
            channels: self.channels as u8,
            data: self
                .data
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

pub fn preprocess(image: &RasterImage, target_side: u32) -> Result<ModelInput> {
    let params = PreprocParams::new(image.width, image.height, target_side)?;
    let (cw, ch) = params.content_dims();
    let channels = image.channels as usize;
    let side = target_side as usize;
    let mut data = vec![0f32; side * side * channels];
    let sx = image.width as f64 / cw as f64;
    let sy = image.height as f64 / ch as f64;
    let max_x = image.width as f64 - 1.0;
    let max_y = image.height as f64 - 1.0;
    for y in 0..ch as usize {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = src_y.floor() as u32;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = src_y - y0 as f64;
        for x in 0..cw as usize {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = src_x.floor() as u32;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = src_x - x0 as f64;
            let (p00, p01) = (image.pixel(x0, y0), image.pixel(x1, y0));
            let (p10, p11) = (image.pixel(x0, y1), image.pixel(x1, y1));
            let out = (y * side + x) * channels;
            for c in 0..channels {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                data[out + c] = ((top * (1.0 - fy) + bottom * fy) / 255.0) as f32;
            }
        }
    }
    Ok(ModelInput {
        width: side,
        height: side,
        channels,
        data,
        preproc: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_900_scales_to_1024_without_padding() {
        let p = PreprocParams::new(900, 900, 1024).unwrap();
        assert!((p.scale - 1024.0 / 900.0).abs() < 1e-12);
        assert!((900.0 * p.scale - 1024.0).abs() < 1e-9);
        assert_eq!((p.pad_right, p.pad_bottom), (0, 0));
    }

    #[test]
    fn wide_image_pads_bottom() {
        let p = PreprocParams::new(512, 256, 1024).unwrap();
        assert_eq!(p.scale, 2.0);
        assert_eq!((p.pad_right, p.pad_bottom), (0, 512));
    }

    #[test]
    fn same_size_is_identity() {
        let mut img = RasterImage::new(16, 16, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        let input = preprocess(&img, 16).unwrap();
        assert_eq!(input.preproc.scale, 1.0);
        for (a, &b) in input.data.iter().zip(&img.data) {
            assert_eq!(*a, (b as f64 / 255.0) as f32);
        }
        assert_eq!(input.to_raster(), img);
    }

    #[test]
    fn padding_is_zero() {
        let img = RasterImage {
            width: 4,
            height: 2,
            channels: 1,
            data: vec![255; 8],
        };
        let input = preprocess(&img, 8).unwrap();
        assert_eq!(input.preproc.content_dims(), (8, 4));
        assert!(input.data[..32].iter().all(|&v| v == 1.0));
        assert!(input.data[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_mapping_round_trips_on_integer_scale() {
        let mask = BinaryMask::from_fn(20, 10, |x, y| (x + 2 * y) % 3 == 0);
        let p = PreprocParams::new(20, 10, 40).unwrap();
        let frame = p.mask_to_frame(&mask, 40, 40);
        assert_eq!(p.mask_to_image(&frame), mask);
    }

    proptest! {
        #[test]
        fn point_round_trip_within_half_pixel(
            w in 1u32..2000, h in 1u32..2000, side in 16u32..2048,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0,
        ) {
            let p = PreprocParams::new(w, h, side).unwrap();
            let (x, y) = (fx * w as f64, fy * h as f64);
            let (mx, my) = p.image_to_model(x, y);
            prop_assert!(mx <= side as f64 + 1e-9 && my <= side as f64 + 1e-9);
            let (bx, by) = p.model_to_image(mx, my);
            prop_assert!((bx - x).abs() <= 0.5 && (by - y).abs() <= 0.5);
        }
    }
}
