//! Synthetic pit/skylight scenes for weight-free runs.
//!
//! Each scene is a textured regolith background with one to three dark
//! elliptical pits. Every pit abuts a darker crescent-shaped shadow cast
//! along the scene's illumination direction. The ground-truth mask covers the
//! pit ellipses only; shadows are background.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{reference_split_counts, ImageSample, Manifest, RasterImage, Split};
use crate::error::{Error, Result};
use crate::mask::{encode_mask, BinaryMask};

const BACKGROUND_RGB: [f64; 3] = [178.0, 148.0, 116.0];
const PIT_RGB: [f64; 3] = [104.0, 72.0, 58.0];
const SHADOW_RGB: [f64; 3] = [30.0, 27.0, 30.0];
/// Semi-axis range as a fraction of the scene side.
const SEMI_AXIS_RANGE: (f64, f64) = (0.07, 0.15);
/// Shadow offset as a fraction of the pit's minor semi-axis.
const SHADOW_OFFSET: (f64, f64) = (0.35, 0.6);
const MAX_PITS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn shifted(&self, dx: f64, dy: f64) -> Ellipse {
        Ellipse {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image: RasterImage,
    pub mask: BinaryMask,
    pub pits: Vec<Ellipse>,
}

/// Renders scene `index` of the corpus identified by `seed`. Pure function of
/// its arguments.
pub fn synthesize_scene(seed: u64, index: u64, size: u32) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = size as f64;

    let sun = rng.random_range(0.0..2.0 * PI);
    let (sun_dx, sun_dy) = (sun.cos(), sun.sin());
    let n_pits = rng.random_range(1..=MAX_PITS);

    // (pit, shadow ellipse) pairs, placed without overlap
    let mut placed: Vec<(Ellipse, Ellipse)> = Vec::new();
    for _ in 0..n_pits {
        for _attempt in 0..64 {
            let a = rng.random_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1) * side;
            let b = rng.random_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1) * side;
            let theta = rng.random_range(0.0..PI);
            let offset = rng.random_range(SHADOW_OFFSET.0..SHADOW_OFFSET.1) * a.min(b);
            let reach = a.max(b) + offset + 2.0;
            if 2.0 * reach >= side {
                continue;
            }
            let cx = rng.random_range(reach..side - reach);
            let cy = rng.random_range(reach..side - reach);
            let clear = placed.iter().all(|(p, _)| {
                let other = p.a.max(p.b) + SHADOW_OFFSET.1 * p.a.min(p.b) + 3.0;
                ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() > reach + other
            });
            if !clear {
                continue;
            }
            let pit = Ellipse { cx, cy, a, b, theta };
            placed.push((pit, pit.shifted(sun_dx * offset, sun_dy * offset)));
            break;
        }
    }
    if placed.is_empty() {
        // guaranteed fallback: one centred pit
        let a = SEMI_AXIS_RANGE.0 * side;
        let pit = Ellipse {
            cx: side / 2.0,
            cy: side / 2.0,
            a,
            b: a,
            theta: 0.0,
        };
        placed.push((pit, pit.shifted(sun_dx * 0.4 * a, sun_dy * 0.4 * a)));
    }

    // low-frequency texture: a few random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(1.0..6.0) * 2.0 * PI / side;
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(2.0..5.0);
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));

    let mut image = RasterImage::new(size, size, 3);
    let mut mask = BinaryMask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_pit = placed.iter().any(|(p, _)| p.contains(px, py));
            let in_shadow = !in_pit && placed.iter().any(|(_, s)| s.contains(px, py));
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * px + ky * py + ph).sin())
                .sum();
            let base = if in_pit {
                PIT_RGB
            } else if in_shadow {
                SHADOW_RGB
            } else {
                BACKGROUND_RGB
            };
            let scale = if in_shadow { 0.3 } else { 1.0 };
            let pixel = image.pixel_mut(x, y);
            for (c, out) in pixel.iter_mut().enumerate() {
                let noise = rng.random_range(-9.0..9.0);
                let v = base[c] + scale * (texture + tint[c]) + noise;
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            if in_pit {
                mask.set(x, y, true);
            }
        }
    }
    SyntheticScene {
        image,
        mask,
        pits: placed.into_iter().map(|(p, _)| p).collect(),
    }
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth-{index:05}")
}

/// Writes `n` scenes under `out_dir/{images,masks}` and returns their
/// manifest. Splits follow the published 405:25:remainder proportions.
pub fn generate_synthetic_corpus(n: usize, seed: u64, size: u32, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs n >= 1".into()));
    }
    if size < 16 {
        return Err(Error::InvalidArgument("synthetic scenes need size >= 16".into()));
    }
    let (n_train, n_val) = reference_split_counts(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let id = synthetic_id(i);
        let scene = synthesize_scene(seed, i as u64, size);
        let pixel_rel = Path::new("images").join(format!("{id}.png"));
        let mask_rel = Path::new("masks").join(format!("{id}.png"));
        scene.image.save(&out_dir.join(&pixel_rel))?;
        encode_mask(&scene.mask, &out_dir.join(&mask_rel))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(ImageSample {
            id,
            width: size,
            height: size,
            channels: 3,
            pixel_path: pixel_rel,
            split,
            gt_mask_path: Some(mask_rel),
        });
    }
    Manifest::from_samples(samples, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(1, 7, 128, a.path()).unwrap();
        generate_synthetic_corpus(1, 7, 128, b.path()).unwrap();
        for sub in ["images/synth-00000.png", "masks/synth-00000.png"] {
            assert_eq!(
                std::fs::read(a.path().join(sub)).unwrap(),
                std::fs::read(b.path().join(sub)).unwrap()
            );
        }
    }

    #[test]
    fn fifty_samples_all_have_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(50, 1, 128, dir.path()).unwrap();
        assert_eq!(m.len(), 50);
        for s in m.samples() {
            assert!(m.load_gt(s).unwrap().has_foreground());
        }
    }

    #[test]
    fn foreground_fraction_stays_in_band() {
        // measured over 1000 seeds: observed range is well inside [0.005, 0.25]
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for seed in 0..1000 {
            let f = synthesize_scene(seed, 0, 128).mask.foreground_fraction();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        assert!(lo >= 0.005, "min fraction {lo}");
        assert!(hi <= 0.25, "max fraction {hi}");
    }

    #[test]
    fn shadows_are_excluded_from_ground_truth() {
        let scene = synthesize_scene(3, 0, 128);
        let mut shadow_pixels = 0;
        for y in 0..128 {
            for x in 0..128 {
                let p = scene.image.pixel(x, y);
                // shadow palette sits far below the pit's red channel
                if p.iter().all(|&v| v < 60) {
                    shadow_pixels += 1;
                    assert!(!scene.mask.get(x, y));
                }
            }
        }
        assert!(shadow_pixels > 0);
    }

    #[test]
    fn zero_samples_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(0, 1, 128, dir.path()).is_err());
    }
}
