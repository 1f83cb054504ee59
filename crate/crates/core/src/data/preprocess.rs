use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Shorter side after resizing.
    pub resize: u32,
    pub crop: u32,
    pub flip_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f32; 2],
    pub sharpness_p: f64,
    pub sharpness: [f32; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resize: 510,
            crop: 384,
            flip_p: 0.5,
            blur_p: 0.2,
            blur_sigma: [0.1, 2.0],
            sharpness_p: 0.2,
            sharpness: [0.5, 1.5],
            mean: CLIP_MEAN,
            std: CLIP_STD,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config(format!(
                "crop {} must be in 1..={} (the resize side)",
                self.crop, self.resize
            )));
        }
        for (name, p) in [("flip_p", self.flip_p), ("blur_p", self.blur_p), ("sharpness_p", self.sharpness_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn resize_shorter_side(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (side, ((h as f64) * side as f64 / w as f64).round() as u32)
    } else {
        (((w as f64) * side as f64 / h as f64).round() as u32, side)
    };
    if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    }
}

/// Blend of the image with its 3x3-smoothed copy; `factor` 1 is identity,
/// 0 fully smoothed, above 1 sharpened. Border pixels are left untouched.
fn adjust_sharpness(img: &RgbImage, factor: f32) -> RgbImage {
    const K: [[f32; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (w, h) = img.dimensions();
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut smooth = [0.0f32; 3];
            for (dy, row) in K.iter().enumerate() {
                for (dx, k) in row.iter().enumerate() {
                    let p = img.get_pixel(x + dx as u32 - 1, y + dy as u32 - 1);
                    for ch in 0..3 {
                        smooth[ch] += k * f32::from(p[ch]) / 13.0;
                    }
                }
            }
            let orig = img.get_pixel(x, y);
            let px = std::array::from_fn(|ch| {
                let v = smooth[ch] + factor * (f32::from(orig[ch]) - smooth[ch]);
                v.round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

/// Resize, crop and (in train mode) augment; returns 8-bit RGB before
/// normalization.
pub fn augment_and_crop<R: Rng>(img: &RgbImage, spec: &PreprocessSpec, mode: Mode, rng: &mut R) -> RgbImage {
    let resized = resize_shorter_side(img, spec.resize);
    let (w, h) = resized.dimensions();
    let c = spec.crop;
    let (x0, y0) = match mode {
        Mode::Eval => ((w - c) / 2, (h - c) / 2),
        Mode::Train => (rng.random_range(0..=w - c), rng.random_range(0..=h - c)),
    };
    let mut out = imageops::crop_imm(&resized, x0, y0, c, c).to_image();
    if mode == Mode::Train {
        if rng.random_bool(spec.flip_p) {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if rng.random_bool(spec.blur_p) {
            let sigma = rng.random_range(spec.blur_sigma[0]..=spec.blur_sigma[1]);
            out = imageops::blur(&out, sigma);
        }
        if rng.random_bool(spec.sharpness_p) {
            let f = rng.random_range(spec.sharpness[0]..=spec.sharpness[1]);
            out = adjust_sharpness(&out, f);
        }
    }
    out
}

pub fn normalize(img: &RgbImage, spec: &PreprocessSpec) -> Image {
    let (w, h) = img.dimensions();
    Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, ch)| {
        let v = f32::from(img.get_pixel(x as u32, y as u32)[ch]) / 255.0;
        (v - spec.mean[ch]) / spec.std[ch]
    })
}

/// Full pipeline: resize shorter side, crop (center in eval, random in train),
/// train-time augmentation, per-channel normalization.
pub fn preprocess<R: Rng>(img: &RgbImage, spec: &PreprocessSpec, mode: Mode, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    Ok(normalize(&augment_and_crop(img, spec, mode, rng), spec))
}

/// Deterministic eval-mode pipeline (resize, center crop, normalize).
pub fn preprocess_eval(img: &RgbImage, spec: &PreprocessSpec) -> Result<Image> {
    // Eval mode draws no random numbers.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    preprocess(img, spec, Mode::Eval, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 3) % 256) as u8]))
    }

    #[test]
    fn eval_crop_is_central_region_of_resize() {
        let img = gradient_image(1020, 1020);
        let spec = PreprocessSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_and_crop(&img, &spec, Mode::Eval, &mut rng);
        assert_eq!(out.dimensions(), (384, 384));
        let resized = imageops::resize(&img, 510, 510, FilterType::Triangle);
        let off = (510 - 384) / 2;
        for (x, y) in [(0, 0), (383, 383), (100, 7), (250, 300)] {
            assert_eq!(out.get_pixel(x, y), resized.get_pixel(x + off, y + off));
        }
    }

    #[test]
    fn non_square_keeps_aspect() {
        let img = gradient_image(200, 100);
        let r = resize_shorter_side(&img, 50);
        assert_eq!(r.dimensions(), (100, 50));
    }

    #[test]
    fn eval_is_deterministic() {
        let img = gradient_image(600, 520);
        let spec = PreprocessSpec::default();
        let a = preprocess(&img, &spec, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = preprocess(&img, &spec, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (384, 384, 3));
    }

    #[test]
    fn forced_flip_mirrors_the_eval_crop() {
        let img = gradient_image(64, 64);
        let spec = PreprocessSpec {
            resize: 64,
            crop: 64,
            flip_p: 1.0,
            blur_p: 0.0,
            sharpness_p: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let train = augment_and_crop(&img, &spec, Mode::Train, &mut rng);
        let mut eval = augment_and_crop(&img, &spec, Mode::Eval, &mut rng);
        imageops::flip_horizontal_in_place(&mut eval);
        assert_eq!(train, eval);
    }

    #[test]
    fn sharpness_one_is_identity() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([if (x + y) % 2 == 0 { 200 } else { 20 }, 0, (x * y) as u8]));
        assert_eq!(adjust_sharpness(&img, 1.0), img);
        assert_ne!(adjust_sharpness(&img, 0.0), img);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let spec = PreprocessSpec {
            crop: 600,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = PreprocessSpec {
            blur_p: 1.5,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn corrupt_file_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.jpg");
        std::fs::write(&p, b"\xff\xd8garbage").unwrap();
        match load_rgb(&p) {
            Err(Error::Decode { path, .. }) => assert_eq!(path, p),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
