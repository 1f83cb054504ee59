use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};

use super::model::Model;
use crate::backbone::NUM_STAGES;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::lpkem::{bilinear_resize, compute_masks};

fn unit_range(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    move |v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }
}

/// Writes `<id>_stage<l>_{heat,mask,overlay}.png` for every image and stage
/// and returns the written paths.
pub fn cam_dump(model: &Model, items: &[(String, Image)], grid: (usize, usize), out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (id, image) in items {
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(Error::invalid(format!("image id `{id}` is not a plain file stem")));
        }
        let heat = model.heatmaps(std::slice::from_ref(image))?.remove(0);
        let masks = compute_masks(&heat, grid)?;
        let (h, w, _) = image.dim();
        let (gh, gw) = grid;
        let gray = image.map_axis(ndarray::Axis(2), |px| px.iter().map(|v| f64::from(*v)).sum::<f64>() / 3.0);
        let base = unit_range(gray.iter().copied());
        for l in 0..NUM_STAGES {
            let up = bilinear_resize(&heat.maps[l], (h, w));
            let scale = unit_range(up.iter().copied());
            let heat_img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([(255.0 * scale(up[[y as usize, x as usize]])).round() as u8])
            });
            let mask = &masks.masks[l];
            let kept = |x: u32, y: u32| mask.get(y as usize * gh / h, x as usize * gw / w);
            let mask_img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if kept(x, y) { 255 } else { 0 }]));
            let overlay = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let g = (200.0 * base(gray[[y as usize, x as usize]])).round() as u8;
                if kept(x, y) {
                    Rgb([g.saturating_add(55), g / 2, g / 2])
                } else {
                    Rgb([g / 3, g / 3, g / 3])
                }
            });
            let outputs: [(&str, DynamicImage); 3] = [
                ("heat", heat_img.into()),
                ("mask", mask_img.into()),
                ("overlay", overlay.into()),
            ];
            for (kind, img) in outputs {
                let path = out_dir.join(format!("{id}_stage{}_{kind}.png", l + 1));
                img.save(&path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
