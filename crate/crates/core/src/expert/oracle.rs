use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{patches, ExpertAdapter, ExpertSpec, TokenMask};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::digest_u64;
use crate::nn::argmax;

/// Class-prototype expert for synthetic experiments.
///
/// It matches the visible patches of an image against clean per-class
/// templates and answers with the winning class prototype plus bounded
/// Gaussian noise. Prototypes are scaled one-hot vectors, so any two sit
/// exactly `separation` apart. Masked patches are excluded from matching in
/// both mask modes.
pub struct PrototypeExpert {
    spec: ExpertSpec,
    templates: Arc<Vec<Image>>,
    template_patches: Vec<Vec<Vec<f32>>>,
    prototypes: Vec<Vec<f32>>,
    noise: f64,
}

impl PrototypeExpert {
    pub fn new(
        spec: ExpertSpec,
        templates: Arc<Vec<Image>>,
        separation: f64,
        noise: f64,
    ) -> Result<Self> {
        let k = templates.len();
        if k < 2 {
            return Err(Error::config("oracle expert needs at least two class templates"));
        }
        if spec.embed_dim < k {
            return Err(Error::config(format!(
                "oracle expert embed_dim {} cannot hold {k} orthogonal prototypes",
                spec.embed_dim
            )));
        }
        if !(noise >= 0.0 && noise.is_finite()) || separation <= 0.0 {
            return Err(Error::config("oracle noise must be >= 0 and separation > 0"));
        }
        let mut template_patches = Vec::with_capacity(k);
        for t in templates.iter() {
            spec.patch_size(t)?;
            if t.dim() != templates[0].dim() {
                return Err(Error::config("oracle templates differ in shape"));
            }
            template_patches.push(patches(t, spec.token_grid));
        }
        let scale = (separation / std::f64::consts::SQRT_2) as f32;
        let prototypes = (0..k)
            .map(|c| {
                let mut p = vec![0.0f32; spec.embed_dim];
                p[c] = scale;
                p
            })
            .collect();
        Ok(Self {
            spec,
            templates,
            template_patches,
            prototypes,
            noise,
        })
    }

    pub fn prototypes(&self) -> &[Vec<f32>] {
        &self.prototypes
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Template class whose visible patches are closest in squared distance.
    pub fn match_class(&self, image: &Image, mask: Option<&TokenMask>) -> Result<usize> {
        self.spec.patch_size(image)?;
        if image.dim() != self.templates[0].dim() {
            return Err(Error::invalid(format!(
                "oracle expert expects {:?} images, got {:?}",
                self.templates[0].dim(),
                image.dim()
            )));
        }
        let image_patches = patches(image, self.spec.token_grid);
        let neg_dist: Vec<f64> = self
            .template_patches
            .iter()
            .map(|tp| {
                let d: f64 = image_patches
                    .iter()
                    .zip(tp)
                    .enumerate()
                    .filter(|(t, _)| mask.is_none_or(|m| m.as_slice()[*t]))
                    .map(|(_, (a, b))| {
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| f64::from(x - y).powi(2))
                            .sum::<f64>()
                    })
                    .sum();
                -d
            })
            .collect();
        Ok(argmax(&neg_dist).expect("at least two templates"))
    }
}

impl ExpertAdapter for PrototypeExpert {
    fn name(&self) -> &str {
        "oracle"
    }

    fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    fn encode(&self, image: &Image, mask: Option<&TokenMask>) -> Result<Vec<f32>> {
        if let Some(m) = mask {
            self.spec.check_mask(m)?;
        }
        let class = self.match_class(image, mask)?;
        // An all-ones mask must hash like no mask.
        let effective = mask.filter(|m| !m.is_all_ones());
        let img_bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mask_bytes: Vec<u8> = effective
            .map(|m| m.as_slice().iter().map(|&b| u8::from(b)).collect())
            .unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(&[b"oracle", &img_bytes, &mask_bytes]));
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::State(e.to_string()))?;
        let bound = 3.0 * self.noise;
        Ok(self.prototypes[class]
            .iter()
            .map(|&p| {
                let n: f64 = if self.noise == 0.0 {
                    0.0
                } else {
                    normal.sample(&mut rng).clamp(-bound, bound)
                };
                p + n as f32
            })
            .collect())
    }

    fn parameter_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.templates.iter() {
            bytes.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        for p in &self.prototypes {
            bytes.extend(p.iter().flat_map(|v| v.to_le_bytes()));
        }
        bytes.extend(self.noise.to_le_bytes());
        format!("{:016x}", digest_u64(&[b"oracle", &bytes]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{encode, MaskMode};

    fn templates() -> Arc<Vec<Image>> {
        Arc::new(
            (0..3)
                .map(|c| Image::from_shape_fn((8, 8, 3), |(r, col, ch)| ((r * 3 + col * 5 + ch + c * 7) % 11) as f32 / 11.0))
                .collect(),
        )
    }

    #[test]
    fn clean_template_maps_to_its_prototype() {
        let spec = ExpertSpec::new((4, 4), 8, MaskMode::Drop).unwrap();
        let e = PrototypeExpert::new(spec, templates(), 1.0, 0.0).unwrap();
        for c in 0..3 {
            let emb = encode(&e, &e.templates[c].clone(), None).unwrap();
            assert_eq!(emb, e.prototypes()[c]);
        }
        let d: f32 = e.prototypes()[0]
            .iter()
            .zip(&e.prototypes()[1])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f32>()
            .sqrt();
        assert!((d - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let spec = ExpertSpec::new((4, 4), 8, MaskMode::Drop).unwrap();
        let e = PrototypeExpert::new(spec, templates(), 1.0, 0.05).unwrap();
        let img = e.templates[1].clone();
        let a = encode(&e, &img, None).unwrap();
        assert_eq!(a, encode(&e, &img, Some(&TokenMask::all_ones(4, 4))).unwrap());
        for (x, p) in a.iter().zip(&e.prototypes()[1]) {
            assert!((x - p).abs() <= 0.15 + 1e-6);
        }
    }

    #[test]
    fn rejects_too_narrow_embedding() {
        let spec = ExpertSpec::new((4, 4), 2, MaskMode::Drop).unwrap();
        assert!(PrototypeExpert::new(spec, templates(), 1.0, 0.05).is_err());
    }
}
