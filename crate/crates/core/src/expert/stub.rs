use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{patches, ExpertAdapter, ExpertSpec, MaskMode, TokenMask};
use crate::data::Image;
use crate::error::Result;
use crate::params::digest_u64;

/// Deterministic test expert: every patch maps to a pseudo-random vector in
/// `[-1, 1]^D` seeded by the patch's bytes; the embedding is the mean over
/// the tokens that enter the encoder.
pub struct HashExpert {
    spec: ExpertSpec,
}

impl HashExpert {
    pub fn new(spec: ExpertSpec) -> Self {
        Self { spec }
    }

    /// Hash vector of one patch's pixels.
    pub fn patch_vector(pixels: &[f32], dim: usize) -> Vec<f64> {
        let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(&[b"patch", &bytes]));
        (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

impl ExpertAdapter for HashExpert {
    fn name(&self) -> &str {
        "stub"
    }

    fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    fn encode(&self, image: &Image, mask: Option<&TokenMask>) -> Result<Vec<f32>> {
        self.spec.patch_size(image)?;
        if let Some(m) = mask {
            self.spec.check_mask(m)?;
        }
        let dim = self.spec.embed_dim;
        let mut acc = vec![0.0f64; dim];
        let mut count = 0usize;
        for (t, mut patch) in patches(image, self.spec.token_grid).into_iter().enumerate() {
            let kept = mask.is_none_or(|m| m.as_slice()[t]);
            match (kept, self.spec.mask_mode) {
                (true, _) => {}
                (false, MaskMode::Drop) => continue,
                (false, MaskMode::Zero) => patch.iter_mut().for_each(|p| *p = 0.0),
            }
            for (a, v) in acc.iter_mut().zip(Self::patch_vector(&patch, dim)) {
                *a += v;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
    }

    fn parameter_checksum(&self) -> String {
        format!("stub-{}", self.spec.embed_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::encode;
    use ndarray::Array3;

    fn test_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((side, side, 3), |_| rng.random_range(-1.0f32..1.0))
    }

    fn stub(grid: usize, mode: MaskMode) -> HashExpert {
        HashExpert::new(ExpertSpec::new((grid, grid), 64, mode).unwrap())
    }

    #[test]
    fn unmasked_embedding_is_mean_of_patch_hashes() {
        let e = stub(16, MaskMode::Drop);
        let img = test_image(32, 1);
        let got = encode(&e, &img, None).unwrap();

        // Independent loop: slice each 2x2 patch by hand.
        let mut want = [0.0f64; 64];
        for gr in 0..16 {
            for gc in 0..16 {
                let mut px = Vec::new();
                for r in 0..2 {
                    for c in 0..2 {
                        for ch in 0..3 {
                            px.push(img[[gr * 2 + r, gc * 2 + c, ch]]);
                        }
                    }
                }
                for (w, v) in want.iter_mut().zip(HashExpert::patch_vector(&px, 64)) {
                    *w += v / 256.0;
                }
            }
        }
        for (g, w) in got.iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn all_ones_mask_matches_no_mask() {
        for mode in [MaskMode::Drop, MaskMode::Zero] {
            let e = stub(4, mode);
            let img = test_image(16, 2);
            let ones = TokenMask::all_ones(4, 4);
            assert_eq!(encode(&e, &img, None).unwrap(), encode(&e, &img, Some(&ones)).unwrap());
        }
    }

    #[test]
    fn single_kept_patch_gives_that_patch_vector() {
        let e = HashExpert::new(ExpertSpec::new((2, 2), 64, MaskMode::Drop).unwrap());
        let img = test_image(4, 3);
        let mask = TokenMask::from_rows(&[vec![0, 0], vec![0, 1]]).unwrap();
        let got = encode(&e, &img, Some(&mask)).unwrap();
        let px: Vec<f32> = img
            .slice(ndarray::s![2..4, 2..4, ..])
            .iter()
            .copied()
            .collect();
        let want = HashExpert::patch_vector(&px, 64);
        for (g, w) in got.iter().zip(want) {
            assert_eq!(*g, w as f32);
        }
    }

    #[test]
    fn disjoint_masks_give_different_embeddings() {
        let e = stub(2, MaskMode::Drop);
        let img = test_image(8, 4);
        let a = TokenMask::from_rows(&[vec![1, 1], vec![0, 0]]).unwrap();
        let b = TokenMask::from_rows(&[vec![0, 0], vec![1, 1]]).unwrap();
        assert_ne!(encode(&e, &img, Some(&a)).unwrap(), encode(&e, &img, Some(&b)).unwrap());
    }

    #[test]
    fn identical_patches_make_the_kept_set_irrelevant() {
        let e = stub(2, MaskMode::Drop);
        let img = Image::from_elem((8, 8, 3), 0.25);
        let a = TokenMask::from_rows(&[vec![1, 0], vec![0, 0]]).unwrap();
        let b = TokenMask::from_rows(&[vec![0, 0], vec![1, 1]]).unwrap();
        assert_eq!(encode(&e, &img, Some(&a)).unwrap(), encode(&e, &img, Some(&b)).unwrap());
    }

    #[test]
    fn zero_mode_differs_from_drop_mode() {
        let img = test_image(8, 5);
        let m = TokenMask::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let drop = encode(&stub(2, MaskMode::Drop), &img, Some(&m)).unwrap();
        let zero = encode(&stub(2, MaskMode::Zero), &img, Some(&m)).unwrap();
        assert_ne!(drop, zero);
    }

    #[test]
    fn encode_is_pure() {
        let e = stub(4, MaskMode::Drop);
        let img = test_image(16, 6);
        let m = TokenMask::new(4, 4, (0..16).map(|i| i % 3 == 0).collect()).unwrap();
        let first = encode(&e, &img, Some(&m)).unwrap();
        for _ in 0..1000 {
            assert_eq!(encode(&e, &img, Some(&m)).unwrap(), first);
        }
    }
}
