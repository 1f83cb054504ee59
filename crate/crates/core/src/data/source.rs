use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use super::preprocess::{load_rgb, preprocess, Mode, PreprocessSpec};
use super::synthetic::SyntheticDataset;
use super::Image;
use crate::error::{Error, Result};
use crate::params::digest_u64;

enum Storage {
    Memory(Arc<Vec<Image>>),
    Folder { root: Option<PathBuf>, spec: PreprocessSpec },
}

/// Sample source behind a manifest. Folder datasets decode and preprocess on
/// demand; each train-mode draw uses an rng keyed by (seed, epoch, index) so
/// results do not depend on loading order.
pub struct Dataset {
    manifest: DatasetManifest,
    storage: Storage,
    seed: u64,
}

impl Dataset {
    pub fn in_memory(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        manifest.validate()?;
        if images.len() != manifest.samples.len() {
            return Err(Error::data(format!(
                "{} images for {} manifest samples",
                images.len(),
                manifest.samples.len()
            )));
        }
        Ok(Self {
            manifest,
            storage: Storage::Memory(Arc::new(images)),
            seed: 0,
        })
    }

    pub fn from_synthetic(data: &SyntheticDataset) -> Self {
        Self {
            manifest: data.manifest.clone(),
            storage: Storage::Memory(Arc::new(data.images.clone())),
            seed: data.config.seed,
        }
    }

    /// Relative sample paths are resolved against `root` when given.
    pub fn folder(manifest: DatasetManifest, root: Option<&Path>, spec: PreprocessSpec, seed: u64) -> Result<Self> {
        manifest.validate()?;
        spec.validate()?;
        Ok(Self {
            manifest,
            storage: Storage::Folder {
                root: root.map(Path::to_path_buf),
                spec,
            },
            seed,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    pub fn label(&self, index: usize) -> usize {
        self.manifest.samples[index].class
    }

    pub fn load(&self, index: usize, mode: Mode, epoch: u64) -> Result<Image> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        match &self.storage {
            Storage::Memory(images) => Ok(images[index].clone()),
            Storage::Folder { root, spec } => {
                let p = Path::new(&entry.path);
                let path = match root {
                    Some(r) if p.is_relative() => r.join(p),
                    _ => p.to_path_buf(),
                };
                let img = load_rgb(&path)?;
                let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(&[
                    b"sample",
                    &self.seed.to_le_bytes(),
                    &epoch.to_le_bytes(),
                    &(index as u64).to_le_bytes(),
                ]));
                preprocess(&img, spec, mode, &mut rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scan_dataset, split_manifest};

    fn write_folder(dir: &Path) {
        for c in ["a", "b"] {
            std::fs::create_dir(dir.join(c)).unwrap();
            for i in 0..8u8 {
                image::RgbImage::from_fn(40, 30, |x, y| image::Rgb([(x as u8).wrapping_mul(i), y as u8, i]))
                    .save(dir.join(c).join(format!("{i}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn folder_samples_are_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(dir.path());
        let m = split_manifest(&scan_dataset(dir.path()).unwrap(), 1).unwrap();
        let spec = PreprocessSpec {
            resize: 24,
            crop: 16,
            ..Default::default()
        };
        let ds = Dataset::folder(m, None, spec, 7).unwrap();
        let a = ds.load(3, Mode::Train, 2).unwrap();
        let _ = ds.load(5, Mode::Train, 2).unwrap();
        assert_eq!(a, ds.load(3, Mode::Train, 2).unwrap());
        assert_eq!(a.dim(), (16, 16, 3));
        assert_eq!(ds.load(4, Mode::Eval, 0).unwrap(), ds.load(4, Mode::Eval, 9).unwrap());
    }

    #[test]
    fn in_memory_rejects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(dir.path());
        let m = scan_dataset(dir.path()).unwrap();
        assert!(Dataset::in_memory(m, vec![]).is_err());
    }
}
