use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::digest_u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Class list (index ↔ name) plus every sample and its split assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_split(&self) -> bool {
        self.samples.iter().all(|s| s.split.is_some())
    }

    /// Per-class sample counts, optionally restricted to one split.
    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            if split.is_none() || s.split == split {
                counts[s.class] += 1;
            }
        }
        counts
    }

    /// Counts that initialize the class-difficulty table: train split when
    /// the manifest is split, every sample otherwise.
    pub fn frequency_counts(&self) -> Vec<usize> {
        if self.is_split() {
            self.class_counts(Some(Split::Train))
        } else {
            self.class_counts(None)
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::data("manifest has no classes"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.class >= self.classes.len() {
                return Err(Error::data(format!(
                    "sample {i} (`{}`) has class {} but only {} classes exist",
                    s.path,
                    s.class,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        format!("{:016x}", digest_u64(&[&json]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed manifest {}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

fn is_decodable_image(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .ok()
        .filter(|r| r.format().is_some())
        .and_then(|r| r.into_dimensions().ok())
        .is_some()
}

/// Builds an unsplit manifest from `root/<class>/<image>`. Classes are sorted
/// lexicographically; undecodable files are skipped with a warning.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::data(format!("cannot read dataset root {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::data(format!("dataset root {} has no class folders", root.display())));
    }

    let mut classes = Vec::new();
    let mut samples = Vec::new();
    let mut empty = Vec::new();
    for dir in class_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class = classes.len();
        let mut files: Vec<_> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = samples.len();
        for f in files {
            if is_decodable_image(&f) {
                samples.push(SampleEntry {
                    path: f.to_string_lossy().into_owned(),
                    class,
                    split: None,
                });
            } else {
                log::warn!("skipping non-image file {}", f.display());
            }
        }
        if samples.len() == before {
            empty.push(name.clone());
        }
        classes.push(name);
    }
    if !empty.is_empty() {
        return Err(Error::data(format!("classes without images: {}", empty.join(", "))));
    }
    Ok(DatasetManifest {
        classes,
        samples,
        seed: None,
    })
}

/// `(train, val, test)` sizes for a class of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = (0.1 * n as f64).round() as usize;
    let test = tenth.max(5);
    let val = tenth.max(1);
    (n.saturating_sub(test + val), val, test)
}

/// Per-class seeded split: test gets `max(5, round(0.1 N))`, val
/// `max(1, round(0.1 N))`, train the remainder.
pub fn split_manifest(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    manifest.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let too_small: Vec<String> = (0..manifest.num_classes())
        .filter(|c| by_class.get(c).map_or(0, Vec::len) < 7)
        .map(|c| {
            format!(
                "{} ({} samples)",
                manifest.classes[c],
                by_class.get(&c).map_or(0, Vec::len)
            )
        })
        .collect();
    if !too_small.is_empty() {
        return Err(Error::data(format!(
            "classes need at least 7 samples to split: {}",
            too_small.join(", ")
        )));
    }

    let mut out = manifest.clone();
    for (class, mut idx) in by_class {
        idx.sort_by(|a, b| manifest.samples[*a].path.cmp(&manifest.samples[*b].path));
        let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(&[
            b"split",
            &seed.to_le_bytes(),
            &(class as u64).to_le_bytes(),
        ]));
        idx.shuffle(&mut rng);
        let (_, val, test) = split_sizes(idx.len());
        for (rank, i) in idx.into_iter().enumerate() {
            out.samples[i].split = Some(if rank < test {
                Split::Test
            } else if rank < test + val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    out.seed = Some(seed);
    Ok(out)
}
