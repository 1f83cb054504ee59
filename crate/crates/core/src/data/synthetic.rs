use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{split_manifest, DatasetManifest, SampleEntry};
use super::Image;
use crate::error::{Error, Result};
use crate::params::digest_u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub head: usize,
    pub tail: usize,
    pub image_size: usize,
    /// Cosine similarity between each tail-side class template and its
    /// head-side partner.
    pub similarity: f64,
    /// Per-pixel Gaussian noise added to every sample.
    pub noise: f64,
    /// Sinusoids summed per template channel.
    pub waves: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            head: 200,
            tail: 10,
            image_size: 32,
            similarity: 0.9,
            noise: 4.0,
            waves: 6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.tail < 7 || self.head <= self.tail {
            return Err(Error::config(format!(
                "synthetic counts need head > tail >= 7, got head {} tail {}",
                self.head, self.tail
            )));
        }
        if self.image_size < 2 {
            return Err(Error::config("synthetic image_size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::config("synthetic similarity must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.waves == 0 {
            return Err(Error::config("synthetic noise must be >= 0 and waves >= 1"));
        }
        Ok(())
    }
}

/// Counts decaying geometrically from `head` (class 0) to `tail` (class K-1).
pub fn geometric_counts(num_classes: usize, head: usize, tail: usize) -> Vec<usize> {
    if num_classes == 1 {
        return vec![head];
    }
    let ratio = tail as f64 / head as f64;
    (0..num_classes)
        .map(|c| (head as f64 * ratio.powf(c as f64 / (num_classes - 1) as f64)).round() as usize)
        .collect()
}

/// Confusable partner: class `c` pairs with `K-1-c`, so every tail-side
/// class resembles a head-side one.
pub fn partner_class(class: usize, num_classes: usize) -> usize {
    num_classes - 1 - class
}

fn seeded(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(digest_u64(parts))
}

fn standardize(img: &mut Image) {
    let n = img.len() as f64;
    let mean = img.iter().map(|v| f64::from(*v)).sum::<f64>() / n;
    img.mapv_inplace(|v| v - mean as f32);
    let rms = (img.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / n).sqrt();
    if rms > 0.0 {
        img.mapv_inplace(|v| v / rms as f32);
    }
}

fn base_texture(cfg: &SyntheticConfig, class: usize) -> Image {
    let mut rng = seeded(&[b"texture", &cfg.seed.to_le_bytes(), &(class as u64).to_le_bytes()]);
    let s = cfg.image_size;
    let mut img = Image::zeros((s, s, 3));
    for ch in 0..3 {
        for _ in 0..cfg.waves {
            let fy = rng.random_range(-6i32..=6) as f32;
            let fx = rng.random_range(1i32..=6) as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.5f32..1.0);
            let w = std::f32::consts::TAU / s as f32;
            for y in 0..s {
                for x in 0..s {
                    img[[y, x, ch]] += amp * (w * (fx * x as f32 + fy * y as f32) + phase).sin();
                }
            }
        }
    }
    standardize(&mut img);
    img
}

/// Zero-mean unit-RMS class templates. Tail-side classes mix in their
/// partner's texture so the pair has the configured similarity.
pub fn class_templates(cfg: &SyntheticConfig) -> Vec<Image> {
    let k = cfg.num_classes;
    let base: Vec<Image> = (0..k).map(|c| base_texture(cfg, c)).collect();
    let s = cfg.similarity as f32;
    (0..k)
        .map(|c| {
            let p = partner_class(c, k);
            if c < p || c == p {
                return base[c].clone();
            }
            // Remove the partner component before mixing so the cosine is exact.
            let n = base[c].len() as f32;
            let dot = (&base[c] * &base[p]).sum() / n;
            let mut own = &base[c] - &(&base[p] * dot);
            standardize(&mut own);
            let mut t = &base[p] * s + &own * (1.0 - s * s).sqrt();
            standardize(&mut t);
            t
        })
        .collect()
}

pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub templates: Arc<Vec<Image>>,
}

impl SyntheticDataset {
    /// Fresh noisy draw of `class` keyed by `tag`, independent of the stored samples.
    pub fn draw(&self, class: usize, tag: u64) -> Image {
        render(&self.config, &self.templates[class], class, b"draw", tag)
    }
}

fn render(cfg: &SyntheticConfig, template: &Image, class: usize, domain: &[u8], index: u64) -> Image {
    let mut rng = seeded(&[
        domain,
        &cfg.seed.to_le_bytes(),
        &(class as u64).to_le_bytes(),
        &index.to_le_bytes(),
    ]);
    if cfg.noise == 0.0 {
        return template.clone();
    }
    let normal = Normal::new(0.0f32, cfg.noise as f32).expect("validated noise");
    template.mapv(|t| t + normal.sample(&mut rng))
}

/// Procedural long-tailed dataset, already split with the config seed.
pub fn make_synthetic_longtail(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let counts = geometric_counts(cfg.num_classes, cfg.head, cfg.tail);
    let templates = class_templates(cfg);
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            samples.push(SampleEntry {
                path: format!("synthetic/class{c:03}/{i:04}"),
                class: c,
                split: None,
            });
            images.push(render(cfg, &templates[c], c, b"sample", i as u64));
        }
    }
    let manifest = DatasetManifest {
        classes: (0..cfg.num_classes).map(|c| format!("class{c:03}")).collect(),
        samples,
        seed: None,
    };
    let manifest = split_manifest(&manifest, cfg.seed)?;
    Ok(SyntheticDataset {
        config: cfg.clone(),
        manifest,
        images,
        templates: Arc::new(templates),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::expert::{encode, ExpertSpec, MaskMode, PrototypeExpert, TokenMask};

    #[test]
    fn counts_span_twenty_to_one() {
        let c = geometric_counts(10, 200, 10);
        assert_eq!(c[0], 200);
        assert_eq!(c[9], 10);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(c[0] / c[9], 20);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SyntheticConfig::default();
        let a = make_synthetic_longtail(&cfg).unwrap();
        let b = make_synthetic_longtail(&cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x == y));
        let c = make_synthetic_longtail(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn partner_similarity_is_as_configured() {
        let cfg = SyntheticConfig::default();
        let t = class_templates(&cfg);
        let n = t[0].len() as f32;
        let cos = |a: &Image, b: &Image| (a * b).sum() / n;
        assert!((cos(&t[9], &t[0]) - 0.9).abs() < 1e-4);
        assert!((cos(&t[5], &t[4]) - 0.9).abs() < 1e-4);
        assert!(cos(&t[1], &t[2]).abs() < 0.3);
        for img in &t {
            assert!((cos(img, img) - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn split_keeps_test_floor() {
        let d = make_synthetic_longtail(&SyntheticConfig::default()).unwrap();
        assert!(d.manifest.class_counts(Some(Split::Test)).iter().all(|&n| n >= 5));
        assert_eq!(d.images.len(), d.manifest.samples.len());
    }

    // Nearest-centroid probe fit on a tail-sized sample versus matching
    // against the clean templates, on the hardest confusable pair.
    #[test]
    fn confusable_pair_defeats_few_shot_probe_but_not_templates() {
        let cfg = SyntheticConfig::default();
        let d = make_synthetic_longtail(&cfg).unwrap();
        let (a, b) = (0usize, 9usize);
        let shots = 8;
        let centroid = |c: usize, off: u64| {
            let mut m = Image::zeros(d.templates[0].dim());
            for i in 0..shots {
                m = m + d.draw(c, off + i as u64);
            }
            m / shots as f32
        };
        let trials = 40;
        let (mut probe_ok, mut oracle_ok, mut total) = (0usize, 0usize, 0usize);
        for trial in 0..trials {
            let off = 1_000_000 + trial * 100;
            let (ma, mb) = (centroid(a, off), centroid(b, off + 50));
            for (c, other) in [(a, b), (b, a)] {
                for j in 0..10u64 {
                    let x = d.draw(c, 10 * off + j + c as u64 * 7);
                    let dist = |m: &Image| (&x - m).mapv(|v| v * v).sum();
                    let (mc, mo) = if c == a { (&ma, &mb) } else { (&mb, &ma) };
                    probe_ok += usize::from(dist(mc) < dist(mo));
                    oracle_ok +=
                        usize::from(dist(&d.templates[c]) < dist(&d.templates[other]));
                    total += 1;
                }
            }
        }
        let probe = probe_ok as f64 / total as f64;
        let oracle = oracle_ok as f64 / total as f64;
        assert!(probe < 0.8, "probe accuracy {probe}");
        assert!(oracle > 0.95, "oracle accuracy {oracle}");
    }

    #[test]
    fn oracle_expert_recovers_the_class() {
        let cfg = SyntheticConfig::default();
        let d = make_synthetic_longtail(&cfg).unwrap();
        let spec = ExpertSpec::new((8, 8), 16, MaskMode::Drop).unwrap();
        let e = PrototypeExpert::new(spec, d.templates.clone(), 1.0, 0.05).unwrap();
        let half = TokenMask::new(8, 8, (0..64).map(|t| t < 32).collect()).unwrap();
        let draws = 10_000u64;
        let mut hits = 0;
        for i in 0..draws {
            let c = (i % 10) as usize;
            let x = d.draw(c, 5_000_000 + i);
            let mask = (i % 2 == 0).then_some(&half);
            let emb = encode(&e, &x, mask).unwrap();
            let nearest = e
                .prototypes()
                .iter()
                .map(|p| p.iter().zip(&emb).map(|(a, b)| (a - b).powi(2)).sum::<f32>())
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap()
                .0;
            hits += usize::from(nearest == c);
        }
        let rate = hits as f64 / draws as f64;
        assert!(rate > 0.99, "recovery {rate}");
    }
}
