//! Local backbone contract: any classifier that exposes four multi-scale
//! feature taps alongside its logits can be calibrated.

mod cnn;
mod vit;

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::params::ParamStore;

pub use cnn::TinyCnn;
pub use vit::TinyVit;

pub const NUM_STAGES: usize = 4;

/// Batched backbone output: four stage maps `(B, C_l, H_l, W_l)` and logits `(B, K)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    stages: Vec<Tensor>,
    logits: Tensor,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>, logits: Tensor) -> Result<Self> {
        if stages.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "a feature pyramid needs exactly {NUM_STAGES} stages, got {}",
                stages.len()
            )));
        }
        let (batch, k) = logits.dims2()?;
        if k < 2 {
            return Err(Error::config(format!("backbone must emit K >= 2 logits, got {k}")));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (l, stage) in stages.iter().enumerate() {
            let (b, _, h, w) = stage.dims4().map_err(|_| {
                Error::config(format!("stage {} is not a (B, C, H, W) map: {:?}", l + 1, stage.dims()))
            })?;
            if b != batch {
                return Err(Error::config(format!(
                    "stage {} has batch {b} but logits have batch {batch}",
                    l + 1
                )));
            }
            if let Some((ph, pw)) = prev {
                if h > ph || w > pw {
                    return Err(Error::config(format!(
                        "stage {} resolution {h}x{w} exceeds stage {} resolution {ph}x{pw}",
                        l + 1,
                        l
                    )));
                }
            }
            prev = Some((h, w));
        }
        Ok(Self { stages, logits })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn stage(&self, l: usize) -> &Tensor {
        &self.stages[l]
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.logits.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.logits.dims()[1]
    }

    /// `(C, H, W)` of every stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.stages
            .iter()
            .map(|s| {
                let d = s.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }
}

pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// Square input side the adapter expects.
    fn input_size(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Human-readable description of the layers feeding stages 1-4.
    fn stage_taps(&self) -> [String; NUM_STAGES];

    /// `images` is `(B, 3, H, W)`.
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid>;

    /// Runs the network from stage `stage` (0-based) onwards, returning logits.
    fn logits_from_stage(&self, stage: usize, features: &Tensor) -> Result<Tensor>;
}

/// Validating wrapper around [`Backbone::forward`].
pub fn backbone_forward(images: &Tensor, adapter: &dyn Backbone) -> Result<FeaturePyramid> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::config(format!(
            "backbone `{}` expects (B, 3, H, W) images, got {dims:?}",
            adapter.name()
        )));
    }
    let side = adapter.input_size();
    if dims[2] != side || dims[3] != side {
        return Err(Error::config(format!(
            "backbone `{}` expects {side}x{side} inputs, got {}x{} (stage 1 would be misaligned)",
            adapter.name(),
            dims[2],
            dims[3]
        )));
    }
    let pyramid = adapter.forward(images)?;
    if pyramid.num_classes() != adapter.num_classes() {
        return Err(Error::config(format!(
            "backbone `{}` declared {} classes but emitted {}",
            adapter.name(),
            adapter.num_classes(),
            pyramid.num_classes()
        )));
    }
    Ok(pyramid)
}

/// Argmax class of a logit vector, smallest index on ties.
pub fn pseudo_label(logits: &[f64]) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("pseudo-label requires finite logits"));
    }
    argmax(logits).ok_or_else(|| Error::invalid("pseudo-label of an empty logit vector"))
}

/// Row-wise [`pseudo_label`] over a `(B, K)` tensor.
pub fn pseudo_labels(logits: &Tensor) -> Result<Vec<usize>> {
    crate::nn::rows_f64(logits)?
        .iter()
        .map(|row| pseudo_label(row))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub name: String,
    pub input_size: usize,
    /// Base channel count (CNN) or embedding width (ViT).
    pub width: usize,
    /// Transformer depth; taps are spread evenly over the blocks.
    pub depth: usize,
    pub patch: usize,
    pub heads: usize,
    /// Zero-initialize the classifier head.
    pub zero_head: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "tiny-cnn".into(),
            input_size: 384,
            width: 8,
            depth: 4,
            patch: 16,
            heads: 2,
            zero_head: false,
        }
    }
}

pub type BackboneFactory =
    fn(&BackboneConfig, usize, &mut ParamStore) -> Result<Box<dyn Backbone>>;

/// Name → constructor map, selected through `backbone.name`.
pub struct BackboneRegistry {
    factories: BTreeMap<String, BackboneFactory>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: BackboneFactory) -> Result<()> {
        if self.factories.contains_key(name) {
            return Err(Error::config(format!("backbone `{name}` is already registered")));
        }
        self.factories.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        cfg: &BackboneConfig,
        num_classes: usize,
        store: &mut ParamStore,
    ) -> Result<Box<dyn Backbone>> {
        let factory = self.factories.get(&cfg.name).ok_or_else(|| {
            Error::config(format!(
                "unknown backbone `{}`; registered: {}",
                cfg.name,
                self.names().join(", ")
            ))
        })?;
        factory(cfg, num_classes, store)
    }
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("tiny-cnn", |cfg, k, store| {
            Ok(Box::new(TinyCnn::new(cfg, k, store)?) as Box<dyn Backbone>)
        })
        .expect("fresh registry");
        r.register("tiny-vit", |cfg, k, store| {
            Ok(Box::new(TinyVit::new(cfg, k, store)?) as Box<dyn Backbone>)
        })
        .expect("fresh registry");
        r
    }
}
