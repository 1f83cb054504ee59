use std::fmt;
use std::sync::Arc;

use candle_core::{DType, Tensor, Var};

use super::config::{Ablation, RunConfig};
use crate::backbone::{backbone_forward, pseudo_labels, Backbone, BackboneRegistry};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::expert::{ExpertAdapter, ExpertContext, ExpertRegistry};
use crate::loss::{total_loss, ExpertTerms, TotalLoss};
use crate::lpkem::{
    compute_heatmaps, compute_masks, extract_expert_features, features_to_tensor, FusionHead, HeatmapPyramid,
    TokenMaskSet,
};
use crate::params::ParamStore;
use crate::udcm::{FrequencyStats, Udcm, UdcmConfig};

pub struct ExpertBranch {
    pub z_e: Tensor,
    pub z_hat: Tensor,
    /// Per-sample fusion weight `(B,)`.
    pub lambda: Tensor,
    pub masks: Option<Vec<TokenMaskSet>>,
}

pub struct ModelOutput {
    pub z_b: Tensor,
    pub pseudo_labels: Vec<usize>,
    pub expert: Option<ExpertBranch>,
}

impl ModelOutput {
    /// Calibrated logits when the expert branch is active, backbone logits otherwise.
    pub fn decision_logits(&self) -> &Tensor {
        self.expert.as_ref().map_or(&self.z_b, |e| &e.z_hat)
    }

    pub fn predictions(&self) -> Result<Vec<usize>> {
        pseudo_labels(self.decision_logits())
    }

    pub fn lambdas(&self) -> Result<Option<Vec<f64>>> {
        self.expert
            .as_ref()
            .map(|e| Ok(e.lambda.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .transpose()
    }

    pub fn loss(&self, labels: &[usize]) -> Result<TotalLoss> {
        let terms = self.expert.as_ref().map(|e| ExpertTerms {
            z_e: &e.z_e,
            z_hat: &e.z_hat,
            lambda: &e.lambda,
        });
        total_loss(&self.z_b, terms, labels)
    }
}

/// Trainable parameter counts grouped by component.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParameterSummary {
    pub backbone_name: String,
    pub expert_name: Option<String>,
    pub num_classes: usize,
    pub backbone: usize,
    pub fusion: usize,
    pub class_difficulty: usize,
    pub bin_head: usize,
}

impl ParameterSummary {
    /// Parameters added on top of the backbone.
    pub fn added(&self) -> usize {
        self.fusion + self.class_difficulty + self.bin_head
    }

    pub fn total(&self) -> usize {
        self.backbone + self.added()
    }
}

impl fmt::Display for ParameterSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(f, "backbone ({}): {} ({:.4}M)", self.backbone_name, self.backbone, m(self.backbone))?;
        writeln!(
            f,
            "expert: {} (frozen, not counted)",
            self.expert_name.as_deref().unwrap_or("disabled")
        )?;
        writeln!(f, "fusion head: {}", self.fusion)?;
        writeln!(f, "class difficulty table: {}", self.class_difficulty)?;
        writeln!(f, "bin head: {}", self.bin_head)?;
        writeln!(f, "added trainable: {} ({:.4}M)", self.added(), m(self.added()))?;
        write!(f, "total trainable: {} ({:.4}M)", self.total(), m(self.total()))
    }
}

/// Backbone plus the optional expert branch, built from a run config.
pub struct Model {
    store: ParamStore,
    backbone: Box<dyn Backbone>,
    expert: Option<Arc<dyn ExpertAdapter>>,
    fusion: Option<FusionHead>,
    udcm: Option<Udcm>,
    ablation: Ablation,
    grid: (usize, usize),
    train_counts: Vec<usize>,
}

impl Model {
    pub fn build(
        cfg: &RunConfig,
        train_counts: &[usize],
        ctx: &ExpertContext,
        backbones: &BackboneRegistry,
        experts: &ExpertRegistry,
    ) -> Result<Self> {
        cfg.ablation.validate()?;
        let k = train_counts.len();
        let mut store = ParamStore::new(cfg.seed, DType::F32);
        let backbone = backbones.build(&cfg.backbone, k, &mut store)?;
        let (expert, fusion, udcm) = if cfg.ablation.use_expert {
            let expert = experts.build(&cfg.expert, ctx)?;
            let hidden = (cfg.fusion.hidden > 0).then_some(cfg.fusion.hidden);
            let fusion = FusionHead::new(&mut store, cfg.expert.embed_dim, k, hidden, cfg.fusion.zero_final)?;
            let stats = FrequencyStats::new(train_counts.to_vec(), cfg.udcm.beta)?;
            let ucfg = UdcmConfig {
                mode: cfg.effective_mode(),
                ..cfg.udcm.clone()
            };
            let udcm = Udcm::new(&mut store, &ucfg, &stats)?;
            (Some(expert), Some(fusion), Some(udcm))
        } else {
            (None, None, None)
        };
        Ok(Self {
            store,
            backbone,
            expert,
            fusion,
            udcm,
            ablation: cfg.ablation,
            grid: (cfg.expert.grid[0], cfg.expert.grid[1]),
            train_counts: train_counts.to_vec(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn expert(&self) -> Option<&Arc<dyn ExpertAdapter>> {
        self.expert.as_ref()
    }

    pub fn udcm(&self) -> Option<&Udcm> {
        self.udcm.as_ref()
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn num_classes(&self) -> usize {
        self.train_counts.len()
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    /// Every trainable variable. The expert lives outside the store, so it
    /// can never receive an update.
    pub fn trainable(&self) -> Vec<Var> {
        self.store.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn parameter_summary(&self) -> ParameterSummary {
        ParameterSummary {
            backbone_name: self.backbone.name().to_string(),
            expert_name: self.expert.as_ref().map(|e| e.name().to_string()),
            num_classes: self.num_classes(),
            backbone: self.store.num_elements("backbone."),
            fusion: self.store.num_elements("fusion."),
            class_difficulty: self.store.num_elements("udcm.w_cls"),
            bin_head: self.store.num_elements("udcm.") - self.store.num_elements("udcm.w_cls"),
        }
    }

    /// Stacks `(H, W, 3)` images into a `(B, 3, H, W)` tensor.
    pub fn batch_tensor(&self, images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w, c) = first.dim();
        let mut flat = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dim() != (h, w, c) {
                return Err(Error::invalid("batch images differ in shape"));
            }
            flat.extend(img.iter().copied());
        }
        Ok(Tensor::from_vec(flat, (images.len(), h, w, c), self.store.device())?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(self.store.dtype())?)
    }

    /// CAM heatmaps toward the backbone's own pseudo-labels.
    pub fn heatmaps(&self, images: &[Image]) -> Result<Vec<HeatmapPyramid>> {
        let x = self.batch_tensor(images)?;
        let pyramid = backbone_forward(&x, self.backbone.as_ref())?;
        let labels = pseudo_labels(pyramid.logits())?;
        compute_heatmaps(self.backbone.as_ref(), &pyramid, &labels)
    }

    pub fn forward(&self, images: &[Image]) -> Result<ModelOutput> {
        let x = self.batch_tensor(images)?;
        let pyramid = backbone_forward(&x, self.backbone.as_ref())?;
        let z_b = pyramid.logits().clone();
        if !z_b.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
            return Err(Error::Divergence {
                term: "z_b",
                last: "none".into(),
            });
        }
        let labels = pseudo_labels(&z_b)?;
        let (Some(expert), Some(fusion), Some(udcm)) = (&self.expert, &self.fusion, &self.udcm) else {
            return Ok(ModelOutput {
                z_b,
                pseudo_labels: labels,
                expert: None,
            });
        };
        let masks = if self.ablation.use_masking {
            let heat = compute_heatmaps(self.backbone.as_ref(), &pyramid, &labels)?;
            Some(heat.iter().map(|h| compute_masks(h, self.grid)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let feats = images
            .iter()
            .enumerate()
            .map(|(i, img)| extract_expert_features(img, masks.as_ref().map(|m| &m[i]), expert.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let f = features_to_tensor(&feats, self.store.dtype(), self.store.device())?;
        let z_e = fusion.forward(&f)?;
        let cal = udcm.forward(&z_b, &z_e)?;
        Ok(ModelOutput {
            z_b,
            pseudo_labels: labels,
            expert: Some(ExpertBranch {
                z_e,
                z_hat: cal.z_hat,
                lambda: cal.lambda,
                masks,
            }),
        })
    }
}
