//! Local prior-guided knowledge extraction: Grad-CAM heatmaps from the
//! backbone's pseudo-label, token masks for the expert grid, masked expert
//! encoding and the expert-logit fusion head.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;

use crate::backbone::{Backbone, FeaturePyramid, NUM_STAGES};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::expert::{encode, ExpertAdapter, TokenMask};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};

pub const DEFAULT_FUSION_HIDDEN: usize = 192;

/// Per-sample CAM heatmaps, one non-negative map per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPyramid {
    pub label: usize,
    pub maps: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMaskSet {
    pub masks: Vec<TokenMask>,
    pub fallback: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFeatureSet {
    pub global: Vec<f32>,
    pub masked: Vec<Vec<f32>>,
}

impl ExpertFeatureSet {
    pub fn embed_dim(&self) -> usize {
        self.global.len()
    }

    /// `[f_e^0, f_e^1, .., f_e^4]` flattened.
    pub fn concat(&self) -> Vec<f32> {
        let mut out = self.global.clone();
        for m in &self.masked {
            out.extend_from_slice(m);
        }
        out
    }
}

/// Per-channel spatial mean of `d score / d features`, taken on a detached
/// copy so no gradient reaches the training graph.
///
/// `features` is `(B, C, H, W)`; `score` maps a feature tensor to a `(B,)`
/// vector of per-sample target scores. Samples must not interact inside
/// `score`, so the gradient of the batch sum is the per-sample gradient.
pub fn channel_importance(features: &Tensor, score: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let leaf = Var::from_tensor(&features.detach())?;
    let y = score(leaf.as_tensor())?;
    let grads = y.sum_all()?.backward()?;
    let g = grads
        .get(leaf.as_tensor())
        .ok_or_else(|| Error::State("target score does not depend on the feature map; no CAM gradient".into()))?;
    Ok(g.mean(3)?.mean(2)?)
}

/// `ReLU(sum_k alpha_k * f_k)` per sample: `(B, C, H, W)`, `(B, C)` → `(B, H, W)`.
pub fn stage_heatmap(features: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4()?;
    if alpha.dims() != [b, c] {
        return Err(Error::invalid(format!(
            "channel weights {:?} do not match a feature map with {c} channels (batch {b})",
            alpha.dims()
        )));
    }
    let w = alpha.detach().reshape((b, c, 1, 1))?;
    Ok(features.detach().broadcast_mul(&w)?.sum(1)?.relu()?)
}

fn target_scores(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(logits.gather(labels, 1)?.squeeze(1)?)
}

/// Grad-CAM heatmaps for every stage, targeting `labels` (usually the
/// backbone's own pseudo-labels).
pub fn compute_heatmaps(
    backbone: &dyn Backbone,
    pyramid: &FeaturePyramid,
    labels: &[usize],
) -> Result<Vec<HeatmapPyramid>> {
    let b = pyramid.batch_size();
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    let k = pyramid.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("CAM target {bad} outside {k} classes")));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), pyramid.logits().device())?;
    let mut per_stage = Vec::with_capacity(NUM_STAGES);
    for l in 0..NUM_STAGES {
        let f = pyramid.stage(l);
        let alpha = channel_importance(f, |x| target_scores(&backbone.logits_from_stage(l, x)?, &idx))?;
        per_stage.push(heatmaps_to_arrays(&stage_heatmap(f, &alpha)?)?);
    }
    Ok((0..b)
        .map(|i| HeatmapPyramid {
            label: labels[i],
            maps: per_stage.iter().map(|s| s[i].clone()).collect(),
        })
        .collect())
}

fn heatmaps_to_arrays(h: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, hh, ww) = h.dims3()?;
    let flat = h.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            Array2::from_shape_vec((hh, ww), flat[i * hh * ww..(i + 1) * hh * ww].to_vec())
                .expect("shape matches buffer")
        })
        .collect())
}

/// Bilinear resize with half-pixel centers (no corner alignment); source
/// coordinates are clamped at the borders.
pub fn bilinear_resize(map: &Array2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = map.dim();
    let src = |dst: usize, n_in: usize, n_out: usize| {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    Array2::from_shape_fn(out, |(r, c)| {
        let (r0, r1, fr) = src(r, h, out.0);
        let (c0, c1, fc) = src(c, w, out.1);
        let top = map[[r0, c0]] * (1.0 - fc) + map[[r0, c1]] * fc;
        let bottom = map[[r1, c0]] * (1.0 - fc) + map[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Keeps the `ceil(T/2)` largest grid cells (earlier raster index wins ties).
/// An identically zero heatmap yields an all-ones mask and `true`.
pub fn binarize_to_token_grid(heatmap: &Array2<f64>, grid: (usize, usize)) -> Result<(TokenMask, bool)> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::invalid(format!("token grid {grid:?} must be at least 1x1")));
    }
    if heatmap.is_empty() {
        return Err(Error::invalid("empty heatmap"));
    }
    if heatmap.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("heatmap must be finite and non-negative"));
    }
    if heatmap.iter().all(|v| *v == 0.0) {
        return Ok((TokenMask::all_ones(grid.0, grid.1), true));
    }
    let resized = bilinear_resize(heatmap, grid);
    let values: Vec<f64> = resized.iter().copied().collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let keep = values.len().div_ceil(2);
    let mut kept = vec![false; values.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    Ok((TokenMask::new(grid.0, grid.1, kept)?, false))
}

pub fn compute_masks(heatmaps: &HeatmapPyramid, grid: (usize, usize)) -> Result<TokenMaskSet> {
    let mut masks = Vec::with_capacity(NUM_STAGES);
    let mut fallback = Vec::with_capacity(NUM_STAGES);
    for (l, h) in heatmaps.maps.iter().enumerate() {
        let (m, f) = binarize_to_token_grid(h, grid)?;
        if f {
            log::debug!("stage {} heatmap is all zero, expert sees the full image", l + 1);
        }
        masks.push(m);
        fallback.push(f);
    }
    Ok(TokenMaskSet { masks, fallback })
}

/// Global embedding plus one masked embedding per stage. Without masks the
/// stage slots repeat the global embedding.
pub fn extract_expert_features(
    image: &Image,
    masks: Option<&TokenMaskSet>,
    expert: &dyn ExpertAdapter,
) -> Result<ExpertFeatureSet> {
    let wrap = |stage: usize| {
        move |e: Error| Error::Expert {
            stage,
            source: Box::new(e),
        }
    };
    let global = encode(expert, image, None).map_err(wrap(0))?;
    let masked = match masks {
        None => vec![global.clone(); NUM_STAGES],
        Some(set) => {
            if set.masks.len() != NUM_STAGES {
                return Err(Error::invalid(format!(
                    "expected {NUM_STAGES} stage masks, got {}",
                    set.masks.len()
                )));
            }
            set.masks
                .iter()
                .enumerate()
                .map(|(l, m)| encode(expert, image, Some(m)).map_err(wrap(l + 1)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(ExpertFeatureSet { global, masked })
}

/// Stacks feature sets into a `(B, 5 * D)` tensor.
pub fn features_to_tensor(sets: &[ExpertFeatureSet], dtype: DType, device: &Device) -> Result<Tensor> {
    let d = sets.first().map_or(0, ExpertFeatureSet::embed_dim);
    let mut flat = Vec::with_capacity(sets.len() * (NUM_STAGES + 1) * d);
    for s in sets {
        if s.embed_dim() != d || s.masked.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("expert feature sets disagree on embedding size"));
        }
        flat.extend(s.concat());
    }
    Ok(Tensor::from_vec(flat, (sets.len(), (NUM_STAGES + 1) * d), device)?.to_dtype(dtype)?)
}

/// MLP from the five concatenated expert embeddings to expert logits.
pub struct FusionHead {
    layers: Vec<Linear>,
    in_dim: usize,
}

impl FusionHead {
    /// `hidden: None` gives a single linear layer. `zero_final` zeroes the last
    /// layer's weight so the output starts at its bias.
    pub fn new(
        store: &mut ParamStore,
        embed_dim: usize,
        num_classes: usize,
        hidden: Option<usize>,
        zero_final: bool,
    ) -> Result<Self> {
        let in_dim = (NUM_STAGES + 1) * embed_dim;
        if embed_dim == 0 || num_classes == 0 || hidden == Some(0) {
            return Err(Error::config("fusion head dimensions must be positive"));
        }
        let final_init = |fan_in: usize| if zero_final { Init::Zeros } else { Init::FanIn(fan_in) };
        let layers = match hidden {
            Some(h) => vec![
                Linear::new(store, "fusion.fc1", in_dim, h)?,
                Linear::with_init(store, "fusion.fc2", h, num_classes, final_init(h), Init::FanIn(h))?,
            ],
            None => vec![Linear::with_init(
                store,
                "fusion.fc",
                in_dim,
                num_classes,
                final_init(in_dim),
                Init::FanIn(in_dim),
            )?],
        };
        Ok(Self { layers, in_dim })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// `x` is `(B, 5 * D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 2 || dims[1] != self.in_dim {
            return Err(Error::config(format!(
                "fusion head expects (B, {}) expert features, got {dims:?}",
                self.in_dim
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
