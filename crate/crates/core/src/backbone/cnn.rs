use candle_core::{Tensor, D};

use super::{Backbone, BackboneConfig, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Init, ParamStore};

/// Stride-2 stem followed by four stride-2 conv stages (channels `w, 2w, 4w, 8w`),
/// global average pooling and a linear classifier. A 384 input yields stage
/// maps of 96, 48, 24 and 12 pixels.
pub struct TinyCnn {
    input_size: usize,
    stem: Conv2d,
    stages: Vec<Conv2d>,
    head: Linear,
}

impl TinyCnn {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, store: &mut ParamStore) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::config("tiny-cnn width must be positive"));
        }
        let w = cfg.width;
        let stem = Conv2d::new(store, "backbone.stem", 3, w, 3, 2, 1)?;
        let mut side = stem.output_size(cfg.input_size);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = w;
        for l in 0..NUM_STAGES {
            if side < 2 {
                return Err(Error::config(format!(
                    "tiny-cnn input {} collapses before stage {}",
                    cfg.input_size,
                    l + 1
                )));
            }
            let out_ch = w << l;
            let conv = Conv2d::new(store, &format!("backbone.stage{}", l + 1), in_ch, out_ch, 3, 2, 1)?;
            side = conv.output_size(side);
            stages.push(conv);
            in_ch = out_ch;
        }
        let head = if cfg.zero_head {
            Linear::with_init(store, "backbone.head", in_ch, num_classes, Init::Zeros, Init::Zeros)?
        } else {
            Linear::new(store, "backbone.head", in_ch, num_classes)?
        };
        Ok(Self {
            input_size: cfg.input_size,
            stem,
            stages,
            head,
        })
    }

    fn classify(&self, last: &Tensor) -> Result<Tensor> {
        let pooled = last.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }
}

impl Backbone for TinyCnn {
    fn name(&self) -> &str {
        "tiny-cnn"
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn stage_taps(&self) -> [String; NUM_STAGES] {
        std::array::from_fn(|l| format!("relu(stage{} conv, stride 2)", l + 1))
    }

    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut x = self.stem.forward(images)?.relu()?;
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for conv in &self.stages {
            x = conv.forward(&x)?.relu()?;
            taps.push(x.clone());
        }
        let logits = self.classify(&x)?;
        FeaturePyramid::new(taps, logits)
    }

    fn logits_from_stage(&self, stage: usize, features: &Tensor) -> Result<Tensor> {
        if stage >= NUM_STAGES {
            return Err(Error::invalid(format!("stage index {stage} out of range")));
        }
        let mut x = features.clone();
        for conv in &self.stages[stage + 1..] {
            x = conv.forward(&x)?.relu()?;
        }
        self.classify(&x)
    }
}
