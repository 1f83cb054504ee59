//! Frozen domain-expert contract.
//!
//! An expert is a patch-token encoder over an `H_t x W_t` grid. It is pure:
//! the same `(image, mask)` always yields the same embedding, and an all-ones
//! mask is equivalent to no mask. In `drop` mode only kept patch tokens enter
//! the encoder; any non-patch summary token an adapter uses is always kept.

mod oracle;
mod stub;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

pub use oracle::PrototypeExpert;
pub use stub::HashExpert;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Drop,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSpec {
    pub token_grid: (usize, usize),
    pub embed_dim: usize,
    pub mask_mode: MaskMode,
}

impl ExpertSpec {
    pub fn new(token_grid: (usize, usize), embed_dim: usize, mask_mode: MaskMode) -> Result<Self> {
        if token_grid.0 * token_grid.1 < 2 {
            return Err(Error::config(format!(
                "expert token grid {}x{} must hold at least 2 tokens",
                token_grid.0, token_grid.1
            )));
        }
        if embed_dim == 0 {
            return Err(Error::config("expert embed_dim must be >= 1"));
        }
        Ok(Self {
            token_grid,
            embed_dim,
            mask_mode,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    /// Pixel size of one patch for `image`, failing if the grid does not tile it.
    pub fn patch_size(&self, image: &Image) -> Result<(usize, usize)> {
        let (h, w, c) = image.dim();
        let (gh, gw) = self.token_grid;
        if c != 3 || h % gh != 0 || w % gw != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w}x{c} cannot be split into a {gh}x{gw} patch grid"
            )));
        }
        Ok((h / gh, w / gw))
    }

    pub fn check_mask(&self, mask: &TokenMask) -> Result<()> {
        if mask.dims() != self.token_grid {
            return Err(Error::invalid(format!(
                "mask is {:?} but the expert grid is {:?}",
                mask.dims(),
                self.token_grid
            )));
        }
        Ok(())
    }
}

/// Binary keep-mask over the expert token grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMask {
    rows: usize,
    cols: usize,
    kept: Vec<bool>,
}

impl TokenMask {
    pub fn new(rows: usize, cols: usize, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                kept.len()
            )));
        }
        Ok(Self { rows, cols, kept })
    }

    pub fn all_ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            kept: vec![true; rows * cols],
        }
    }

    /// Builds a mask from 0/1 rows.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged mask rows"));
        }
        Self::new(rows.len(), cols, rows.iter().flatten().map(|&b| b != 0).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.kept[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.kept
    }

    pub fn popcount(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.kept
            .chunks(self.cols)
            .map(|r| r.iter().map(|&k| u8::from(k)).collect())
            .collect()
    }
}

pub trait ExpertAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn spec(&self) -> &ExpertSpec;

    /// Embeds `image`; `mask` selects which patch tokens the encoder sees.
    fn encode(&self, image: &Image, mask: Option<&TokenMask>) -> Result<Vec<f32>>;

    /// Digest of the frozen parameters.
    fn parameter_checksum(&self) -> String;
}

/// Validated `encode` entry point shared by all callers.
pub fn encode(expert: &dyn ExpertAdapter, image: &Image, mask: Option<&TokenMask>) -> Result<Vec<f32>> {
    let spec = expert.spec();
    spec.patch_size(image)?;
    if let Some(m) = mask {
        spec.check_mask(m)?;
        if m.popcount() == 0 && spec.mask_mode == MaskMode::Drop {
            return Err(Error::invalid("drop-mode mask keeps no tokens"));
        }
    }
    let out = expert.encode(image, mask)?;
    if out.len() != spec.embed_dim || out.iter().any(|v| !v.is_finite()) {
        return Err(Error::State(format!(
            "expert `{}` returned a malformed embedding",
            expert.name()
        )));
    }
    Ok(out)
}

/// Pixels of every patch token in row-major token order. The caller must have
/// validated the grid with [`ExpertSpec::patch_size`].
pub(crate) fn patches(image: &Image, grid: (usize, usize)) -> Vec<Vec<f32>> {
    let (h, w, _) = image.dim();
    let (ph, pw) = (h / grid.0, w / grid.1);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            let view = image.slice(ndarray::s![gr * ph..(gr + 1) * ph, gc * pw..(gc + 1) * pw, ..]);
            out.push(view.iter().copied().collect());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub name: String,
    pub embed_dim: usize,
    pub grid: [usize; 2],
    pub mask_mode: MaskMode,
    /// Embedding noise of the prototype oracle.
    pub noise: f64,
    /// Distance between oracle prototypes.
    pub separation: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            name: "stub".into(),
            embed_dim: 64,
            grid: [16, 16],
            mask_mode: MaskMode::Drop,
            noise: 0.05,
            separation: 1.0,
        }
    }
}

impl ExpertConfig {
    pub fn spec(&self) -> Result<ExpertSpec> {
        ExpertSpec::new((self.grid[0], self.grid[1]), self.embed_dim, self.mask_mode)
    }
}

/// Extra material some experts need at construction.
#[derive(Clone, Default)]
pub struct ExpertContext {
    /// Clean per-class templates (synthetic data only).
    pub class_templates: Option<Arc<Vec<Image>>>,
}

pub type ExpertFactory =
    Box<dyn Fn(&ExpertConfig, &ExpertContext) -> Result<Arc<dyn ExpertAdapter>> + Send + Sync>;

/// Name → constructor map, selected through `expert.name`.
pub struct ExpertRegistry {
    factories: BTreeMap<String, ExpertFactory>,
}

impl ExpertRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: ExpertFactory) -> Result<()> {
        if self.factories.contains_key(name) {
            return Err(Error::config(format!("expert `{name}` is already registered")));
        }
        self.factories.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, cfg: &ExpertConfig, ctx: &ExpertContext) -> Result<Arc<dyn ExpertAdapter>> {
        let factory = self.factories.get(&cfg.name).ok_or_else(|| {
            Error::config(format!(
                "unknown expert `{}`; registered: {}",
                cfg.name,
                self.names().join(", ")
            ))
        })?;
        factory(cfg, ctx)
    }
}

impl Default for ExpertRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "stub",
            Box::new(|cfg, _| Ok(Arc::new(HashExpert::new(cfg.spec()?)) as Arc<dyn ExpertAdapter>)),
        )
        .expect("fresh registry");
        r.register(
            "oracle",
            Box::new(|cfg, ctx| {
                let templates = ctx.class_templates.clone().ok_or_else(|| {
                    Error::config("the `oracle` expert needs class templates (synthetic data only)")
                })?;
                Ok(Arc::new(PrototypeExpert::new(
                    cfg.spec()?,
                    templates,
                    cfg.separation,
                    cfg.noise,
                )?) as Arc<dyn ExpertAdapter>)
            }),
        )
        .expect("fresh registry");
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_registered_with_default_width() {
        let reg = ExpertRegistry::default();
        let e = reg.build(&ExpertConfig::default(), &ExpertContext::default()).unwrap();
        assert_eq!(e.spec().embed_dim, 64);
        assert_eq!(e.spec().token_grid, (16, 16));
    }

    #[test]
    fn duplicate_and_unknown_names_are_config_errors() {
        let mut reg = ExpertRegistry::default();
        let dup = reg.register(
            "stub",
            Box::new(|cfg, _| Ok(Arc::new(HashExpert::new(cfg.spec()?)) as Arc<dyn ExpertAdapter>)),
        );
        assert!(matches!(dup, Err(Error::Config(_))));

        let cfg = ExpertConfig {
            name: "bioclip".into(),
            ..Default::default()
        };
        match reg.build(&cfg, &ExpertContext::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("oracle") && msg.contains("stub")),
            _ => panic!("expected a config error"),
        }
    }

    #[test]
    fn oracle_without_templates_is_rejected() {
        let cfg = ExpertConfig {
            name: "oracle".into(),
            ..Default::default()
        };
        let err = ExpertRegistry::default().build(&cfg, &ExpertContext::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn spec_invariants() {
        assert!(ExpertSpec::new((1, 1), 4, MaskMode::Drop).is_err());
        assert!(ExpertSpec::new((1, 2), 0, MaskMode::Drop).is_err());
        assert!(ExpertSpec::new((1, 2), 1, MaskMode::Zero).is_ok());
    }

    #[test]
    fn mask_shape_mismatch_is_invalid_input() {
        let e = HashExpert::new(ExpertSpec::new((2, 2), 8, MaskMode::Drop).unwrap());
        let img = Image::zeros((8, 8, 3));
        let bad = TokenMask::all_ones(4, 4);
        assert!(matches!(encode(&e, &img, Some(&bad)), Err(Error::InvalidInput(_))));
        let odd = Image::zeros((9, 8, 3));
        assert!(matches!(encode(&e, &odd, None), Err(Error::InvalidInput(_))));
    }
}
