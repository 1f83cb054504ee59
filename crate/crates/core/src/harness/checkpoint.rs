use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use super::Registries;
use crate::data::{class_templates, SyntheticConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertContext;

pub const META_FILE: &str = "checkpoint.json";
const FORMAT: u32 = 1;

/// Identifies the frozen expert; its weights are never written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRef {
    pub name: String,
    pub checksum: String,
}

/// Per-sample rngs are keyed by `(seed, epoch, index)`, so this pair is the
/// whole random state needed to resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    /// 1-based epoch whose parameters were kept.
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub classes: Vec<String>,
    pub train_counts: Vec<usize>,
    pub manifest_hash: String,
    pub rng: RngState,
    pub expert: Option<ExpertRef>,
    pub param_checksum: String,
}

/// Expert construction material implied by a config.
pub fn expert_context(cfg: &RunConfig) -> ExpertContext {
    ExpertContext {
        class_templates: cfg
            .data
            .synthetic
            .as_ref()
            .map(|s: &SyntheticConfig| std::sync::Arc::new(class_templates(s))),
    }
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    model.store().save(dir)?;
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed checkpoint {}: {e}", path.display())))?;
    if meta.format != FORMAT {
        return Err(Error::data(format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

/// Rebuilds the model from its stored config and restores the parameters.
pub fn load_checkpoint(dir: &Path, registries: &Registries) -> Result<(Model, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.config.hash()? != meta.config_hash {
        return Err(Error::data("checkpoint config does not match its recorded hash"));
    }
    let model = Model::build(
        &meta.config,
        &meta.train_counts,
        &expert_context(&meta.config),
        &registries.backbones,
        &registries.experts,
    )?;
    model.store().load(dir)?;
    if model.store().checksum()? != meta.param_checksum {
        return Err(Error::data("checkpoint parameters do not match their recorded checksum"));
    }
    match (&meta.expert, model.expert()) {
        (Some(r), Some(e)) if r.name != e.name() || r.checksum != e.parameter_checksum() => {
            return Err(Error::data(format!(
                "checkpoint was trained with expert `{}` ({}), found `{}` ({})",
                r.name,
                r.checksum,
                e.name(),
                e.parameter_checksum()
            )))
        }
        _ => {}
    }
    Ok((model, meta))
}

pub(super) fn new_meta(
    model: &Model,
    cfg: &RunConfig,
    epoch: usize,
    classes: Vec<String>,
    manifest_hash: String,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format: FORMAT,
        epoch,
        config: cfg.clone(),
        config_hash: cfg.hash()?,
        classes,
        train_counts: model.train_counts().to_vec(),
        manifest_hash,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: cfg.epochs as u64,
        },
        expert: model.expert().map(|e| ExpertRef {
            name: e.name().to_string(),
            checksum: e.parameter_checksum(),
        }),
        param_checksum: model.store().checksum()?,
    })
}
