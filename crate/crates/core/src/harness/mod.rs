//! Training and evaluation orchestration: configuration, model wiring,
//! optimizer, checkpoints and the bin-count sweep.

mod camdump;
mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use camdump::cam_dump;
pub use checkpoint::{expert_context, load_checkpoint, read_meta, CheckpointMeta, ExpertRef, RngState, META_FILE};
pub use config::{Ablation, DataConfig, FusionConfig, OptimizerConfig, RunConfig};
pub use model::{ExpertBranch, Model, ModelOutput, ParameterSummary};
pub use optim::Sgd;
pub use train::{class_map, epoch_order, evaluate, prepare_data, sweep_bins, train, EpochRecord, Evaluation, Prepared, SweepRow, TrainOutcome};

use crate::backbone::BackboneRegistry;
use crate::expert::ExpertRegistry;

/// The backbone and expert constructors available to a run.
#[derive(Default)]
pub struct Registries {
    pub backbones: BackboneRegistry,
    pub experts: ExpertRegistry,
}
