use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{expert_context, new_meta, save_checkpoint, CheckpointMeta};
use super::config::RunConfig;
use super::model::Model;
use super::optim::Sgd;
use super::Registries;
use crate::data::{make_synthetic_longtail, Dataset, DatasetManifest, Mode, Split};
use crate::error::{Error, Result};
use crate::expert::ExpertContext;
use crate::loss::LossBreakdown;
use crate::metrics::{compute_report, MetricsReport};
use crate::params::digest_u64;

/// Dataset and expert context for a run.
pub struct Prepared {
    pub dataset: Dataset,
    pub context: ExpertContext,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let context = expert_context(cfg);
    let dataset = match (&cfg.data.synthetic, &cfg.data.manifest) {
        (Some(s), None) => Dataset::from_synthetic(&make_synthetic_longtail(s)?),
        (None, Some(path)) => {
            let manifest = DatasetManifest::load(path)?;
            if !manifest.is_split() {
                return Err(Error::data(format!(
                    "manifest {} has no split assignment; run `split` first",
                    path.display()
                )));
            }
            Dataset::folder(manifest, cfg.data.root.as_deref(), cfg.data.preprocess.clone(), cfg.seed)?
        }
        _ => return Err(Error::config("set exactly one of data.manifest and data.synthetic")),
    };
    Ok(Prepared { dataset, context })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub train: LossBreakdown,
    pub val_acc: f64,
    #[serde(rename = "val_mF1")]
    pub val_macro_f1: f64,
    #[serde(rename = "val_wF1")]
    pub val_weighted_f1: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Validation report of the kept (best-wF1) epoch.
    pub best_val: MetricsReport,
    pub meta: CheckpointMeta,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<usize>,
    /// Ground truth in model class indices.
    pub truths: Vec<usize>,
    pub lambdas: Option<Vec<f64>>,
    /// Samples whose class the model does not know.
    pub excluded: usize,
}

/// Maps dataset class indices to model class indices by exact name.
pub fn class_map(model_classes: &[String], data_classes: &[String]) -> Result<Vec<Option<usize>>> {
    let map: Vec<Option<usize>> = data_classes
        .iter()
        .map(|name| model_classes.iter().position(|m| m == name))
        .collect();
    if map.iter().all(Option::is_none) {
        return Err(Error::data("no class names overlap between the model and the evaluation manifest"));
    }
    Ok(map)
}

/// Scores `split`. Samples of classes unknown to the model are skipped;
/// predictions of classes absent from the evaluation set simply count as wrong.
pub fn evaluate(model: &Model, data: &Dataset, split: Split, model_classes: &[String], batch: usize) -> Result<Evaluation> {
    let map = class_map(model_classes, &data.manifest().classes)?;
    let all = data.indices(split);
    let kept: Vec<(usize, usize)> = all
        .iter()
        .filter_map(|&i| map[data.label(i)].map(|c| (i, c)))
        .collect();
    if kept.is_empty() {
        return Err(Error::data(format!("split `{split}` has no samples of known classes")));
    }
    let mut predictions = Vec::with_capacity(kept.len());
    let mut lambdas: Option<Vec<f64>> = None;
    for chunk in kept.chunks(batch.max(1)) {
        let images = chunk
            .iter()
            .map(|&(i, _)| data.load(i, Mode::Eval, 0))
            .collect::<Result<Vec<_>>>()?;
        let out = model.forward(&images)?;
        predictions.extend(out.predictions()?);
        if let Some(l) = out.lambdas()? {
            lambdas.get_or_insert_with(Vec::new).extend(l);
        }
    }
    let truths: Vec<usize> = kept.iter().map(|&(_, c)| c).collect();
    let report = compute_report(
        &predictions,
        &truths,
        model.num_classes(),
        Some(model.train_counts()),
        lambdas.as_deref(),
    )?;
    Ok(Evaluation {
        report,
        predictions,
        truths,
        lambdas,
        excluded: all.len() - kept.len(),
    })
}

/// Seeded training order for `epoch`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(digest_u64(&[b"shuffle", &seed.to_le_bytes(), &epoch.to_le_bytes()]));
    order.shuffle(&mut rng);
    order
}

fn with_last(err: Error, last: Option<&LossBreakdown>) -> Error {
    match err {
        Error::Divergence { term, .. } => Error::Divergence {
            term,
            last: last.map_or_else(|| "none".to_string(), ToString::to_string),
        },
        other => other,
    }
}

/// Trains with SGD, validates after every epoch and keeps the parameters of
/// the epoch with the best validation wF1 (earliest on ties). When `out_dir`
/// is given the kept parameters are written there as a checkpoint.
pub fn train(cfg: &RunConfig, prepared: &Prepared, registries: &Registries, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = &prepared.dataset;
    let manifest = data.manifest();
    let counts = manifest.class_counts(Some(Split::Train));
    let model = Model::build(cfg, &counts, &prepared.context, &registries.backbones, &registries.experts)?;
    let expert_before = model.expert().map(|e| e.parameter_checksum());
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::data("training needs non-empty train and val splits"));
    }
    let mut opt = Sgd::new(model.trainable(), cfg.optimizer.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_finite: Option<LossBreakdown> = None;
    let mut best: Option<(usize, MetricsReport, _)> = None;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train_idx, cfg.seed, epoch as u64);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let images = chunk
                .iter()
                .map(|&i| data.load(i, Mode::Train, epoch as u64))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let out = model.forward(&images).map_err(|e| with_last(e, last_finite.as_ref()))?;
            let loss = out.loss(&labels).map_err(|e| with_last(e, last_finite.as_ref()))?;
            let grads = loss.total.backward()?;
            opt.step(&grads)?;
            let w = chunk.len() as f64;
            let b = &loss.breakdown;
            sum.l_b += w * b.l_b;
            sum.l_e += w * b.l_e;
            sum.l_cal += w * b.l_cal;
            sum.l_total += w * b.l_total;
            sum.mean_lambda += w * b.mean_lambda;
            last_finite = Some(loss.breakdown);
        }
        let n = train_idx.len() as f64;
        let train = LossBreakdown {
            l_b: sum.l_b / n,
            l_e: sum.l_e / n,
            l_cal: sum.l_cal / n,
            l_total: sum.l_total / n,
            mean_lambda: sum.mean_lambda / n,
        };
        let val = evaluate(&model, data, Split::Val, &manifest.classes, cfg.batch_size)?.report;
        let record = EpochRecord {
            epoch: epoch + 1,
            train,
            val_acc: val.acc,
            val_macro_f1: val.macro_f1,
            val_weighted_f1: val.weighted_f1,
        };
        log::info!(
            "epoch {}/{} {} | val acc {:.2} mF1 {:.2} wF1 {:.2}",
            record.epoch,
            cfg.epochs,
            record.train,
            record.val_acc,
            record.val_macro_f1,
            record.val_weighted_f1
        );
        log.push(record);
        if best.as_ref().is_none_or(|(_, r, _)| val.weighted_f1 > r.weighted_f1) {
            best = Some((epoch + 1, val, model.store().snapshot()?));
        }
    }

    let (best_epoch, best_val, params) = best.expect("at least one epoch ran");
    model.store().restore(&params)?;
    if model.expert().map(|e| e.parameter_checksum()) != expert_before {
        return Err(Error::State("expert parameters changed during training".into()));
    }
    let meta = new_meta(&model, cfg, best_epoch, manifest.classes.clone(), manifest.content_hash())?;
    if let Some(dir) = out_dir {
        save_checkpoint(dir, &model, &meta)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_val,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bins: usize,
    pub manifest_hash: String,
    pub test: MetricsReport,
}

/// One train and test evaluation per bin count; everything else is held fixed.
pub fn sweep_bins(cfg: &RunConfig, bins: &[usize], registries: &Registries) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = bins.iter().find(|&&n| n < 2) {
        return Err(Error::config(format!("bin count {bad} must be at least 2")));
    }
    let prepared = prepare_data(cfg)?;
    let manifest = prepared.dataset.manifest();
    bins.iter()
        .map(|&n| {
            let mut run = cfg.clone();
            run.udcm.bins = n;
            let outcome = train(&run, &prepared, registries, None)?;
            let test = evaluate(&outcome.model, &prepared.dataset, Split::Test, &manifest.classes, run.batch_size)?;
            Ok(SweepRow {
                bins: n,
                manifest_hash: manifest.content_hash(),
                test: test.report,
            })
        })
        .collect()
}
