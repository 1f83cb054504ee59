use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use excal_core::data::{load_rgb, preprocess_eval, scan_dataset, split_manifest, DatasetManifest, Mode, PreprocessSpec, Split};
use excal_core::harness::{
    cam_dump, evaluate, load_checkpoint, prepare_data, sweep_bins, train, Model, Registries, RunConfig,
};
use excal_core::metrics::{markdown_row, render_markdown, MetricsReport, TABLE_HEADER};
use excal_core::{Error, Result};

#[derive(Parser)]
#[command(name = "excal", version, about = "Expert-guided decision calibration for long-tailed image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan an image folder (or re-split a manifest) into train/val/test.
    Split {
        /// Directory with one sub-directory per class.
        #[arg(long, conflicts_with = "manifest")]
        root: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, epoch log and test metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config field, e.g. `--set optimizer.lr=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Build the model, print the parameter summary and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the data the checkpoint was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-stage heatmaps, masks and overlays.
    CamDump {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image files; without them, samples of `--split` are used.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 4)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test once per bin count.
    SweepBins {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        bins: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics JSON file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Markdown,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::from_toml_with_overrides("", overrides),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_split(root: Option<PathBuf>, manifest: Option<PathBuf>, seed: u64, out: &Path) -> Result<()> {
    let base = match (root, manifest) {
        (Some(r), None) => scan_dataset(&r)?,
        (None, Some(m)) => DatasetManifest::load(&m)?,
        _ => return Err(Error::config("pass --root or --manifest")),
    };
    let split = split_manifest(&base, seed)?;
    split.save(out)?;
    let [tr, va, te] = [Split::Train, Split::Val, Split::Test].map(|s| split.indices(s).len());
    println!(
        "{} classes, {} samples: train {tr}, val {va}, test {te} -> {}",
        split.num_classes(),
        split.samples.len(),
        out.display()
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, dry_run: bool, out: Option<&Path>) -> Result<()> {
    let registries = Registries::default();
    let prepared = prepare_data(cfg)?;
    if dry_run {
        let counts = prepared.dataset.manifest().class_counts(Some(Split::Train));
        let model = Model::build(cfg, &counts, &prepared.context, &registries.backbones, &registries.experts)?;
        println!("{}", model.parameter_summary());
        return Ok(());
    }
    let out = out.ok_or_else(|| Error::config("--out is required unless --dry-run"))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let outcome = train(cfg, &prepared, &registries, Some(out))?;
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    for rec in &outcome.log {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    let manifest = prepared.dataset.manifest();
    let test = evaluate(&outcome.model, &prepared.dataset, Split::Test, &manifest.classes, cfg.batch_size)?;
    write_json(&out.join("metrics.json"), &test.report)?;
    println!("kept epoch {} (val wF1 {:.2})", outcome.meta.epoch, outcome.best_val.weighted_f1);
    println!("{}", render_markdown(&[("test", &test.report)]));
    Ok(())
}

fn run_eval(ckpt: &Path, manifest: Option<PathBuf>, root: Option<PathBuf>, split: Split, out: Option<&Path>) -> Result<()> {
    let registries = Registries::default();
    let (model, meta) = load_checkpoint(ckpt, &registries)?;
    let mut cfg = meta.config.clone();
    if let Some(m) = manifest {
        cfg.data.manifest = Some(m);
        cfg.data.synthetic = None;
        cfg.data.root = root;
    }
    let prepared = prepare_data(&cfg)?;
    let eval = evaluate(&model, &prepared.dataset, split, &meta.classes, cfg.batch_size)?;
    if eval.excluded > 0 {
        log::warn!("{} samples of classes unknown to the model were excluded", eval.excluded);
    }
    match out {
        Some(p) => write_json(p, &eval.report)?,
        None => println!("{}", serde_json::to_string_pretty(&eval.report)?),
    }
    Ok(())
}

fn run_cam_dump(ckpt: &Path, images: &[PathBuf], split: Split, limit: usize, out: &Path) -> Result<()> {
    let registries = Registries::default();
    let (model, meta) = load_checkpoint(ckpt, &registries)?;
    let cfg = &meta.config;
    let items = if images.is_empty() {
        let prepared = prepare_data(cfg)?;
        let data = &prepared.dataset;
        data.indices(split)
            .into_iter()
            .take(limit)
            .map(|i| Ok((format!("{split}{i:05}"), data.load(i, Mode::Eval, 0)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        let spec: &PreprocessSpec = &cfg.data.preprocess;
        images
            .iter()
            .map(|p| {
                let img = load_rgb(p)?;
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| Error::invalid(format!("{} has no file name", p.display())))?;
                Ok((stem, preprocess_eval(&img, spec)?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let grid = (cfg.expert.grid[0], cfg.expert.grid[1]);
    let written = cam_dump(&model, &items, grid, out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn run_sweep(cfg: &RunConfig, bins: &[usize], out: Option<&Path>) -> Result<()> {
    let rows = sweep_bins(cfg, bins, &Registries::default())?;
    println!("| N | Acc | mF1 |\n|---|---|---|");
    for r in &rows {
        println!("| {} | {:.2} | {:.2} |", r.bins, r.test.acc, r.test.macro_f1);
    }
    if let Some(p) = out {
        write_json(p, &rows)?;
    }
    Ok(())
}

fn run_report(input: &Path, format: Format) -> Result<()> {
    let text = fs::read_to_string(input)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", input.display())))?;
    let report: MetricsReport = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{} is not a metrics report: {e}", input.display())))?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Markdown => {
            let name = input.file_stem().map_or("run".into(), |s| s.to_string_lossy());
            println!("{TABLE_HEADER}\n{}", markdown_row(&name, &report));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { root, manifest, seed, out } => run_split(root, manifest, seed, &out),
        Command::Train {
            config,
            overrides,
            dry_run,
            out,
        } => run_train(&load_config(config.as_deref(), &overrides)?, dry_run, out.as_deref()),
        Command::Eval {
            ckpt,
            manifest,
            root,
            split,
            out,
        } => run_eval(&ckpt, manifest, root, split, out.as_deref()),
        Command::CamDump {
            ckpt,
            images,
            split,
            limit,
            out,
        } => run_cam_dump(&ckpt, &images, split, limit, &out),
        Command::SweepBins {
            config,
            overrides,
            bins,
            out,
        } => run_sweep(&load_config(config.as_deref(), &overrides)?, &bins, out.as_deref()),
        Command::Report { input, format } => run_report(&input, format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
