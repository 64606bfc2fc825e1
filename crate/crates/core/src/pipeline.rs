//! The staged workflow on an output directory:
//!
//! ```text
//! <out>/data/                  simulate
//! <out>/pretrain/              pretrain   (checkpoint, curve.csv, summary.json)
//! <out>/finetune-<normalizer>/ finetune   (one per configured normalizer)
//! <out>/eval/report-*.json     eval, oracle
//! ```
//!
//! Each stage writes `resolved_config.json` beside its outputs and refuses to
//! replace existing outputs unless `force` is set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Normalizer;
use crate::config::RunConfig;
use crate::eval::{build_trials, evaluate, oracle_one_best_eval, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, StbModel, TrainingStage};
use crate::sim::{build_dataset, load_split, DatasetManifest, DatasetSummary, Split};
use crate::tensor::Tensor;
use crate::train::{finetune, pretrain, write_curve, LabeledSet, TrainOutcome};
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn finetune(&self, normalizer: Normalizer) -> PathBuf {
        self.root.join(format!("finetune-{}", normalizer.name()))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self, system: &str) -> PathBuf {
        self.eval().join(format!("report-{system}.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: TrainingStage,
    pub normalizer: Option<Normalizer>,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub trainable_scalars: usize,
}

impl TrainSummary {
    fn of(outcome: &TrainOutcome, stage: TrainingStage, normalizer: Option<Normalizer>) -> Self {
        TrainSummary {
            stage,
            normalizer,
            steps: outcome.curve.len(),
            first_loss: outcome.curve.first().map_or(f64::NAN, |p| p.loss),
            final_loss: outcome.final_loss,
            final_accuracy: outcome.final_accuracy,
            trainable_scalars: outcome
                .model
                .params
                .iter()
                .filter(|(_, p)| !p.frozen)
                .map(|(_, p)| p.value.numel())
                .sum(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Clears `dir` for a fresh stage output, or refuses if it holds anything.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(Error::Overwrite(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Overwrite(path.to_path_buf()));
    }
    Ok(())
}

fn labeled(manifest: &DatasetManifest, features: Vec<Tensor>) -> Result<LabeledSet> {
    LabeledSet::new(features, manifest.labels()?, manifest.speakers.len())
}

pub fn simulate(config: &RunConfig, layout: &Layout, force: bool) -> Result<DatasetSummary> {
    let dir = layout.data();
    prepare_dir(&dir, force)?;
    let summary = build_dataset(&config.sim, &dir, config.seed)?;
    config.write_resolved(&dir)?;
    Ok(summary)
}

pub fn run_pretrain(config: &RunConfig, layout: &Layout, force: bool) -> Result<TrainSummary> {
    let (manifest, features) = load_split(&layout.data(), Split::Pretrain)?;
    let data = labeled(&manifest, features)?;
    let dir = layout.pretrain();
    prepare_dir(&dir, force)?;
    let outcome = pretrain(&data, &config.model, &config.train, config.seed)?;
    save_checkpoint(&outcome.model, &dir, TrainingStage::Pretrain)?;
    write_curve(&dir.join(CURVE_FILE), &outcome.curve)?;
    let summary = TrainSummary::of(&outcome, TrainingStage::Pretrain, None);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    config.write_resolved(&dir)?;
    Ok(summary)
}

pub fn load_pretrained(layout: &Layout) -> Result<StbModel> {
    let (model, manifest) = load_checkpoint(layout.pretrain())?;
    if manifest.stage != TrainingStage::Pretrain {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected pretrain",
            layout.pretrain().display(),
            manifest.stage
        )));
    }
    Ok(model)
}

/// One fine-tuning run per configured normalizer.
pub fn run_finetune(config: &RunConfig, layout: &Layout, force: bool) -> Result<Vec<TrainSummary>> {
    let pretrained = load_pretrained(layout)?;
    let (manifest, features) = load_split(&layout.data(), Split::Train)?;
    let data = labeled(&manifest, features)?;
    for &n in &config.train.normalizers {
        let dir = layout.finetune(n);
        if !force && dir.exists() {
            return Err(Error::Overwrite(dir));
        }
    }
    let mut summaries = Vec::new();
    for &n in &config.train.normalizers {
        let dir = layout.finetune(n);
        prepare_dir(&dir, force)?;
        let outcome = finetune(&pretrained, &data, &config.model, &config.train, n, config.seed)?;
        save_checkpoint(&outcome.model, &dir, TrainingStage::Finetune)?;
        write_curve(&dir.join(CURVE_FILE), &outcome.curve)?;
        let summary = TrainSummary::of(&outcome, TrainingStage::Finetune, Some(n));
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        config.write_resolved(&dir)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn eval_split(layout: &Layout) -> Result<(DatasetManifest, Vec<Tensor>)> {
    load_split(&layout.data(), Split::Test)
}

fn prepare_eval(config: &RunConfig, layout: &Layout, reports: &[PathBuf], force: bool) -> Result<()> {
    for r in reports {
        refuse_existing(r, force)?;
    }
    let dir = layout.eval();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    config.write_resolved(&dir)
}

/// Evaluates every fine-tuned model at each configured channel count.
pub fn run_eval(config: &RunConfig, layout: &Layout, force: bool) -> Result<Vec<EvalReport>> {
    let mut models = Vec::new();
    for &n in &config.train.normalizers {
        let (model, manifest) = load_checkpoint(layout.finetune(n))?;
        if manifest.stage != TrainingStage::Finetune {
            return Err(Error::Checkpoint(format!("{} is not a fine-tuned checkpoint", layout.finetune(n).display())));
        }
        models.push((n, model));
    }
    let (manifest, features) = eval_split(layout)?;
    let paths: Vec<PathBuf> = models.iter().map(|(n, _)| layout.report(n.name())).collect();
    prepare_eval(config, layout, &paths, force)?;
    let trials = build_trials(&manifest, config.seed)?;
    let mut reports = Vec::new();
    for ((n, model), path) in models.iter().zip(&paths) {
        let system = format!("stb-{}", n.name());
        let report = evaluate(model, &system, &manifest, &features, &trials, &config.eval.channel_counts, config.seed)?;
        write_json(path, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// The pretrained single-channel model on the closest channel.
pub fn run_oracle(config: &RunConfig, layout: &Layout, force: bool) -> Result<EvalReport> {
    let single = load_pretrained(layout)?;
    let (manifest, features) = eval_split(layout)?;
    let path = layout.report("oracle");
    prepare_eval(config, layout, std::slice::from_ref(&path), force)?;
    let trials = build_trials(&manifest, config.seed)?;
    let report = oracle_one_best_eval(&single, &manifest, &features, &trials)?;
    write_json(&path, &report)?;
    Ok(report)
}
